"""Oriented FAST keypoints with rotated binary descriptors.

Static-pair filtering needs a cheap, dependency-free similarity signal, so
this module implements the classic recipe directly in numpy: FAST-9 corner
detection with non-maximum suppression and Harris ranking, orientation by
intensity centroid, 256-bit steered binary descriptors over Gaussian-
smoothed intensities, and Hamming matching with a Lowe ratio test plus
one-to-one assignment.

The descriptor sampling pattern is learned offline (greedy decorrelation
over textured training patches, see tools/learn_descriptor_pattern.py) and
shipped as package data.

The similarity score is good_matches / min(keypoints_a, keypoints_b),
bounded to [0, 1]. Patches smaller than 32x32 after grayscale conversion,
or patches yielding zero keypoints, score 0.0 with the low-texture flag
set; the caller decides what to do with texture-free pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import DecodeFailure, decode_image, to_gray_array

MIN_PATCH_SIDE = 32

# Bresenham circle of radius 3: the 16 FAST test offsets, clockwise from 12 o'clock.
_CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)
_ARC_LENGTH = 9
_FAST_MARGIN = 3
_PATTERN_RADIUS = 13
_ORIENTATION_RADIUS = 15
_DESCRIPTOR_MARGIN = 16  # pattern radius + smoothing support

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)

_PATTERN_FILE = Path(__file__).parent / "data" / "descriptor_pattern.npy"
_pattern_cache: np.ndarray | None = None


def descriptor_pattern() -> np.ndarray:
    """The learned (256, 4) sampling pattern as (px, py, qx, qy) offsets."""
    global _pattern_cache
    if _pattern_cache is None:
        _pattern_cache = np.load(_PATTERN_FILE)
    return _pattern_cache


@dataclass(frozen=True)
class OrbConfig:
    max_keypoints: int = 500
    fast_threshold: int = 20
    descriptor_bits: int = 256
    match_ratio: float = 0.75
    static_similarity_threshold: float = 0.6

    def __post_init__(self) -> None:
        if self.max_keypoints < 1:
            raise ValueError("max_keypoints must be >= 1")
        if self.fast_threshold < 1:
            raise ValueError("fast_threshold must be >= 1")
        if self.descriptor_bits != 256:
            raise ValueError("descriptor length is fixed at 256 bits")
        if not 0 < self.match_ratio < 1:
            raise ValueError("match_ratio must be in (0, 1)")
        if not 0 < self.static_similarity_threshold <= 1:
            raise ValueError("static_similarity_threshold must be in (0, 1]")


@dataclass(frozen=True)
class OrbResult:
    score: float
    keypoint_counts: tuple[int, int]
    low_texture: bool


def _as_gray(patch) -> np.ndarray:
    if isinstance(patch, bytes):
        return to_gray_array(decode_image(patch))
    if isinstance(patch, Image.Image):
        return to_gray_array(patch)
    arr = np.asarray(patch, dtype=np.float64)
    if arr.ndim == 3:
        arr = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    if arr.ndim != 2:
        raise DecodeFailure(f"expected 2-D grayscale data, got shape {arr.shape}")
    return arr


def _box_sums(arr: np.ndarray, radius: int) -> np.ndarray:
    """Windowed sums with clipped borders via an integral image."""
    h, w = arr.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.float64)
    integral[1:, 1:] = arr.cumsum(axis=0).cumsum(axis=1)
    ys = np.arange(h)
    xs = np.arange(w)
    y0 = np.clip(ys - radius, 0, h)[:, None]
    y1 = np.clip(ys + radius + 1, 0, h)[:, None]
    x0 = np.clip(xs - radius, 0, w)[None, :]
    x1 = np.clip(xs + radius + 1, 0, w)[None, :]
    return integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]


def _gaussian_smooth(gray: np.ndarray, sigma: float = 2.0, ksize: int = 7) -> np.ndarray:
    xs = np.arange(ksize) - ksize // 2
    kernel = np.exp(-(xs**2) / (2 * sigma * sigma))
    kernel /= kernel.sum()
    r = ksize // 2
    padded = np.pad(gray, ((r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(gray)
    for i, kv in enumerate(kernel):
        out += kv * padded[i : i + gray.shape[0], :]
    padded = np.pad(out, ((0, 0), (r, r)), mode="reflect")
    out2 = np.zeros_like(gray)
    for i, kv in enumerate(kernel):
        out2 += kv * padded[:, i : i + gray.shape[1]]
    return out2


def _harris_response(gray: np.ndarray, block_radius: int = 3, k: float = 0.04) -> np.ndarray:
    padded = np.pad(gray, 1, mode="reflect")
    gx = (
        2 * (padded[1:-1, 2:] - padded[1:-1, :-2])
        + (padded[:-2, 2:] - padded[:-2, :-2])
        + (padded[2:, 2:] - padded[2:, :-2])
    )
    gy = (
        2 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
        + (padded[2:, :-2] - padded[:-2, :-2])
        + (padded[2:, 2:] - padded[:-2, 2:])
    )
    a = _box_sums(gx * gx, block_radius)
    b = _box_sums(gy * gy, block_radius)
    c = _box_sums(gx * gy, block_radius)
    return (a * b - c * c) - k * (a + b) ** 2


def detect_keypoints(gray: np.ndarray, config: OrbConfig) -> np.ndarray:
    """FAST-9 corners, 3x3 non-max suppressed, Harris-ranked strongest first.

    Returns an (N, 2) int array of (y, x), capped at max_keypoints.
    Keypoints keep a margin from the border so the descriptor pattern fits;
    small inputs fall back to the bare FAST margin.
    """
    h, w = gray.shape
    if h < 2 * _FAST_MARGIN + 1 or w < 2 * _FAST_MARGIN + 1:
        return np.empty((0, 2), dtype=np.intp)
    t = float(config.fast_threshold)
    center = gray[_FAST_MARGIN : h - _FAST_MARGIN, _FAST_MARGIN : w - _FAST_MARGIN]
    ring = np.empty((16,) + center.shape, dtype=np.float64)
    for i, (dx, dy) in enumerate(_CIRCLE):
        ring[i] = gray[
            _FAST_MARGIN + dy : h - _FAST_MARGIN + dy,
            _FAST_MARGIN + dx : w - _FAST_MARGIN + dx,
        ]
    bright = ring > center + t
    dark = ring < center - t

    def _has_arc(mask: np.ndarray) -> np.ndarray:
        wrapped = np.concatenate([mask, mask[: _ARC_LENGTH - 1]], axis=0)
        hit = np.zeros(center.shape, dtype=bool)
        for start in range(16):
            run = wrapped[start]
            for j in range(1, _ARC_LENGTH):
                run = run & wrapped[start + j]
                if not run.any():
                    break
            else:
                hit |= run
        return hit

    corners = _has_arc(bright) | _has_arc(dark)
    if not corners.any():
        return np.empty((0, 2), dtype=np.intp)

    # FAST contrast score drives non-max suppression only.
    diff = np.abs(ring - center) - t
    score = np.where(diff > 0, diff, 0.0).sum(axis=0)
    score = np.where(corners, score, 0.0)
    padded = np.pad(score, 1, mode="constant")
    neighborhood = np.stack(
        [
            padded[1 + dy : 1 + dy + score.shape[0], 1 + dx : 1 + dx + score.shape[1]]
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
        ]
    ).max(axis=0)
    keep = corners & (score >= neighborhood) & (score > 0)
    ys, xs = np.nonzero(keep)
    ys = ys + _FAST_MARGIN
    xs = xs + _FAST_MARGIN

    margin = _DESCRIPTOR_MARGIN if min(h, w) >= 3 * _DESCRIPTOR_MARGIN else _FAST_MARGIN
    inside = (ys >= margin) & (ys < h - margin) & (xs >= margin) & (xs < w - margin)
    ys = ys[inside]
    xs = xs[inside]
    if len(ys) == 0:
        return np.empty((0, 2), dtype=np.intp)

    harris = _harris_response(gray)[ys, xs]
    order = np.lexsort((xs, ys, -harris))[: config.max_keypoints]
    return np.column_stack((ys[order], xs[order]))


def _orientations(gray: np.ndarray, keypoints: np.ndarray) -> np.ndarray:
    """Intensity-centroid angle per keypoint, radians."""
    h, w = gray.shape
    r = _ORIENTATION_RADIUS
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    disc = (dx**2 + dy**2) <= r**2
    dxs = dx[disc]
    dys = dy[disc]
    ys = np.clip(keypoints[:, 0][:, None] + dys[None, :], 0, h - 1)
    xs = np.clip(keypoints[:, 1][:, None] + dxs[None, :], 0, w - 1)
    patch = gray[ys, xs]
    m10 = (patch * dxs[None, :]).sum(axis=1)
    m01 = (patch * dys[None, :]).sum(axis=1)
    return np.arctan2(m01, m10)


def compute_descriptors(gray: np.ndarray, keypoints: np.ndarray) -> np.ndarray:
    """Steered 256-bit descriptors packed as uint8 (N, 32)."""
    if len(keypoints) == 0:
        return np.empty((0, 32), dtype=np.uint8)
    smooth = _gaussian_smooth(gray)
    h, w = gray.shape
    angles = _orientations(gray, keypoints)
    cos = np.cos(angles)[:, None]
    sin = np.sin(angles)[:, None]
    pattern = descriptor_pattern()
    px, py, qx, qy = (pattern[:, i][None, :] for i in range(4))
    rpx = np.rint(cos * px - sin * py).astype(np.intp)
    rpy = np.rint(sin * px + cos * py).astype(np.intp)
    rqx = np.rint(cos * qx - sin * qy).astype(np.intp)
    rqy = np.rint(sin * qx + cos * qy).astype(np.intp)
    ky = keypoints[:, 0][:, None]
    kx = keypoints[:, 1][:, None]
    p_vals = smooth[np.clip(ky + rpy, 0, h - 1), np.clip(kx + rpx, 0, w - 1)]
    q_vals = smooth[np.clip(ky + rqy, 0, h - 1), np.clip(kx + rqx, 0, w - 1)]
    bits = (p_vals < q_vals).astype(np.uint8)
    return np.packbits(bits, axis=1)


def hamming_distances(da: np.ndarray, db: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distance matrix between packed descriptor sets."""
    xor = np.bitwise_xor(da[:, None, :], db[None, :, :])
    return _POPCOUNT[xor].sum(axis=2)


def match_descriptors(
    da: np.ndarray, db: np.ndarray, match_ratio: float
) -> list[tuple[int, int, int]]:
    """Ratio-tested one-to-one matches as (query_idx, train_idx, distance)."""
    if len(da) == 0 or len(db) == 0:
        return []
    dist = hamming_distances(da, db)
    best_idx = dist.argmin(axis=1)
    best = dist[np.arange(len(da)), best_idx]
    if db.shape[0] >= 2:
        masked = dist.copy()
        masked[np.arange(len(da)), best_idx] = np.iinfo(masked.dtype).max
        second = masked.min(axis=1)
        passed = best < match_ratio * second
    else:
        passed = np.ones(len(da), dtype=bool)
    candidates = sorted(
        (int(best[i]), int(i), int(best_idx[i])) for i in np.nonzero(passed)[0]
    )
    used: set[int] = set()
    matches: list[tuple[int, int, int]] = []
    for d, qi, ti in candidates:
        if ti in used:
            continue
        used.add(ti)
        matches.append((qi, ti, d))
    return matches


def orb_similarity(patch_a, patch_b, config: OrbConfig | None = None) -> OrbResult:
    """Similarity of two patches in [0, 1]; high means visually static.

    Accepts encoded bytes, PIL images, or arrays. Raises DecodeFailure for
    undecodable bytes.
    """
    config = config or OrbConfig()
    gray_a = _as_gray(patch_a)
    gray_b = _as_gray(patch_b)
    if min(gray_a.shape) < MIN_PATCH_SIDE or min(gray_b.shape) < MIN_PATCH_SIDE:
        return OrbResult(0.0, (0, 0), low_texture=True)
    kp_a = detect_keypoints(gray_a, config)
    kp_b = detect_keypoints(gray_b, config)
    counts = (len(kp_a), len(kp_b))
    if counts[0] == 0 or counts[1] == 0:
        return OrbResult(0.0, counts, low_texture=True)
    desc_a = compute_descriptors(gray_a, kp_a)
    desc_b = compute_descriptors(gray_b, kp_b)
    matches = match_descriptors(desc_a, desc_b, config.match_ratio)
    score = len(matches) / min(counts)
    return OrbResult(min(1.0, score), counts, low_texture=False)
