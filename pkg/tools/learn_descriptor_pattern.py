#!/usr/bin/env python3
"""Regenerate the shipped descriptor sampling pattern.

Greedy decorrelation in the classic style: draw candidate point pairs on a
radius-13 disc, compute their binary test outputs over steered keypoint
patches from textured canvases (plus rotated variants), then pick 256 tests
whose bit means sit closest to 0.5 subject to a pairwise correlation cap,
relaxing the cap until the budget fills.

Writes src/interleavekit/data/descriptor_pattern.npy. Deterministic; rerun
only when the detector or smoothing changes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from interleavekit import orb
from interleavekit.synth import textured_canvas

PATTERN_SIZE = 256
CANDIDATES = 4000
TRAIN_SEEDS = (101, 202, 303, 404)
TRAIN_ROTATIONS = (0, 18)
KEYPOINTS_PER_VIEW = 300
SEED = 31
OUT = Path(__file__).resolve().parents[1] / "src" / "interleavekit" / "data" / "descriptor_pattern.npy"


def sample_disc(rng: np.random.Generator, n: int) -> np.ndarray:
    pts = rng.normal(0, 6.0, (n, 2))
    norm = np.linalg.norm(pts, axis=1)
    far = norm > orb._PATTERN_RADIUS
    pts[far] *= (orb._PATTERN_RADIUS / norm[far])[:, None]
    return pts


def candidate_bits(gray: np.ndarray, keypoints: np.ndarray, cand: np.ndarray) -> np.ndarray:
    smooth = orb._gaussian_smooth(gray)
    h, w = gray.shape
    angles = orb._orientations(gray, keypoints)
    cos = np.cos(angles)[:, None]
    sin = np.sin(angles)[:, None]
    px, py, qx, qy = (cand[:, i][None, :] for i in range(4))
    rpx = np.rint(cos * px - sin * py).astype(np.intp)
    rpy = np.rint(sin * px + cos * py).astype(np.intp)
    rqx = np.rint(cos * qx - sin * qy).astype(np.intp)
    rqy = np.rint(sin * qx + cos * qy).astype(np.intp)
    ky = keypoints[:, 0][:, None]
    kx = keypoints[:, 1][:, None]
    pv = smooth[np.clip(ky + rpy, 0, h - 1), np.clip(kx + rpx, 0, w - 1)]
    qv = smooth[np.clip(ky + rqy, 0, h - 1), np.clip(kx + rqx, 0, w - 1)]
    return pv < qv


def main() -> None:
    rng = np.random.default_rng(SEED)
    cand = np.hstack([sample_disc(rng, CANDIDATES), sample_disc(rng, CANDIDATES)])

    rows = []
    config = orb.OrbConfig(max_keypoints=KEYPOINTS_PER_VIEW)
    for seed in TRAIN_SEEDS:
        canvas = textured_canvas(seed)
        for deg in TRAIN_ROTATIONS:
            if deg:
                view = np.array(
                    Image.fromarray(canvas).rotate(deg, resample=Image.BILINEAR, fillcolor=128)
                )
            else:
                view = canvas
            gray = view.astype(np.float64)
            kps = orb.detect_keypoints(gray, config)
            if len(kps):
                rows.append(candidate_bits(gray, kps, cand))
    bits = np.vstack(rows).astype(np.float64)
    print(f"training bits: {bits.shape}")

    mean = bits.mean(axis=0)
    order = np.argsort(np.abs(mean - 0.5))
    centered = bits - mean
    norms = np.sqrt((centered**2).sum(axis=0)) + 1e-12
    unit = (centered / norms).T.copy()

    threshold = 0.12
    while True:
        chosen_idx: list[int] = []
        chosen = np.empty((PATTERN_SIZE, unit.shape[1]))
        n = 0
        for idx in order:
            if n == PATTERN_SIZE:
                break
            if norms[idx] < 1e-6:
                continue
            if n and np.abs(chosen[:n] @ unit[idx]).max() > threshold:
                continue
            chosen[n] = unit[idx]
            chosen_idx.append(idx)
            n += 1
        if n == PATTERN_SIZE:
            break
        threshold += 0.05
        if threshold > 1.0:
            raise RuntimeError("cannot fill the pattern budget")
    print(f"selected {PATTERN_SIZE} tests at correlation cap {threshold:.2f}")

    pattern = cand[np.array(chosen_idx)]
    OUT.parent.mkdir(parents=True, exist_ok=True)
    np.save(OUT, pattern)
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
