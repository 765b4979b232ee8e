"""Deterministic synthetic rasters for fixtures, demos, and offline runs.

Everything here is a pure function of its seed, so pipelines exercised on
synthetic corpora are byte-reproducible across runs and machines.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def textured_canvas(seed: int, size: int = 320) -> np.ndarray:
    """Grayscale noise-plus-blobs canvas with dense corner structure."""
    rng = np.random.default_rng(seed)
    img = rng.integers(60, 200, (size, size), dtype=np.uint8).astype(np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(90):
        x, y = rng.integers(10, size - 10, 2)
        r = int(rng.integers(4, 18))
        v = int(rng.integers(0, 255))
        img[(xx - x) ** 2 + (yy - y) ** 2 < r * r] = v
    return img.astype(np.uint8)


def shifted_crop(canvas: np.ndarray, dx: int, dy: int, size: int = 200) -> np.ndarray:
    """A size x size window at (60+dx, 60+dy); dx=dy=0 is the base view."""
    return canvas[60 + dy : 60 + dy + size, 60 + dx : 60 + dx + size].copy()


def rotated_crop(canvas: np.ndarray, degrees: float, size: int = 200) -> np.ndarray:
    """The base window seen after rotating the canvas about its center."""
    pil = Image.fromarray(canvas)
    c = canvas.shape[0] // 2
    rotated = pil.rotate(degrees, resample=Image.BILINEAR, center=(c, c), fillcolor=128)
    return np.array(rotated)[60 : 60 + size, 60 : 60 + size].copy()


def scene_image(seed: int, width: int = 256, height: int = 256) -> Image.Image:
    """RGB scene of colored shapes on a gradient background."""
    rng = np.random.default_rng(seed)
    top = rng.integers(30, 120, 3)
    bottom = rng.integers(120, 220, 3)
    ramp = np.linspace(0, 1, height)[:, None, None]
    base = top[None, None, :] + ramp * (bottom - top)[None, None, :]
    base = np.broadcast_to(base, (height, width, 3)).copy()
    img = base + rng.normal(0, 6, (height, width, 3))
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(6, 12))):
        color = rng.integers(0, 255, 3)
        kind = int(rng.integers(0, 2))
        w = int(rng.integers(max(4, width // 8), max(5, width // 3 + 1)))
        h = int(rng.integers(max(4, height // 8), max(5, height // 3 + 1)))
        w = min(w, width)
        h = min(h, height)
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        if kind == 0:
            img[y : y + h, x : x + w] = color
        else:
            r = max(2, min(w, h) // 2)
            cx, cy = x + r, y + r
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
            img[mask] = color
    speckle = rng.normal(0, 10, (height, width, 3))
    img = np.clip(img + speckle, 0, 255)
    return Image.fromarray(img.astype(np.uint8), "RGB")


def scene_frame_pair(
    seed: int, width: int = 256, height: int = 256, motion: int = 30
) -> tuple[Image.Image, Image.Image]:
    """Two frames of one scene with objects displaced between them."""
    rng = np.random.default_rng(seed)
    background = np.asarray(scene_image(seed * 7 + 1, width, height), dtype=np.uint8)
    frame_a = background.copy()
    frame_b = background.copy()
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(3, 6))):
        color = rng.integers(0, 255, 3)
        r = int(rng.integers(14, 30))
        x = int(rng.integers(r + motion, width - r - motion))
        y = int(rng.integers(r + motion, height - r - motion))
        dx = int(rng.integers(-motion, motion + 1))
        dy = int(rng.integers(-motion, motion + 1))
        frame_a[(xx - x) ** 2 + (yy - y) ** 2 < r * r] = color
        frame_b[(xx - x - dx) ** 2 + (yy - y - dy) ** 2 < r * r] = color
    return Image.fromarray(frame_a, "RGB"), Image.fromarray(frame_b, "RGB")
