"""Small raster utilities shared by the data engines and mock backends.

Bounding boxes are (x, y, w, h) in pixels, origin top-left. Binary masks
travel as a compact run-length string "WxH:c0,c1,c2,..." with row-major
runs alternating zero/one and starting with the zero count.
"""

from __future__ import annotations

import base64
import hashlib
import io

import numpy as np
from PIL import Image


class DecodeFailure(ValueError):
    """Bytes did not decode to a usable raster image."""


Bbox = tuple[int, int, int, int]


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def to_b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def from_b64(data: str) -> bytes:
    return base64.b64decode(data.encode("ascii"))


def decode_image(data: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise DecodeFailure(f"cannot decode image bytes: {exc}") from exc
    if img.width == 0 or img.height == 0:
        raise DecodeFailure("image has zero extent")
    return img.convert("RGB")


def encode_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def to_gray_array(img: Image.Image) -> np.ndarray:
    """Grayscale float64 array in [0, 255]."""
    return np.asarray(img.convert("L"), dtype=np.float64)


def bbox_in_bounds(bbox: Bbox, width: int, height: int) -> bool:
    x, y, w, h = bbox
    return w > 0 and h > 0 and x >= 0 and y >= 0 and x + w <= width and y + h <= height


def crop_bbox(img: Image.Image, bbox: Bbox) -> Image.Image:
    if not bbox_in_bounds(bbox, img.width, img.height):
        raise ValueError(f"bbox {bbox} outside image {img.width}x{img.height}")
    x, y, w, h = bbox
    return img.crop((x, y, x + w, y + h))


def bbox_iou(a: Bbox, b: Bbox) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(ax, bx)
    iy = max(ay, by)
    ix2 = min(ax + aw, bx + bw)
    iy2 = min(ay + ah, by + bh)
    inter = max(0, ix2 - ix) * max(0, iy2 - iy)
    if inter == 0:
        return 0.0
    return inter / (aw * ah + bw * bh - inter)


def rect_mask_rle(width: int, height: int, bbox: Bbox) -> str:
    """RLE of a filled-rectangle mask over a width x height canvas."""
    if not bbox_in_bounds(bbox, width, height):
        raise ValueError(f"bbox {bbox} outside {width}x{height}")
    mask = np.zeros((height, width), dtype=bool)
    x, y, w, h = bbox
    mask[y : y + h, x : x + w] = True
    return encode_mask_rle(mask)


def encode_mask_rle(mask: np.ndarray) -> str:
    h, w = mask.shape
    flat = mask.reshape(-1).astype(np.int8)
    # Run boundaries; runs alternate starting from value 0.
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return f"{w}x{h}:" + ",".join(str(r) for r in runs)


def decode_mask_rle(rle: str) -> np.ndarray:
    try:
        dims, counts = rle.split(":", 1)
        w, h = (int(v) for v in dims.split("x"))
        runs = [int(c) for c in counts.split(",")] if counts else []
    except Exception as exc:
        raise DecodeFailure(f"malformed mask rle: {exc}") from exc
    flat = np.zeros(w * h, dtype=bool)
    pos = 0
    val = False
    for run in runs:
        if run:
            flat[pos : pos + run] = val
            pos += run
        val = not val
    if pos != w * h:
        raise DecodeFailure(f"mask rle covers {pos} of {w * h} pixels")
    return flat.reshape(h, w)


def concat_side_by_side(
    left: Image.Image, right: Image.Image
) -> tuple[Image.Image, int, float]:
    """Concatenate horizontally, scaling the right image to the left's height.

    Returns (canvas, seam_x, right_scale) where seam_x is the width of the
    left image on the canvas and right_scale maps right-canvas coordinates
    back to the original right image (original = canvas / right_scale).
    """
    scale = left.height / right.height
    new_w = max(1, round(right.width * scale))
    scaled = right.resize((new_w, left.height)) if scale != 1.0 else right
    canvas = Image.new("RGB", (left.width + scaled.width, left.height))
    canvas.paste(left.convert("RGB"), (0, 0))
    canvas.paste(scaled.convert("RGB"), (left.width, 0))
    return canvas, left.width, scale
