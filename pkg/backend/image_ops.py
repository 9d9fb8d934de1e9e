# backend/image_ops.py
"""
Channel-first image helpers shared by dataset loading and augmentation.
Images are float arrays of shape (c, h, w).
"""

import numpy as np

from backend.errors import DimensionError


def _axis_weights(in_size: int, out_size: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if image.ndim != 3:
        raise DimensionError(f"expected a (c, h, w) image, got shape {image.shape}", axis="ndim")
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"cannot resize to {out_h}x{out_w}", axis="height" if out_h <= 0 else "width")
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    y0, y1, wy = _axis_weights(h, out_h)
    x0, x1, wx = _axis_weights(w, out_w)
    img = image.astype(np.float64)
    wx = wx[None, None, :]
    top = img[:, y0][:, :, x0] + wx * (img[:, y0][:, :, x1] - img[:, y0][:, :, x0])
    bottom = img[:, y1][:, :, x0] + wx * (img[:, y1][:, :, x1] - img[:, y1][:, :, x0])
    out = top + wy[None, :, None] * (bottom - top)
    # interpolation never leaves the input range; clip away rounding overshoot
    return np.clip(out, image.min(), image.max()).astype(image.dtype)


def rotate_quarter(image: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Clockwise rotation by 90 degrees per turn: pixel (r, c) of a W x W image goes to (c, W-1-r)."""
    return np.ascontiguousarray(np.rot90(image, k=-(quarter_turns % 4), axes=(1, 2)))


def mirror(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, :, ::-1])


def center_fit(image: np.ndarray, size: int) -> np.ndarray:
    """Center-crops or edge-pads a square image to ``size`` x ``size``."""
    _, h, w = image.shape
    if h > size:
        top = (h - size) // 2
        image = image[:, top:top + size]
    if w > size:
        left = (w - size) // 2
        image = image[:, :, left:left + size]
    _, h, w = image.shape
    if h < size or w < size:
        pad_h, pad_w = size - h, size - w
        image = np.pad(
            image,
            ((0, 0), (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)),
            mode="edge",
        )
    return np.ascontiguousarray(image)
