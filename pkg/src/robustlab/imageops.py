"""Pixel-space helpers shared by ingestion and augmentation."""

from __future__ import annotations

import numpy as np


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W) or (C, H, W) array with half-pixel-center sampling."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        out = img.copy()
        return out[0] if squeeze else out

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]

    top = img[:, y0[:, None], x0[None, :]] * (1 - wx) + img[:, y0[:, None], x1[None, :]] * wx
    bottom = img[:, y1[:, None], x0[None, :]] * (1 - wx) + img[:, y1[:, None], x1[None, :]] * wx
    out = top * (1 - wy) + bottom * wy
    return out[0] if squeeze else out


def pad_to_square(image: np.ndarray) -> np.ndarray:
    """Zero-pad an (H, W) image to a centered square; the odd row/column of
    padding goes to the bottom/right."""
    img = np.asarray(image)
    h, w = img.shape
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    out = np.zeros((side, side), dtype=img.dtype)
    out[top:top + h, left:left + w] = img
    return out
