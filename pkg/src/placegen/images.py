"""Small image utilities: [-1,1] float <-> 8-bit PNG, bilinear resize."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to uint8; values outside the range are clipped."""
    return np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 127.5 - 1.0


def save_png(img: np.ndarray, path: str | Path) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return from_uint8(arr)


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping.

    Resizing to the input size is an exact copy.  Works on (H, W) and
    (H, W, C) float arrays; output dtype follows the input.
    """
    oh, ow = out_hw
    h, w = img.shape[:2]
    if oh < 1 or ow < 1 or h < 1 or w < 1:
        raise ValueError(f"bad resize {img.shape[:2]} -> {out_hw}")
    if (oh, ow) == (h, w):
        return img.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(src).astype(int)
        frac = src - i0
        i0c = np.clip(i0, 0, n_in - 1)
        i1c = np.clip(i0 + 1, 0, n_in - 1)
        return i0c, i1c, frac

    y0, y1, fy = axis_coords(h, oh)
    x0, x1, fx = axis_coords(w, ow)
    fy = fy.reshape(-1, 1, *([1] * (img.ndim - 2)))
    fx = fx.reshape(1, -1, *([1] * (img.ndim - 2)))
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out.astype(img.dtype, copy=False)
