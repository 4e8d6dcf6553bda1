"""Intensity-image helpers: resize, flip, and box overlays, numpy only."""

from __future__ import annotations

import numpy as np

from .regions import Region


def flip_horizontal_image(image: np.ndarray) -> np.ndarray:
    """Mirror an (H, W, C) image left-right."""
    return np.ascontiguousarray(image[:, ::-1, :])


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of an (H, W, C) image to (out_h, out_w, C).

    Pixel centers are aligned at half-integer offsets, the usual
    convention that keeps a same-size resize an identity.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got rank {img.ndim}")
    h, w, _ = img.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be positive")
    if (out_h, out_w) == (h, w):
        return img.copy()

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_h, h)
    x0, x1, fx = axis_coords(out_w, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def to_rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        return np.repeat(img, 3, axis=2)
    if img.ndim == 3 and img.shape[2] == 3:
        return img.copy()
    raise ValueError(f"cannot render shape {img.shape} as RGB")


def draw_box(rgb: np.ndarray, region: Region, color, thickness: int = 1) -> None:
    """Burn a rectangle outline into an (H, W, 3) image, in place."""
    h, w, _ = rgb.shape
    x0, y0 = max(region.x0, 0), max(region.y0, 0)
    x1, y1 = min(region.x1, w), min(region.y1, h)
    t = max(1, thickness)
    color = np.asarray(color, dtype=np.float64)
    rgb[y0:min(y0 + t, y1), x0:x1] = color
    rgb[max(y1 - t, y0):y1, x0:x1] = color
    rgb[y0:y1, x0:min(x0 + t, x1)] = color
    rgb[y0:y1, max(x1 - t, x0):x1] = color
