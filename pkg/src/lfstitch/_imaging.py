"""Low-level image helpers: luma, bilinear sampling, shifts and warps.

Pixel coordinates are (u, v) = (column, row) with integer values at pixel
centres. Every resampler uses bilinear interpolation with edge replication.
"""

from __future__ import annotations

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luma of an RGB image as float64; 2-D input is passed through."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.float64)
    return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]


def sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``img`` at float coordinates, replicating edges.

    ``u`` and ``v`` share a shape; the result has that shape plus the channel
    axis when ``img`` is colour.
    """
    h, w = img.shape[:2]
    u = np.minimum(np.maximum(np.asarray(u, dtype=np.float64), 0.0), w - 1.0)
    v = np.minimum(np.maximum(np.asarray(v, dtype=np.float64), 0.0), h - 1.0)
    # NaN survives the float clamp; the integer clamp below neutralizes it
    with np.errstate(invalid="ignore"):
        u0 = u.astype(np.intp)
        v0 = v.astype(np.intp)
    np.minimum(np.maximum(u0, 0, out=u0), max(w - 2, 0), out=u0)
    np.minimum(np.maximum(v0, 0, out=v0), max(h - 2, 0), out=v0)
    fu = u - u0
    fv = v - v0
    du, dv = (1 if w > 1 else 0), (w if h > 1 else 0)
    flat = img.reshape(h * w, *img.shape[2:])
    i = v0 * w
    i += u0
    if img.ndim == 3:
        fu, fv = fu[..., None], fv[..., None]
    a, b = flat[i], flat[i + du]
    top = a + (b - a) * fu
    a, b = flat[i + dv], flat[i + (dv + du)]
    bot = a + (b - a) * fu
    return (top + (bot - top) * fv).astype(img.dtype, copy=False)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def shift_image(img: np.ndarray, du: float, dv: float) -> np.ndarray:
    """Resample so that ``out(u, v) = img(u + du, v + dv)``.

    The content therefore moves by ``(-du, -dv)``. Zero shifts return an exact
    copy.
    """
    if du == 0.0 and dv == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    if float(du).is_integer() and float(dv).is_integer():
        rows = np.clip(np.arange(h) + int(dv), 0, h - 1)
        cols = np.clip(np.arange(w) + int(du), 0, w - 1)
        return img[rows][:, cols].copy()
    u, v = pixel_grid(h, w)
    return sample(img, u + du, v + dv)


def warp_homography(img: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Forward-warp ``img`` by ``H``: ``out(x) = img(H^-1 x)``, same size."""
    H = np.asarray(H, dtype=np.float64)
    if np.allclose(H, np.eye(3), atol=0.0, rtol=0.0):
        return img.copy()
    h, w = img.shape[:2]
    u, v = pixel_grid(h, w)
    Hinv = np.linalg.inv(H)
    x = Hinv[0, 0] * u + Hinv[0, 1] * v + Hinv[0, 2]
    y = Hinv[1, 0] * u + Hinv[1, 1] * v + Hinv[1, 2]
    z = Hinv[2, 0] * u + Hinv[2, 1] * v + Hinv[2, 2]
    return sample(img, x / z, y / z)


def scale_about(img: np.ndarray, scale: float, center: tuple[float, float]) -> np.ndarray:
    """Magnify content by ``scale`` about ``center`` (u, v)."""
    cx, cy = center
    H = np.array([[scale, 0.0, cx * (1.0 - scale)], [0.0, scale, cy * (1.0 - scale)], [0.0, 0.0, 1.0]])
    return warp_homography(img, H)


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) / 2.0
    x = np.arange(size) - r
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()

