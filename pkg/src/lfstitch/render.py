"""Shift-and-sum refocusing, extreme views, block-matching disparity and EPIs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ._imaging import shift_image, to_gray
from .core import EPI, LightField, extract_epi
from .errors import FormatError, InconsistencyError, ParameterError

DISPARITY_WINDOW = 9
LR_TOLERANCE = 1.0
PNG16_SCALE = 256.0


@dataclass
class RefocusParams:
    """``slope`` is the refocus shift in px per angular step; mask is ``(S, T)`` bool."""

    slope: float
    aperture_mask: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.slope):
            raise ParameterError(f"slope must be finite, got {self.slope}")
        if self.aperture_mask is not None:
            self.aperture_mask = np.asarray(self.aperture_mask, dtype=bool)
            if not self.aperture_mask.any():
                raise ParameterError("aperture mask selects no views")


def aperture_from_views(lf: LightField, views) -> np.ndarray:
    mask = np.zeros((lf.n_s, lf.n_t), dtype=bool)
    for s, t in views:
        mask[s, t] = True
    return mask


def refocus(lf: LightField, params: RefocusParams) -> np.ndarray:
    """Average of views shifted by ``slope`` times their angular offset.

    Offsets are taken from the centroid of the aperture, which is the middle
    view for a full (or symmetric) aperture, so a plane whose disparity per
    step equals ``slope`` comes into focus.
    """
    mask = params.aperture_mask
    if mask is None:
        mask = np.ones((lf.n_s, lf.n_t), dtype=bool)
    if mask.shape != (lf.n_s, lf.n_t):
        raise ParameterError(f"aperture mask shape {mask.shape} does not match grid {(lf.n_s, lf.n_t)}")
    views = np.argwhere(mask)
    s_c, t_c = views.mean(axis=0)
    acc = np.zeros(lf.pixels.shape[2:], dtype=np.float64)
    for s, t in views:
        acc += shift_image(lf.pixels[s, t], params.slope * (s - s_c), params.slope * (t - t_c))
    return (acc / len(views)).astype(np.float32)


def refocus_stack(lf: LightField, slopes, aperture_mask=None) -> list[np.ndarray]:
    return [refocus(lf, RefocusParams(float(k), aperture_mask)) for k in slopes]


def extreme_views(lf: LightField, orientation: str = "horizontal") -> tuple[np.ndarray, np.ndarray]:
    """Views at both ends of one angular axis, through the middle of the other.

    Horizontal returns ``(leftmost, rightmost)`` as ``(s=0, s=S-1)``; vertical
    returns ``(bottommost, topmost)`` as ``(t=0, t=T-1)``.
    """
    s_mid, t_mid = lf.middle_index
    if orientation == "horizontal":
        return lf.view(0, t_mid), lf.view(lf.n_s - 1, t_mid)
    if orientation == "vertical":
        return lf.view(s_mid, 0), lf.view(s_mid, lf.n_t - 1)
    raise ParameterError(f"orientation must be horizontal or vertical, got {orientation!r}")


def sharpness(img: np.ndarray, region: np.ndarray | None = None, margin: int = 0) -> float:
    """Variance of the 3x3 Laplacian of the luma, optionally over ``region``."""
    g = to_gray(img)
    lap = ndimage.convolve(g, np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]), mode="nearest")
    keep = np.ones(g.shape, dtype=bool) if region is None else np.asarray(region, dtype=bool).copy()
    if margin:
        keep[:margin] = keep[-margin:] = False
        keep[:, :margin] = keep[:, -margin:] = False
    vals = lap[keep]
    return float(vals.var()) if vals.size else float("nan")


# --- disparity ----------------------------------------------------------------------


@dataclass
class DisparityMap:
    """Horizontal disparity ``D`` with ``right(u + D, v) ~ left(u, v)``."""

    values: np.ndarray
    valid: np.ndarray

    def range(self, lo: float = 2.0, hi: float = 98.0) -> float:
        """Robust spread (percentile ``hi`` minus ``lo``) of valid disparities."""
        v = self.values[self.valid]
        if v.size == 0:
            return 0.0
        a, b = np.percentile(v, [lo, hi])
        return float(b - a)

    def save_png16(self, path, scale: float = PNG16_SCALE) -> dict:
        """16-bit PNG storing ``round((d - min) * scale) + 1``; 0 marks invalid.

        A JSON sidecar next to the PNG records ``min``, ``max`` and ``scale``.
        """
        path = Path(path)
        v = self.values[self.valid]
        dmin = float(v.min()) if v.size else 0.0
        dmax = float(v.max()) if v.size else 0.0
        if (dmax - dmin) * scale + 1 > 65535:
            raise ParameterError("disparity range too large for 16-bit fixed point")
        code = np.zeros(self.values.shape, dtype=np.uint16)
        code[self.valid] = (np.round((v - dmin) * scale) + 1).astype(np.uint16)
        meta = {"min": dmin, "max": dmax, "scale": scale, "offset": 1, "invalid": 0}
        try:
            Image.fromarray(code).save(path)
            path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise FormatError(f"cannot write {path}: {exc}") from exc
        return meta


def load_png16(path) -> DisparityMap:
    path = Path(path)
    try:
        code = np.asarray(Image.open(path)).astype(np.float64)
        meta = json.loads(path.with_suffix(".json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read disparity map {path}: {exc}") from exc
    valid = code > 0
    values = np.where(valid, (code - meta.get("offset", 1)) / meta["scale"] + meta["min"], 0.0)
    return DisparityMap(values, valid)


def _cost_volume(a: np.ndarray, b: np.ndarray, disparities: np.ndarray, window: int, sign: int) -> np.ndarray:
    """Window SSD of ``a(u) - b(u + sign*D)``; NaN where ``b`` is off-image."""
    H, W = a.shape
    cost = np.empty((len(disparities), H, W))
    for i, D in enumerate(disparities):
        shifted = np.full((H, W), np.nan)
        d = sign * int(D)
        if d >= 0:
            shifted[:, : W - d] = b[:, d:]
        else:
            shifted[:, -d:] = b[:, : W + d]
        off = np.isnan(shifted)
        diff2 = np.where(off, 0.0, (a - shifted) ** 2)
        # any off-image pixel in the window invalidates it; uniform_filter is a
        # running sum, so NaNs cannot be passed through it directly
        bad = ndimage.maximum_filter(off, size=window, mode="nearest")
        cost[i] = np.where(bad, np.nan, ndimage.uniform_filter(diff2, size=window, mode="nearest"))
    return cost


def _winner(cost: np.ndarray, disparities: np.ndarray):
    c = np.where(np.isfinite(cost), cost, np.inf)
    # candidates ordered by |D| so ties (flat costs) resolve to the smallest shift
    order = np.argsort(np.abs(disparities), kind="stable")
    best_o = np.argmin(c[order], axis=0)
    best = order[best_o]
    ok = np.isfinite(np.take_along_axis(c, best[None], 0)[0])
    return best, c, ok


def _subpixel(c: np.ndarray, best: np.ndarray, disparities: np.ndarray) -> np.ndarray:
    n = len(disparities)
    i0 = np.clip(best - 1, 0, n - 1)
    i2 = np.clip(best + 1, 0, n - 1)
    c0 = np.take_along_axis(c, i0[None], 0)[0]
    c1 = np.take_along_axis(c, best[None], 0)[0]
    c2 = np.take_along_axis(c, i2[None], 0)[0]
    denom = c0 - 2 * c1 + c2
    # a zero-cost winner is an exact match; the parabola would only add bias
    inner = (best > 0) & (best < n - 1) & np.isfinite(c0) & np.isfinite(c2) & (denom > 1e-12) & (c1 > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        off = np.where(inner, 0.5 * (c0 - c2) / np.where(inner, denom, 1.0), 0.0)
    return disparities[best].astype(np.float64) + np.clip(off, -0.5, 0.5)


def disparity_map(img_left: np.ndarray, img_right: np.ndarray, max_disp: int, window: int = DISPARITY_WINDOW) -> DisparityMap:
    """Block matching over ``[-max_disp, max_disp]`` with a left-right check."""
    a, b = to_gray(img_left), to_gray(img_right)
    if a.shape != b.shape:
        raise InconsistencyError(f"image sizes differ: {a.shape} vs {b.shape}")
    H, W = a.shape
    max_disp = int(max_disp)
    if max_disp < 0 or max_disp >= W / 4:
        raise ParameterError(f"max_disp must lie in [0, width/4) = [0, {W / 4:g}), got {max_disp}")
    disps = np.arange(-max_disp, max_disp + 1)
    best_l, cost_l, ok_l = _winner(_cost_volume(a, b, disps, window, +1), disps)
    best_r, _, ok_r = _winner(_cost_volume(b, a, disps, window, -1), disps)
    d_l = _subpixel(cost_l, best_l, disps)
    # left-right consistency on integer winners
    u = np.arange(W)[None, :].repeat(H, 0)
    v = np.arange(H)[:, None].repeat(W, 1)
    ur = u + disps[best_l]
    inside = (ur >= 0) & (ur < W)
    ur = np.clip(ur, 0, W - 1)
    back = disps[best_r[v, ur]]
    valid = ok_l & inside & ok_r[v, ur] & (np.abs(disps[best_l] - back) <= LR_TOLERANCE)
    # a minimum at the edge of the searchable range (image border, or the
    # end of [-max_disp, max_disp]) is truncated, not found
    n = len(disps)
    lo = np.take_along_axis(cost_l, np.clip(best_l - 1, 0, n - 1)[None], 0)[0]
    hi = np.take_along_axis(cost_l, np.clip(best_l + 1, 0, n - 1)[None], 0)[0]
    valid &= (best_l > 0) & (best_l < n - 1) & np.isfinite(lo) & np.isfinite(hi)
    return DisparityMap(np.where(valid, d_l, 0.0), valid)


# --- EPIs ---------------------------------------------------------------------------


def render_epi_comparison(
    lf_single: LightField,
    lf_extended: LightField,
    orientation: str = "horizontal",
    fixed_spatial_index: int | None = None,
    fixed_angular_index: int | None = None,
) -> tuple[EPI, EPI]:
    """EPIs through the middle angular row of both light fields at one image line."""
    if lf_single.pixels.shape[2:] != lf_extended.pixels.shape[2:]:
        raise InconsistencyError("light fields differ in view size")
    if fixed_spatial_index is None:
        fixed_spatial_index = (lf_single.height if orientation == "horizontal" else lf_single.width) // 2
    out = []
    for lf in (lf_single, lf_extended):
        a = fixed_angular_index
        if a is None:
            a = lf.middle_index[1] if orientation == "horizontal" else lf.middle_index[0]
        out.append(extract_epi(lf, orientation, a, fixed_spatial_index))
    return out[0], out[1]


def save_image(img: np.ndarray, path) -> None:
    arr = np.asarray(img, dtype=np.float64)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(data).save(Path(path))
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc
