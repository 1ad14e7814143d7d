"""Denoising, photometric matching and EPI-slope recentering.

Angles follow the EPI convention of :mod:`lfstitch.core`: measured
counter-clockwise from the spatial axis with the angular axis pointing up, so
a line drifting by ``d`` pixels per view has angle ``atan2(1, d)`` and
``d = cot(angle)``. Farther surfaces have smaller ``d`` and larger angles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._imaging import gaussian_kernel1d, shift_image
from .core import LightField, Orientation, extract_epi
from .errors import NoStructureError, ParameterError

DENOISE_SIZE = 5
DENOISE_SIGMA = 0.6
LEVELS = 256
# edges of a true EPI line scatter far less than chance alignments inside a +-0.5 px band
MAX_LINE_RMS = 0.2
EDGE_MARGIN = 4


def denoise_gaussian(img: np.ndarray, size: int = DENOISE_SIZE, sigma: float = DENOISE_SIGMA) -> np.ndarray:
    """Separable normalised Gaussian blur with replicated borders."""
    k = gaussian_kernel1d(size, sigma)
    out = ndimage.convolve1d(np.asarray(img, dtype=np.float64), k, axis=0, mode="nearest")
    return ndimage.convolve1d(out, k, axis=1, mode="nearest")


# --- photometric matching --------------------------------------------------


@dataclass(frozen=True)
class PhotometricMap:
    """Per-channel lookup tables over the 256 input levels ``k/255``."""

    tables: np.ndarray  # (channels, 256), values in [0, 1]

    @classmethod
    def identity(cls, channels: int = 3) -> "PhotometricMap":
        return cls(np.tile(np.arange(LEVELS) / (LEVELS - 1.0), (channels, 1)))


def _channel_table(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    levels = np.arange(LEVELS, dtype=np.float64)
    hs = np.bincount(np.round(np.clip(src, 0, 1) * 255).astype(np.int64).ravel(), minlength=LEVELS).astype(float)
    hr = np.bincount(np.round(np.clip(ref, 0, 1) * 255).astype(np.int64).ravel(), minlength=LEVELS).astype(float)
    occ_s = np.flatnonzero(hs)
    occ_r = np.flatnonzero(hr)
    if occ_s.size < 2 or occ_r.size < 2:
        return levels / 255.0
    # mid-rank CDFs so equal histograms map each occupied level onto itself
    cs = (np.cumsum(hs) - hs / 2.0) / hs.sum()
    cr = (np.cumsum(hr) - hr / 2.0) / hr.sum()
    mapped = np.interp(cs[occ_s], cr[occ_r], occ_r.astype(float))
    table = np.interp(levels, occ_s, mapped)
    below = levels < occ_s[0]
    above = levels > occ_s[-1]
    table[below] = mapped[0] + (levels[below] - occ_s[0])
    table[above] = mapped[-1] + (levels[above] - occ_s[-1])
    return np.clip(table / 255.0, 0.0, 1.0)


def fit_photometric_map(src: np.ndarray, ref: np.ndarray) -> PhotometricMap:
    """Histogram matching ``CDF_ref^-1 o CDF_src`` per channel."""
    src = np.asarray(src, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if src.shape != ref.shape:
        raise ParameterError(f"image shapes differ: {src.shape} vs {ref.shape}")
    if src.ndim == 2:
        src, ref = src[..., None], ref[..., None]
    return PhotometricMap(np.stack([_channel_table(src[..., c], ref[..., c]) for c in range(src.shape[2])]))


def apply_photometric_map(pmap: PhotometricMap, img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    x = np.arange(LEVELS) / (LEVELS - 1.0)
    if img.ndim == 2:
        return np.interp(img, x, pmap.tables[0])
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[..., c] = np.interp(img[..., c], x, pmap.tables[c])
    return out


def photometric_correct(lf: LightField) -> LightField:
    """Match every view to the middle view; maps are fitted on denoised copies."""
    ref = denoise_gaussian(lf.middle_view())
    out = np.empty(lf.pixels.shape, dtype=np.float32)
    for s in range(lf.n_s):
        for t in range(lf.n_t):
            view = lf.pixels[s, t]
            pmap = fit_photometric_map(denoise_gaussian(view), ref)
            out[s, t] = apply_photometric_map(pmap, view)
    return lf.with_pixels(out)


# --- EPI slope estimation --------------------------------------------------


@dataclass(frozen=True)
class SlopeEstimate:
    angle_deg: float
    disparity_per_view: float
    support: int


@dataclass(frozen=True)
class EpiLine:
    angle_deg: float
    disparity: float  # pixels per angular step, cot(angle)
    offset: float  # spatial position at the middle angular row
    support: int  # number of angular rows on the line


def _edge_points(epi: np.ndarray, percentile: float = 90.0):
    """Thin subpixel edges: Sobel magnitude above ``percentile``, NMS along rows."""
    mag = np.hypot(ndimage.sobel(epi, axis=1, mode="nearest"), ndimage.sobel(epi, axis=0, mode="nearest"))
    thr = np.percentile(mag, percentile)
    gx = np.zeros_like(epi)
    gx[:, 1:-1] = 0.5 * (epi[:, 2:] - epi[:, :-2])
    ag = np.abs(gx)
    left, mid, right = ag[:, :-2], ag[:, 1:-1], ag[:, 2:]
    peak = (mid >= left) & (mid > right) & (mid > 1e-9)
    peak &= mag[:, 1:-1] >= thr
    # features sliding out of the view pile up against the border
    peak[:, : EDGE_MARGIN - 1] = False
    peak[:, peak.shape[1] - EDGE_MARGIN + 1 :] = False
    if thr <= 1e-9:
        peak &= mag[:, 1:-1] > 1e-9
    a, x = np.nonzero(peak)
    x = x + 1
    l, m, r = ag[a, x - 1], ag[a, x], ag[a, x + 1]
    den = l - 2 * m + r
    frac = np.where(np.abs(den) > 1e-12, 0.5 * (l - r) / np.where(den == 0, 1, den), 0.0)
    frac = np.clip(frac, -0.5, 0.5)
    return a.astype(np.float64), x + frac, np.sign(gx[a, x]).astype(np.int64)


def _refine(a, x, amid, x0, c, tol):
    """Keep the closest point per row within ``tol`` of a line and refit it."""
    res = x - (x0 + c * (a - amid))
    near = np.abs(res) <= tol
    if not near.any():
        return None
    a_n, x_n, r_n = a[near], x[near], np.abs(res[near])
    order = np.lexsort((r_n, a_n))
    a_n, x_n = a_n[order], x_n[order]
    first = np.ones(a_n.size, dtype=bool)
    first[1:] = a_n[1:] != a_n[:-1]
    a_n, x_n = a_n[first], x_n[first]
    if a_n.size < 2:
        return None
    da = a_n - amid
    A = np.stack([np.ones_like(da), da], axis=1)
    (x0, c), *_ = np.linalg.lstsq(A, x_n, rcond=None)
    rms = float(np.sqrt(np.mean((x_n - x0 - c * da) ** 2)))
    return x0, c, a_n.size, rms


def detect_epi_lines(epi: np.ndarray, step_deg: float = 0.25, min_support: float = 0.6) -> list[EpiLine]:
    """Hough voting for straight lines with angles in [45, 135] degrees.

    Votes are cast separately for rising and falling edges; a cell's support
    is the number of distinct angular rows voting for it. Peaks at or above
    ``min_support`` of the rows are taken strongest first, refined by least
    squares, and their edge points removed before weaker peaks are tried.
    """
    epi = np.asarray(epi, dtype=np.float64)
    A, N = epi.shape
    need = max(2, math.ceil(min_support * A - 1e-9))
    a, x, pol = _edge_points(epi)
    if a.size == 0:
        return []
    amid = (A - 1) / 2.0
    thetas = np.deg2rad(np.arange(45.0, 135.0 + 1e-9, step_deg))
    cots = np.cos(thetas) / np.sin(thetas)
    binw = 0.5
    lo = -(abs(amid) + 2.0)
    n_bins = int(np.ceil((N - 2 * lo) / binw))

    lines: list[EpiLine] = []
    for p in (-1, 1):
        sel = pol == p
        if sel.sum() < need:
            continue
        ap, xp = a[sel], x[sel]
        x0 = xp[None, :] - (ap[None, :] - amid) * cots[:, None]
        b = np.floor((x0 - lo) / binw).astype(np.int64)
        presence = np.zeros((thetas.size, A, n_bins + 2), dtype=bool)
        jj = np.broadcast_to(np.arange(thetas.size)[:, None], b.shape)
        aa = np.broadcast_to(ap.astype(np.int64)[None, :], b.shape)
        presence[jj, aa, b + 1] = True
        core = presence[:, :, 1:-1]
        # a row supports a cell if it has a vote within one bin either side
        support = (core | presence[:, :, :-2] | presence[:, :, 2:]).sum(axis=1)
        # rows voting in the exact bin break ties on support plateaus
        score = support * (A + 1) + core.sum(axis=1)
        peaks = (support >= need) & (score == ndimage.maximum_filter(score, size=(9, 3), mode="constant"))
        jk = np.argwhere(peaks)
        order = np.lexsort((jk[:, 1], jk[:, 0], -score[peaks]))
        free = np.ones(ap.size, dtype=bool)
        for j, k in jk[order]:
            if free.sum() < need:
                break
            idx = np.flatnonzero(free)
            fit = _refine(ap[idx], xp[idx], amid, lo + (k + 0.5) * binw, cots[j], 1.0)
            if fit is None or fit[2] < need:
                continue
            fit = _refine(ap[idx], xp[idx], amid, fit[0], fit[1], 0.5)
            if fit is None or fit[2] < need or fit[3] > MAX_LINE_RMS or abs(fit[1]) > 1.0 + 1e-9:
                continue
            x0f, cf, n, _ = fit
            res = np.abs(xp[idx] - x0f - cf * (ap[idx] - amid))
            free[idx[res <= 0.5]] = False
            lines.append(EpiLine(math.degrees(math.atan2(1.0, cf)), float(cf), float(x0f), int(n)))
    return lines


def _sampled_epis(lf: LightField, orientation: Orientation, every: int):
    if orientation == "horizontal":
        fixed = lf.middle_index[1]
        for v in range(every // 2, lf.height, every):
            yield extract_epi(lf, "horizontal", fixed, v).pixels
    else:
        fixed = lf.middle_index[0]
        for u in range(every // 2, lf.width, every):
            yield extract_epi(lf, "vertical", fixed, u).pixels


def largest_angle_family(lines: list[EpiLine], step_deg: float = 0.25, gap_deg: float = 1.0) -> tuple[float, int]:
    """Median angle (snapped to ``step_deg``) and support of the largest-angle line family.

    Lines are grouped by angle, splitting where consecutive angles differ by
    more than ``gap_deg``. A family needs at least two lines and 5% of all
    lines; otherwise it is taken as a chance alignment. If no group
    qualifies the most populated one is used.
    """
    ordered = sorted(lines, key=lambda l: l.angle_deg)
    angles = np.array([l.angle_deg for l in ordered])
    supports = np.array([l.support for l in ordered])
    groups = np.split(np.arange(angles.size), np.flatnonzero(np.diff(angles) > gap_deg) + 1)
    min_count = max(2, math.ceil(0.05 * angles.size))
    chosen = next((g for g in reversed(groups) if g.size >= min_count), None)
    if chosen is None:
        chosen = max(reversed(groups), key=len)
    angle = float(np.median(angles[chosen]))
    return round(angle / step_deg) * step_deg, int(supports[chosen].sum())


def estimate_max_epi_slope(
    lf: LightField,
    orientation: Orientation = "horizontal",
    step_deg: float = 0.25,
    every: int = 8,
    full_scan: bool = False,
    min_support: float = 0.6,
) -> SlopeEstimate:
    """Angle of the steepest-angled (farthest) line family over sampled EPIs.

    EPIs are taken at every ``every``-th row (horizontal) or column
    (vertical) through the middle angular row/column, or at all of them with
    ``full_scan``.
    """
    extent = lf.n_s if orientation == "horizontal" else lf.n_t
    if extent < 3:
        raise ParameterError(f"need at least 3 views along {orientation} axis, got {extent}")
    if step_deg <= 0:
        raise ParameterError("hough step must be positive")
    lines: list[EpiLine] = []
    for epi in _sampled_epis(lf, orientation, 1 if full_scan else every):
        lines.extend(detect_epi_lines(epi, step_deg, min_support))
    if not lines:
        raise NoStructureError(f"no EPI line reaches {min_support:.0%} support ({orientation})")
    angle, support = largest_angle_family(lines, step_deg)
    d = 0.0 if angle == 90.0 else 1.0 / math.tan(math.radians(angle))
    return SlopeEstimate(angle, d, support)


# --- recentering -----------------------------------------------------------


def apply_recentering(lf: LightField, d_s: float, d_t: float) -> LightField:
    """Translate view ``(s, t)`` by ``(-d_s (s - s_mid), -d_t (t - t_mid))``."""
    s_mid, t_mid = lf.center
    out = np.empty(lf.pixels.shape, dtype=np.float32)
    for s in range(lf.n_s):
        for t in range(lf.n_t):
            out[s, t] = shift_image(lf.pixels[s, t], d_s * (s - s_mid), d_t * (t - t_mid))
    return lf.with_pixels(out)


def estimate_recentering(lf: LightField, step_deg: float = 0.25, full_scan: bool = False) -> tuple[float, float]:
    """Per-view disparity of the farthest depth along s and t.

    Axes with fewer than three views get zero.
    """
    kw = dict(step_deg=step_deg, full_scan=full_scan)
    d_s = estimate_max_epi_slope(lf, "horizontal", **kw).disparity_per_view if lf.n_s >= 3 else 0.0
    d_t = estimate_max_epi_slope(lf, "vertical", **kw).disparity_per_view if lf.n_t >= 3 else 0.0
    return d_s, d_t


def recenter_to_farthest_depth(lf: LightField, step_deg: float = 0.25, full_scan: bool = False) -> LightField:
    d_s, d_t = estimate_recentering(lf, step_deg, full_scan)
    return apply_recentering(lf, d_s, d_t)
