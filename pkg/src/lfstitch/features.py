"""Harris corners and pyramidal Lucas-Kanade tracking.

Points are ``(u, v)`` pixel coordinates (column, row), float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from ._imaging import sample, to_gray
from .errors import InsufficientFeaturesError

HARRIS_K = 0.04
HARRIS_SIGMA = 1.5
KLT_WINDOW = 15
KLT_LEVELS = 3
KLT_ITERS = 30
KLT_EPS = 0.01
KLT_MAX_SSD = 0.01
MAX_CORNERS = 500
BUCKETS = 8
MIN_MATCHES = 8
FB_THRESHOLD = 0.1
PHASE_PEAKS = 4
SSD_RATIO = 10.0
SSD_FLOOR = 1e-4


class Correspondence(NamedTuple):
    p: np.ndarray
    q: np.ndarray
    inlier: bool
    track_error: float


@dataclass
class CorrespondenceSet:
    """Matched points ``p`` (image 1) and ``q`` (image 2), each ``(N, 2)``."""

    p: np.ndarray
    q: np.ndarray
    inlier: np.ndarray | None = None
    track_error: np.ndarray | None = None
    source: tuple = field(default=("img1", "img2"))

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 2)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, 2)
        n = len(self.p)
        self.inlier = np.ones(n, dtype=bool) if self.inlier is None else np.asarray(self.inlier, dtype=bool)
        self.track_error = np.zeros(n) if self.track_error is None else np.asarray(self.track_error, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.p)

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(self.p[i], self.q[i], bool(self.inlier[i]), float(self.track_error[i]))

    def subset(self, mask) -> "CorrespondenceSet":
        return CorrespondenceSet(self.p[mask], self.q[mask], self.inlier[mask], self.track_error[mask], self.source)

    def inliers(self) -> "CorrespondenceSet":
        return self.subset(self.inlier)

    @property
    def displacement(self) -> np.ndarray:
        return self.q - self.p


# --- Harris ----------------------------------------------------------------


def harris_response(gray: np.ndarray, k: float = HARRIS_K, sigma: float = HARRIS_SIGMA) -> np.ndarray:
    """``det(M) - k trace(M)^2`` with Sobel gradients and a Gaussian window."""
    g = np.asarray(gray, dtype=np.float64)
    ix = ndimage.sobel(g, axis=1, mode="reflect") / 8.0
    iy = ndimage.sobel(g, axis=0, mode="reflect") / 8.0
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="reflect", truncate=3.0)
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="reflect", truncate=3.0)
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="reflect", truncate=3.0)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _subpixel(R: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vertex of a quadratic fitted to the 3x3 response neighbourhood."""
    c = R[rows, cols]
    gx = 0.5 * (R[rows, cols + 1] - R[rows, cols - 1])
    gy = 0.5 * (R[rows + 1, cols] - R[rows - 1, cols])
    hxx = R[rows, cols + 1] - 2 * c + R[rows, cols - 1]
    hyy = R[rows + 1, cols] - 2 * c + R[rows - 1, cols]
    hxy = 0.25 * (R[rows + 1, cols + 1] - R[rows + 1, cols - 1] - R[rows - 1, cols + 1] + R[rows - 1, cols - 1])
    det = hxx * hyy - hxy * hxy
    ok = det > 1e-30
    safe = np.where(ok, det, 1.0)
    dx = np.where(ok, -(hyy * gx - hxy * gy) / safe, 0.0)
    dy = np.where(ok, -(hxx * gy - hxy * gx) / safe, 0.0)
    bad = (np.abs(dx) > 1.0) | (np.abs(dy) > 1.0)
    dx = np.clip(np.where(bad, 0.0, dx), -0.5, 0.5)
    dy = np.clip(np.where(bad, 0.0, dy), -0.5, 0.5)
    return cols + dx, rows + dy


def harris_corners(
    gray: np.ndarray,
    max_count: int = MAX_CORNERS,
    k: float = HARRIS_K,
    sigma: float = HARRIS_SIGMA,
    buckets: int = BUCKETS,
    border: int = 2,
) -> np.ndarray:
    """Up to ``max_count`` corners as an ``(N, 2)`` array of ``(u, v)``.

    Candidates are 3x3 local maxima above ``1e-6`` of the peak response.
    Selection round-robins over a ``buckets x buckets`` grid, best first
    within each cell, so corners spread across the image.
    """
    g = to_gray(gray)
    H, W = g.shape
    R = harris_response(g, k, sigma)
    rmax = R.max()
    if rmax <= 0:
        return np.zeros((0, 2))
    # quantize so float noise from an intensity offset cannot reorder corners
    R = np.round(R * (1e9 / rmax))
    rmax = R.max()
    local = R == ndimage.maximum_filter(R, size=3, mode="nearest")
    local &= R > 1e-6 * rmax
    b = max(border, 1)
    local[:b], local[-b:], local[:, :b], local[:, -b:] = False, False, False, False
    rows, cols = np.nonzero(local)
    if rows.size == 0:
        return np.zeros((0, 2))
    resp = R[rows, cols]
    cell = (rows * buckets // H) * buckets + (cols * buckets // W)
    by_resp = np.lexsort((cols, rows, -resp))
    rank = np.empty(rows.size, dtype=np.int64)
    sorted_cells = cell[by_resp]
    for c in np.unique(sorted_cells):
        members = by_resp[sorted_cells == c]
        rank[members] = np.arange(members.size)
    order = np.lexsort((cols, rows, -resp, rank))[:max_count]
    u, v = _subpixel(R, rows[order], cols[order])
    return np.stack([u, v], axis=1)


# --- pyramidal Lucas-Kanade --------------------------------------------------

_PYR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def build_pyramid(gray: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [np.asarray(gray, dtype=np.float64)]
    for _ in range(levels - 1):
        g = ndimage.convolve1d(pyr[-1], _PYR_KERNEL, axis=0, mode="nearest")
        g = ndimage.convolve1d(g, _PYR_KERNEL, axis=1, mode="nearest")
        pyr.append(g[::2, ::2])
    return pyr


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.correlate1d(img, [-0.5, 0.0, 0.5], axis=1, mode="nearest")
    gy = ndimage.correlate1d(img, [-0.5, 0.0, 0.5], axis=0, mode="nearest")
    return gx, gy


def _lookup(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return sample(img, x, y)


def _klt(pyr1, pyr2, pts, window, max_iter, eps, flow0):
    """Coarse-to-fine LK for every point; returns ``(q, ok)`` without filtering."""
    levels = len(pyr1)
    r = window // 2
    oy, ox = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    ox, oy = ox.ravel()[None, :], oy.ravel()[None, :]
    n = len(pts)
    flow = np.array(flow0, dtype=np.float64) / 2 ** (levels - 1)
    ok = np.ones(n, dtype=bool)
    for lvl in range(levels - 1, -1, -1):
        scale = 2.0**lvl
        I1, I2 = pyr1[lvl], pyr2[lvl]
        gx, gy = _gradients(I1)
        px = pts[:, 0:1] / scale + ox
        py = pts[:, 1:2] / scale + oy
        T = _lookup(I1, px, py)
        Ix, Iy = _lookup(gx, px, py), _lookup(gy, px, py)
        gxx, gyy, gxy = (Ix * Ix).sum(1), (Iy * Iy).sum(1), (Ix * Iy).sum(1)
        det = gxx * gyy - gxy * gxy
        ok &= det > 1e-12 * window**2
        det = np.where(ok, det, 1.0)
        d = np.zeros((n, 2))
        active = ok.copy()
        for _ in range(max_iter):
            if not active.any():
                break
            a = np.flatnonzero(active)
            qx = px[a] + (flow[a, 0] + d[a, 0])[:, None]
            qy = py[a] + (flow[a, 1] + d[a, 1])[:, None]
            e = T[a] - _lookup(I2, qx, qy)
            bx, by = (e * Ix[a]).sum(1), (e * Iy[a]).sum(1)
            ex = (gyy[a] * bx - gxy[a] * by) / det[a]
            ey = (gxx[a] * by - gxy[a] * bx) / det[a]
            d[a, 0] += ex
            d[a, 1] += ey
            active[a[np.hypot(ex, ey) < eps]] = False
        flow = flow + d
        if lvl > 0:
            flow *= 2.0
    return pts + flow, ok


def _window_ssd(g1, g2, p, q, window):
    r = window // 2
    oy, ox = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    ox, oy = ox.ravel()[None, :], oy.ravel()[None, :]
    a = _lookup(g1, p[:, 0:1] + ox, p[:, 1:2] + oy)
    b = _lookup(g2, q[:, 0:1] + ox, q[:, 1:2] + oy)
    return ((a - b) ** 2).mean(1)


def klt_track(
    img1: np.ndarray,
    img2: np.ndarray,
    points: np.ndarray,
    window: int = KLT_WINDOW,
    levels: int = KLT_LEVELS,
    max_iter: int = KLT_ITERS,
    eps: float = KLT_EPS,
    max_ssd: float = KLT_MAX_SSD,
    initial_flow=None,
) -> CorrespondenceSet:
    """Track ``points`` from ``img1`` into ``img2``.

    Coarse-to-fine Lucas-Kanade over a Gaussian pyramid. Tracks that leave
    the image, have a singular structure tensor, or end with mean squared
    window residual above ``max_ssd`` are dropped.

    ``initial_flow`` is either one ``(N, 2)`` guess or a list of candidate
    guesses; with several, each point keeps the lowest-residual outcome.
    """
    g1, g2 = to_gray(img1), to_gray(img2)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    H, W = g1.shape
    n = len(pts)
    if n == 0:
        return CorrespondenceSet(np.zeros((0, 2)), np.zeros((0, 2)))
    if initial_flow is None:
        guesses = [np.zeros((n, 2))]
    elif isinstance(initial_flow, (list, tuple)):
        guesses = [np.broadcast_to(np.asarray(g, dtype=np.float64), (n, 2)) for g in initial_flow]
    else:
        guesses = [np.broadcast_to(np.asarray(initial_flow, dtype=np.float64), (n, 2))]
    pyr1, pyr2 = build_pyramid(g1, levels), build_pyramid(g2, levels)
    best_q = np.full((n, 2), np.nan)
    best_r = np.full(n, np.inf)
    todo = np.arange(n)
    for guess in guesses:
        q, ok = _klt(pyr1, pyr2, pts[todo], window, max_iter, eps, guess[todo])
        resid = _window_ssd(g1, g2, pts[todo], q, window)
        inside = (q[:, 0] > 0) & (q[:, 0] < W - 1) & (q[:, 1] > 0) & (q[:, 1] < H - 1)
        good = ok & inside & np.isfinite(resid) & np.all(np.isfinite(q), axis=1)
        better = good & (resid < best_r[todo])
        best_q[todo[better]], best_r[todo[better]] = q[better], resid[better]
        # a clearly good fit needs no further starting points
        todo = todo[best_r[todo] > 0.1 * max_ssd]
        if todo.size == 0:
            break
    keep = best_r <= max_ssd
    return CorrespondenceSet(pts[keep], best_q[keep], None, best_r[keep])


def phase_correlation_peaks(img1: np.ndarray, img2: np.ndarray, count: int = 1) -> np.ndarray:
    """Strongest integer translations ``(du, dv)`` with ``img2(x + d) ~ img1(x)``."""
    g1, g2 = to_gray(img1), to_gray(img2)
    H, W = g1.shape
    win = np.outer(np.hanning(H), np.hanning(W))
    A = np.fft.rfft2((g1 - g1.mean()) * win)
    B = np.fft.rfft2((g2 - g2.mean()) * win)
    X = np.conj(A) * B
    X /= np.maximum(np.abs(X), 1e-12)
    r = np.fft.irfft2(X, s=(H, W))
    peaks = (r == ndimage.maximum_filter(r, size=5, mode="wrap")) & (r > 0)
    i, j = np.nonzero(peaks)
    order = np.lexsort((j, i, -r[i, j]))[:count]
    i, j = i[order], j[order]
    dv = np.where(i > H // 2, i - H, i)
    du = np.where(j > W // 2, j - W, j)
    return np.stack([du, dv], axis=1).astype(np.float64)


def match_pair(
    img1: np.ndarray,
    img2: np.ndarray,
    max_count: int = MAX_CORNERS,
    window: int = KLT_WINDOW,
    levels: int = KLT_LEVELS,
    source=("img1", "img2"),
    fb_threshold: float | None = FB_THRESHOLD,
    ssd_ratio: float | None = SSD_RATIO,
) -> CorrespondenceSet:
    """Harris corners in ``img1`` tracked into ``img2`` with KLT.

    Each point is tracked from zero motion and from the strongest
    phase-correlation shifts, so large common motion (camera rotation) does
    not exhaust the pyramid's capture range.

    Tracks are re-tracked from ``img2`` back to ``img1`` and dropped when
    they do not return within ``fb_threshold`` px of where they started, or
    when their residual exceeds ``ssd_ratio`` times the median residual.
    """
    g1 = to_gray(img1)
    H, W = g1.shape
    r = window // 2
    corners = harris_corners(g1, max_count)
    if len(corners):
        inner = (
            (corners[:, 0] >= r) & (corners[:, 0] <= W - 1 - r) & (corners[:, 1] >= r) & (corners[:, 1] <= H - 1 - r)
        )
        corners = corners[inner]
    guesses = [np.zeros(2)] + list(phase_correlation_peaks(g1, img2, PHASE_PEAKS))
    matches = klt_track(g1, img2, corners, window=window, levels=levels, initial_flow=guesses)
    if fb_threshold is not None and len(matches):
        back = klt_track(img2, g1, matches.q, window=window, levels=levels, initial_flow=matches.p - matches.q)
        # tracks lost on the way back are absent from ``back``; match them up by q
        key = {tuple(x): i for i, x in enumerate(back.p)}
        ok = np.zeros(len(matches), dtype=bool)
        for i, x in enumerate(matches.q):
            j = key.get(tuple(x))
            if j is not None:
                ok[i] = np.hypot(*(back.q[j] - matches.p[i])) <= fb_threshold
        matches = matches.subset(ok)
    if ssd_ratio is not None and len(matches):
        # occlusion-boundary corners track with a residual far above the bulk
        cut = max(ssd_ratio * float(np.median(matches.track_error)), SSD_FLOOR)
        matches = matches.subset(matches.track_error <= cut)
    matches.source = tuple(source)
    if len(matches) < MIN_MATCHES:
        raise InsufficientFeaturesError(f"only {len(matches)} correspondences survive tracking (need {MIN_MATCHES})")
    return matches
