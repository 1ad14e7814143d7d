"""Registration of several light fields and resampling onto one regular grid.

Positions are 2-vectors ``(s, t)`` in units of the reference light field's
angular baseline, relative to the reference's middle view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree
from scipy.spatial.transform import Rotation

from ._imaging import scale_about, shift_image
from .core import LightField
from .errors import (
    DegenerateGeometryError,
    EstimationError,
    HullTooSparseError,
    InconsistencyError,
    InsufficientFeaturesError,
    LightFieldError,
    ParameterError,
    StageError,
)
from .geometry.essential import (
    apply_orientation_correction,
    estimate_relative_rotation,
    orientation_homography,
    rotation_angle_deg,
)
from .geometry.fundamental import SAMPSON_THRESHOLD
from .geometry.scale import (
    MIN_PAIR_FRACTION,
    SimilarityTransform,
    consecutive_pairs,
    farthest_similarity,
    scale_between_views,
)
from .preprocess import apply_recentering, estimate_recentering, photometric_correct

DEDUP_RADIUS = 0.05
COINCIDENT = 1e-6
HULL_TOLERANCE = 0.25


@dataclass
class Sample:
    position: np.ndarray
    image: np.ndarray
    source_id: int
    view: tuple[int, int]


@dataclass
class IrregularLightField:
    samples: list[Sample]
    intrinsics: object = None

    def __post_init__(self):
        if self.samples:
            shape = self.samples[0].image.shape
            for smp in self.samples:
                if smp.image.shape != shape:
                    raise InconsistencyError(f"sample images differ in size: {smp.image.shape} vs {shape}")
                if not np.all(np.isfinite(smp.position)):
                    raise ParameterError("sample positions must be finite")

    @property
    def positions(self) -> np.ndarray:
        return np.array([smp.position for smp in self.samples], dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class Triangulation:
    points: np.ndarray
    triangles: np.ndarray
    hull_edges: np.ndarray
    vertices: np.ndarray
    _delaunay: Delaunay | None = field(default=None, repr=False)

    def find(self, xy: np.ndarray) -> np.ndarray:
        """Index of the triangle containing each point, -1 outside the hull."""
        return self._delaunay.find_simplex(np.asarray(xy, dtype=np.float64), tol=1e-12)


@dataclass
class RigidRegistration:
    rotation: np.ndarray
    scales: np.ndarray  # (S, T)
    positions: np.ndarray  # (S, T, 2)

    def __post_init__(self):
        if np.any(~(np.asarray(self.scales) > 0)):
            raise ParameterError("per-view scales must be positive")
        if not np.all(np.isfinite(self.positions)):
            raise ParameterError("positions must be finite")


# --- translations --------------------------------------------------------------


@dataclass
class StepTranslation:
    """Mean pixel translation per angular step along s and t."""

    horizontal: np.ndarray | None
    vertical: np.ndarray | None
    n_pairs: int = 0
    n_ok: int = 0

    @property
    def per_step(self) -> np.ndarray:
        return self.horizontal if self.horizontal is not None else self.vertical


@dataclass
class WithinAnalysis:
    """Similarity fits for every consecutive view pair of one light field."""

    fits: dict  # axis -> list of ((view_a, view_b), SimilarityTransform)
    n_pairs: int

    @property
    def n_ok(self) -> int:
        return sum(len(v) for v in self.fits.values())

    def scales(self, axis: str | None = None) -> list[float]:
        axes = [axis] if axis else ["s", "t"]
        return [sim.scale for a in axes for _, sim in self.fits[a]]


def analyze_within(lf: LightField, seed: int = 0) -> WithinAnalysis:
    pairs = consecutive_pairs(lf)
    total = sum(len(v) for v in pairs.values())
    if total == 0:
        raise InsufficientFeaturesError("light field has a single view; no consecutive pairs")
    center = lf.intrinsics.principal_point
    fits = {"s": [], "t": []}
    for axis, plist in pairs.items():
        for a, b in plist:
            try:
                sim, _, _ = farthest_similarity(lf.view(*a), lf.view(*b), center, seed)
            except EstimationError:
                continue
            fits[axis].append(((a, b), sim))
    out = WithinAnalysis(fits, total)
    if out.n_ok < MIN_PAIR_FRACTION * total:
        raise InsufficientFeaturesError(f"only {out.n_ok}/{total} view pairs gave a similarity fit")
    return out


def _geomean(v) -> float:
    return float(np.exp(np.mean(np.log(np.asarray(v, dtype=np.float64))))) if len(v) else 1.0


def translation_from_analysis(an: WithinAnalysis, view_scales: np.ndarray | None = None) -> StepTranslation:
    """Average translations; ``view_scales`` rescales fits measured before scale correction."""
    steps = {}
    for axis in ("s", "t"):
        ts = []
        for (a, b), sim in an.fits[axis]:
            t = np.asarray(sim.translation, dtype=np.float64)
            if view_scales is not None:
                t = t / view_scales[b]
            ts.append(t)
        steps[axis] = np.mean(ts, axis=0) if ts else None
    return StepTranslation(steps["s"], steps["t"], an.n_pairs, an.n_ok)


def estimate_translation_within(lf: LightField, seed: int = 0) -> StepTranslation:
    """Per-step translation (px) of the farthest-depth features along each axis."""
    return translation_from_analysis(analyze_within(lf, seed))


def estimate_step_translation(lf: LightField, seed: int = 0, fallback: StepTranslation | None = None) -> StepTranslation:
    """Per-step translation from the extreme views of each axis.

    Adjacent views separate depth layers by a fraction of a pixel, so the
    farthest cluster of a consecutive pair can absorb nearer features; the
    full-aperture pair separates them ``S - 1`` times further.
    """
    s_mid, t_mid = lf.middle_index
    center = lf.intrinsics.principal_point
    ends = {"s": ((0, t_mid), (lf.n_s - 1, t_mid), lf.n_s - 1), "t": ((s_mid, 0), (s_mid, lf.n_t - 1), lf.n_t - 1)}
    steps = {}
    for axis, (a, b, n) in ends.items():
        steps[axis] = None
        if n < 1:
            continue
        try:
            sim, _, _ = farthest_similarity(lf.view(*a), lf.view(*b), center, seed)
            steps[axis] = np.asarray(sim.translation, dtype=np.float64) / n
        except EstimationError:
            if fallback is not None:
                steps[axis] = fallback.horizontal if axis == "s" else fallback.vertical
    n_pairs = fallback.n_pairs if fallback else 0
    n_ok = fallback.n_ok if fallback else 0
    return StepTranslation(steps["s"], steps["t"], n_pairs, n_ok)


def estimate_translation_between(lf_ref: LightField, lf2: LightField, seed: int = 0) -> np.ndarray:
    """Translation (px) of the farthest-depth features between the middle views."""
    sim, _, _ = farthest_similarity(lf_ref.middle_view(), lf2.middle_view(), lf_ref.intrinsics.principal_point, seed)
    return np.asarray(sim.translation, dtype=np.float64)


def offset_in_baselines(step: StepTranslation, between_px: np.ndarray) -> np.ndarray:
    """Express a pixel translation in reference baselines via the step vectors."""
    h, v = step.horizontal, step.vertical
    b = np.asarray(between_px, dtype=np.float64)
    if h is not None and v is not None:
        M = np.column_stack([h, v])
        if abs(np.linalg.det(M)) > 1e-9 * max(np.abs(M).max() ** 2, 1e-300):
            return np.linalg.solve(M, b)
    if h is not None and h @ h > 0:
        return np.array([h @ b / (h @ h), 0.0])
    if v is not None and v @ v > 0:
        return np.array([0.0, v @ b / (v @ v)])
    raise DegenerateGeometryError("reference light field has no usable per-step translation")


# --- placement -------------------------------------------------------------------


def grid_positions(lf: LightField, offset=(0.0, 0.0)) -> np.ndarray:
    s_mid, t_mid = lf.center
    s, t = np.meshgrid(np.arange(lf.n_s) - s_mid, np.arange(lf.n_t) - t_mid, indexing="ij")
    return np.stack([s + offset[0], t + offset[1]], axis=-1)


def place_samples(registrations: list[RigidRegistration], lfs: list[LightField]) -> IrregularLightField:
    """Collect every view with its registered position into one sample set."""
    if len(registrations) != len(lfs):
        raise ParameterError("one registration per light field is required")
    shape = lfs[0].pixels.shape[2:]
    samples = []
    for j, (reg, lf) in enumerate(zip(registrations, lfs)):
        if lf.pixels.shape[2:] != shape:
            raise InconsistencyError(f"light field {j} views are {lf.pixels.shape[2:4]}, reference {shape[:2]}")
        for s in range(lf.n_s):
            for t in range(lf.n_t):
                samples.append(Sample(np.asarray(reg.positions[s, t], dtype=np.float64), lf.pixels[s, t], j, (s, t)))
    return IrregularLightField(samples, lfs[0].intrinsics)


def deduplicate(ilf: IrregularLightField, radius: float = DEDUP_RADIUS) -> IrregularLightField:
    """Drop samples closer than ``radius`` to an earlier one (lower source first)."""
    order = sorted(range(len(ilf)), key=lambda i: (ilf.samples[i].source_id, i))
    kept: list[int] = []
    pts = ilf.positions
    for i in order:
        if kept and np.min(np.linalg.norm(pts[kept] - pts[i], axis=1)) < radius:
            continue
        kept.append(i)
    kept.sort()
    return IrregularLightField([ilf.samples[i] for i in kept], ilf.intrinsics)


# --- triangulation and resampling ---------------------------------------------------


def delaunay(positions) -> Triangulation:
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateGeometryError(f"triangulation needs 3 positions, got {len(pts)}")
    centered = pts - pts.mean(0)
    if np.linalg.matrix_rank(centered, tol=1e-9 * max(np.abs(centered).max(), 1e-300)) < 2:
        raise DegenerateGeometryError("positions are collinear")
    try:
        d = Delaunay(pts)
    except QhullError as exc:
        raise DegenerateGeometryError(f"triangulation failed: {exc}") from exc
    return Triangulation(pts, d.simplices.copy(), d.convex_hull.copy(), np.unique(d.simplices), d)


def interpolation_weights(point, vertices) -> np.ndarray:
    """Inverse-distance weights ``(1/d_i) / sum_j (1/d_j)``.

    A vertex closer than the coincidence tolerance takes the full weight.
    """
    d = np.linalg.norm(np.asarray(vertices, dtype=np.float64) - np.asarray(point, dtype=np.float64), axis=1)
    hit = d < COINCIDENT
    if hit.any():
        w = np.zeros(len(d))
        w[np.argmax(hit)] = 1.0
        return w
    inv = 1.0 / d
    return inv / inv.sum()


def _project_to_hull(tri: Triangulation, p: np.ndarray) -> np.ndarray:
    best, best_d = p, np.inf
    for i, j in tri.hull_edges:
        a, b = tri.points[i], tri.points[j]
        ab = b - a
        lam = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
        c = a + lam * ab
        dist = np.linalg.norm(p - c)
        if dist < best_d:
            best, best_d = c, dist
    return best, best_d


def largest_valid_rectangle(valid: np.ndarray) -> tuple[int, int, int, int]:
    """``(r0, r1, c0, c1)`` half-open bounds of the largest all-True rectangle.

    Ties keep the first rectangle found scanning rows top to bottom.
    """
    rows, cols = valid.shape
    heights = np.zeros(cols, dtype=int)
    best = (0, (0, 0, 0, 0))
    for r in range(rows):
        heights = np.where(valid[r], heights + 1, 0)
        stack: list[int] = []
        for c in range(cols + 1):
            h = heights[c] if c < cols else 0
            start = c
            while stack and heights[stack[-1]] >= h:
                top = stack.pop()
                left = stack[-1] + 1 if stack else 0
                area = heights[top] * (c - left)
                if area > best[0]:
                    best = (area, (r - heights[top] + 1, r + 1, left, c))
                start = left
            stack.append(c)
    if best[0] == 0:
        raise HullTooSparseError("no grid point lies inside the sample hull")
    return best[1]


@dataclass
class ResampleInfo:
    origin: np.ndarray  # position of output view (0, 0)
    grid_step: float
    lattice_shape: tuple[int, int]  # (n_s, n_t) before cropping
    crop: tuple[int, int, int, int]  # (s0, s1, t0, t1)
    n_copied: int
    n_interpolated: int
    max_weight_sum_error: float


def resample_regular_grid(
    ilf: IrregularLightField,
    tri: Triangulation | None = None,
    grid_step: float = 1.0,
    hull_tolerance: float = HULL_TOLERANCE,
    return_info: bool = False,
):
    """Resample the irregular samples onto the lattice ``grid_step * Z^2``.

    Grid points on a sample copy it; points inside a triangle blend its three
    images with inverse-distance weights; points just outside the hull (within
    ``hull_tolerance``) are projected onto it. The output is cropped to the
    largest rectangle of valid grid points.
    """
    if grid_step <= 0:
        raise ParameterError("grid_step must be positive")
    pts = ilf.positions
    if tri is None:
        tri = delaunay(pts)
    lo = np.ceil((pts.min(0) - hull_tolerance) / grid_step - 1e-9).astype(int)
    hi = np.floor((pts.max(0) + hull_tolerance) / grid_step + 1e-9).astype(int)
    ns, nt = hi - lo + 1
    tree = cKDTree(pts)
    plan: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    valid = np.zeros((nt, ns), dtype=bool)  # rows = t, cols = s
    worst = 0.0
    n_copy = n_interp = 0
    for i in range(ns):
        for k in range(nt):
            g = np.array([lo[0] + i, lo[1] + k], dtype=np.float64) * grid_step
            dist, nearest = tree.query(g)
            if dist < COINCIDENT:
                plan[(i, k)] = (np.array([nearest]), np.array([1.0]))
                valid[k, i] = True
                n_copy += 1
                continue
            simplex = int(tri.find(g[None])[0])
            q = g
            if simplex < 0:
                q, off = _project_to_hull(tri, g)
                if off > hull_tolerance:
                    continue
                simplex = int(tri.find(q[None])[0])
                if simplex < 0:
                    # projection landed on the boundary within round-off
                    simplex = int(tri.find((q + (tri.points.mean(0) - q) * 1e-9)[None])[0])
                    if simplex < 0:
                        continue
            idx = tri.triangles[simplex]
            w = interpolation_weights(q, tri.points[idx])
            worst = max(worst, abs(w.sum() - 1.0))
            plan[(i, k)] = (idx, w)
            valid[k, i] = True
            n_interp += 1
    r0, r1, c0, c1 = largest_valid_rectangle(valid)
    first = ilf.samples[0].image
    out = np.empty((c1 - c0, r1 - r0) + first.shape, dtype=np.float32)
    for i in range(c0, c1):
        for k in range(r0, r1):
            idx, w = plan[(i, k)]
            if len(idx) == 1 or np.count_nonzero(w) == 1:
                out[i - c0, k - r0] = ilf.samples[int(idx[np.argmax(w)])].image
            else:
                acc = np.zeros(first.shape, dtype=np.float64)
                for j, wj in zip(idx, w):
                    acc += wj * ilf.samples[int(j)].image
                out[i - c0, k - r0] = acc
    lf = LightField(np.clip(out, 0.0, 1.0), ilf.intrinsics, float(grid_step))
    if not return_info:
        return lf
    origin = (lo + np.array([c0, r0])) * grid_step
    info = ResampleInfo(origin, grid_step, (int(ns), int(nt)), (c0, c1, r0, r1), n_copy, n_interp, worst)
    return lf, info


# --- full pipeline -------------------------------------------------------------------


@dataclass
class StitchConfig:
    recenter: bool = True
    hough_step: float = 0.25
    full_epi_scan: bool = False
    grid_step: float = 1.0
    rotation_passes: int = 2
    ransac_threshold: float = SAMPSON_THRESHOLD
    dedup_radius: float = DEDUP_RADIUS
    hull_tolerance: float = HULL_TOLERANCE
    rotation_check: bool = False  # re-estimate R on the corner views and report the disagreement


def _stage(name: str, index: int, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except LightFieldError as exc:
        raise StageError(exc, stage=name, index=index) from exc


def _correct_scales(lf: LightField, scales: np.ndarray) -> LightField:
    pp = lf.intrinsics.principal_point
    out = np.empty_like(lf.pixels)
    for s in range(lf.n_s):
        for t in range(lf.n_t):
            sc = float(scales[s, t])
            out[s, t] = lf.pixels[s, t] if sc == 1.0 else scale_about(lf.pixels[s, t], 1.0 / sc, pp)
    return lf.with_pixels(out)


def _view_scales(lf: LightField, between: float, w_s: float, w_t: float) -> np.ndarray:
    s_mid, t_mid = lf.center
    s, t = np.meshgrid(np.arange(lf.n_s) - s_mid, np.arange(lf.n_t) - t_mid, indexing="ij")
    return between * w_s**s * w_t**t


def _pair_stats(sims: list[SimilarityTransform]) -> dict:
    if not sims:
        return {"n": 0}
    r = np.array([s.residual_rms for s in sims])
    return {"n": len(sims), "rms_mean": float(r.mean()), "rms_max": float(r.max())}


def _recenter_samples(ilf: IrregularLightField, d_s: float, d_t: float) -> IrregularLightField:
    out = []
    for smp in ilf.samples:
        du, dv = d_s * smp.position[0], d_t * smp.position[1]
        out.append(Sample(smp.position, shift_image(smp.image, du, dv).astype(np.float32), smp.source_id, smp.view))
    return IrregularLightField(out, ilf.intrinsics)


def stitch_with_report(lfs: list[LightField], seed: int = 42, config: StitchConfig | None = None):
    """Register, merge and resample light fields; the first is the reference.

    Returns the extended light field and a JSON-serializable report.
    """
    cfg = config or StitchConfig()
    if not lfs:
        raise ParameterError("stitch needs at least one light field")
    ref_shape = lfs[0].pixels.shape[2:]
    for j, lf in enumerate(lfs):
        if lf.pixels.shape[2:] != ref_shape:
            raise StageError(
                InconsistencyError(f"views are {lf.pixels.shape[2:4]}, reference {ref_shape[:2]}"), stage="load", index=j
            )
    K = lfs[0].intrinsics.K
    pre = [_stage("preprocess", j, photometric_correct, lf) for j, lf in enumerate(lfs)]

    d_s = d_t = 0.0
    if cfg.recenter:
        d_s, d_t = _stage("recenter", 0, estimate_recentering, pre[0], cfg.hough_step, cfg.full_epi_scan)

    report: dict = {"seed": seed, "n_light_fields": len(lfs), "recentering": {"d_s": d_s, "d_t": d_t}}
    entries = []

    if len(lfs) == 1:
        out = apply_recentering(pre[0], d_s, d_t) if cfg.recenter else pre[0]
        entries.append(
            {
                "index": 0,
                "rotation_axis_angle": [0.0, 0.0, 0.0],
                "rotation_deg": 0.0,
                "scale_between": 1.0,
                "scale_within": {"s": 1.0, "t": 1.0},
                "offset": [0.0, 0.0],
                "positions": grid_positions(out).reshape(-1, 2).tolist(),
            }
        )
        report.update(
            light_fields=entries,
            grid={"rows": out.n_t, "cols": out.n_s, "origin": [-out.center[0], -out.center[1]], "step": 1.0},
        )
        return out, report

    # orientation: every light field is rotated into the reference's frame
    rect = [pre[0]]
    rotations = [np.eye(3)]
    rot_info = [None]
    rotation_checks: dict[int, float] = {}
    for j in range(1, len(lfs)):
        geo = _stage(
            "orientation", j, estimate_relative_rotation, pre[0].middle_view(), pre[j].middle_view(), K, seed, cfg.rotation_passes,
            cfg.ransac_threshold,
        )
        R = geo.rotation.R
        if cfg.rotation_check:
            # one R serves every view; a second estimate from another view pair shows how well that holds
            corner = _stage(
                "orientation", j, estimate_relative_rotation, pre[0].view(0, 0), pre[j].view(0, 0), K, seed,
                cfg.rotation_passes, cfg.ransac_threshold,
            )
            rotation_checks[j] = rotation_angle_deg(corner.rotation.R.T @ R)
        rotations.append(R)
        rot_info.append(geo)
        rect.append(apply_orientation_correction(pre[j], orientation_homography(K, R)))

    # scale: within each light field, then between middle views
    analyses = [_stage("scale", j, analyze_within, lf, seed) for j, lf in enumerate(rect)]
    within = [(_geomean(a.scales("s")), _geomean(a.scales("t"))) for a in analyses]
    pp = lfs[0].intrinsics.principal_point
    between = [1.0]
    ref_mid = _correct_scales(rect[0], _view_scales(rect[0], 1.0, *within[0])).middle_view()
    for j in range(1, len(rect)):
        mid = _correct_scales(rect[j], _view_scales(rect[j], 1.0, *within[j])).middle_view()
        between.append(_stage("scale", j, scale_between_views, ref_mid, mid, pp, seed))
    scales = [_view_scales(lf, between[j], *within[j]) for j, lf in enumerate(rect)]
    rect = [_correct_scales(lf, sc) for lf, sc in zip(rect, scales)]

    # translation: reference steps, then each light field's middle view offset
    step = _stage(
        "translation", 0, estimate_step_translation, rect[0], seed,
        translation_from_analysis(analyses[0], scales[0]),
    )
    offsets = [np.zeros(2)]
    between_px = [np.zeros(2)]
    for j in range(1, len(rect)):
        tb = _stage("translation", j, estimate_translation_between, rect[0], rect[j], seed)
        between_px.append(tb)
        offsets.append(_stage("translation", j, offset_in_baselines, step, tb))

    regs = [RigidRegistration(rotations[j], scales[j], grid_positions(rect[j], offsets[j])) for j in range(len(rect))]
    ilf = _stage("stitch", 0, place_samples, regs, rect)
    ilf = deduplicate(ilf, cfg.dedup_radius)
    if cfg.recenter:
        ilf = _recenter_samples(ilf, d_s, d_t)
    tri = _stage("stitch", 0, delaunay, ilf.positions)
    out, info = _stage(
        "stitch", 0, resample_regular_grid, ilf, tri, cfg.grid_step, cfg.hull_tolerance, return_info=True
    )

    for j in range(len(rect)):
        geo = rot_info[j]
        sims = [sim for axis in ("s", "t") for _, sim in analyses[j].fits[axis]]
        entries.append(
            {
                "index": j,
                "rotation_axis_angle": Rotation.from_matrix(rotations[j]).as_rotvec().tolist(),
                "rotation_deg": rotation_angle_deg(rotations[j]),
                "fundamental_inliers": int(geo.inliers.sum()) if geo else None,
                "fundamental_matches": len(geo.matches) if geo else None,
                "reprojection_rms_px": geo.F.refinement.rms if geo and geo.F.refinement else None,
                "rotation_check_deg": rotation_checks.get(j),
                "scale_between": between[j],
                "scale_within": {"s": within[j][0], "t": within[j][1]},
                "translation_between_px": between_px[j].tolist(),
                "offset": offsets[j].tolist(),
                "positions": regs[j].positions.reshape(-1, 2).tolist(),
                "within_pairs": {"total": analyses[j].n_pairs, **_pair_stats(sims)},
            }
        )
    report.update(
        light_fields=entries,
        step_translation_px={
            "horizontal": None if step.horizontal is None else step.horizontal.tolist(),
            "vertical": None if step.vertical is None else step.vertical.tolist(),
        },
        samples={"placed": sum(lf.n_s * lf.n_t for lf in rect), "kept": len(ilf), "triangles": len(tri.triangles)},
        grid={
            "rows": out.n_t,
            "cols": out.n_s,
            "origin": info.origin.tolist(),
            "step": info.grid_step,
            "lattice": {"cols": info.lattice_shape[0], "rows": info.lattice_shape[1]},
            "copied": info.n_copied,
            "interpolated": info.n_interpolated,
            "max_weight_sum_error": float(info.max_weight_sum_error),
        },
    )
    return out, report


def stitch(lfs: list[LightField], seed: int = 42, config: StitchConfig | None = None) -> LightField:
    return stitch_with_report(lfs, seed, config)[0]
