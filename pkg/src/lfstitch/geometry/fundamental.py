"""Fundamental matrix estimation.

Convention: ``p_h^T F q_h = 0`` where ``p`` lives in image 1 and ``q`` in
image 2 (homogeneous pixel coordinates). ``F q`` is therefore the epipolar
line of ``q`` in image 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateGeometryError, InsufficientFeaturesError, ParameterError
from ..features import CorrespondenceSet

SAMPSON_THRESHOLD = 1.0
RANSAC_CONFIDENCE = 0.999
RANSAC_MAX_ITER = 2000
GS_MAX_ITER = 50
GS_REL_TOL = 1e-10


@dataclass
class RefinementInfo:
    initial_cost: float
    final_cost: float
    cost_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    n_points: int = 0

    @property
    def rms(self) -> float:
        """Reprojection RMS in pixels over both images."""
        return math.sqrt(self.final_cost / max(2 * self.n_points, 1))


@dataclass
class FundamentalMatrix:
    F: np.ndarray
    refinement: RefinementInfo | None = None

    def __post_init__(self):
        F = np.asarray(self.F, dtype=np.float64)
        if F.shape != (3, 3) or not np.all(np.isfinite(F)):
            raise ParameterError("F must be a finite 3x3 matrix")
        self.F = F


def hartley_normalization(x: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _homog(x: np.ndarray) -> np.ndarray:
    return np.column_stack([x, np.ones(len(x))])


def enforce_rank2(F: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(F)
    F2 = U @ np.diag([s[0], s[1], 0.0]) @ Vt
    return F2 / np.linalg.norm(F2)


def _canonical_sign(F: np.ndarray) -> np.ndarray:
    i = np.argmax(np.abs(F))
    return F if F.flat[i] >= 0 else -F


def eight_point(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Normalized 8-point estimate with rank 2 and unit Frobenius norm."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    if len(p) < 8:
        raise InsufficientFeaturesError(f"8-point needs 8 correspondences, got {len(p)}")
    T1, T2 = hartley_normalization(p), hartley_normalization(q)
    pn, qn = _homog(p) @ T1.T, _homog(q) @ T2.T
    A = np.einsum("ni,nj->nij", pn, qn).reshape(len(p), 9)
    _, _, Vt = np.linalg.svd(A, full_matrices=len(p) < 9)
    Fn = enforce_rank2(Vt[-1].reshape(3, 3))
    F = T1.T @ Fn @ T2
    return _canonical_sign(enforce_rank2(F))


def sampson_distance(F: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """First-order geometric distance (px) of each pair to the epipolar constraint."""
    ph, qh = _homog(np.asarray(p, float)), _homog(np.asarray(q, float))
    Fq = qh @ F.T
    Ftp = ph @ F
    num = (ph * Fq).sum(1) ** 2
    den = Fq[:, 0] ** 2 + Fq[:, 1] ** 2 + Ftp[:, 0] ** 2 + Ftp[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def epipolar_residual(F: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Algebraic residual ``p^T F q`` after Hartley normalization of both sets."""
    T1, T2 = hartley_normalization(p), hartley_normalization(q)
    Fn = np.linalg.inv(T1).T @ F @ np.linalg.inv(T2)
    Fn = Fn / np.linalg.norm(Fn)
    pn, qn = _homog(p) @ T1.T, _homog(q) @ T2.T
    return np.einsum("ni,ij,nj->n", pn, Fn, qn)


def ransac_fundamental(
    matches: CorrespondenceSet,
    threshold: float = SAMPSON_THRESHOLD,
    confidence: float = RANSAC_CONFIDENCE,
    max_iter: int = RANSAC_MAX_ITER,
    seed: int = 0,
) -> tuple[FundamentalMatrix, np.ndarray]:
    """Robust F with an inlier mask; ``matches.inlier`` is left untouched."""
    p, q = matches.p, matches.q
    n = len(p)
    if n < 8:
        raise InsufficientFeaturesError(f"RANSAC needs at least 8 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best_mask, best_count, best_err = None, -1, np.inf
    needed, it = max_iter, 0
    while it < min(needed, max_iter):
        it += 1
        idx = rng.choice(n, 8, replace=False)
        try:
            F = eight_point(p[idx], q[idx])
        except np.linalg.LinAlgError:
            continue
        d = sampson_distance(F, p, q)
        mask = d <= threshold
        count = int(mask.sum())
        err = float(np.minimum(d, threshold).sum())
        if count > best_count or (count == best_count and err < best_err):
            best_mask, best_count, best_err = mask, count, err
            w = count / n
            if w >= 1.0:
                needed = it
            elif w > 0:
                needed = math.ceil(math.log(1 - confidence) / math.log(1 - w**8))
    if best_count < 8:
        raise DegenerateGeometryError(f"best RANSAC consensus has {max(best_count, 0)} inliers (need 8)")
    mask = best_mask
    for _ in range(3):
        F = eight_point(p[mask], q[mask])
        new = sampson_distance(F, p, q) <= threshold
        if new.sum() < 8 or np.array_equal(new, mask):
            break
        mask = new
    mask = sampson_distance(F, p, q) <= threshold
    return FundamentalMatrix(F), mask


# --- gold standard -----------------------------------------------------------


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0.0]])


def _cameras_from_F(Fn: np.ndarray) -> np.ndarray:
    """Camera for image 1 when image 2 has the canonical camera ``[I|0]``."""
    U, _, _ = np.linalg.svd(Fn)
    e = U[:, 2]  # left null vector: e^T F = 0
    return np.column_stack([_skew(e) @ Fn, e])


def _F_from_camera(P1: np.ndarray) -> np.ndarray:
    return _skew(P1[:, 3]) @ P1[:, :3]


def _triangulate_canonical(P1: np.ndarray, pn: np.ndarray, qn: np.ndarray):
    """Linear triangulation returning ``(u, v, rho)`` with ``X = (u, v, 1, rho)``."""
    P2 = np.hstack([np.eye(3), np.zeros((3, 1))])
    A = np.stack(
        [
            pn[:, 0:1] * P1[2] - P1[0],
            pn[:, 1:2] * P1[2] - P1[1],
            qn[:, 0:1] * P2[2] - P2[0],
            qn[:, 1:2] * P2[2] - P2[1],
        ],
        axis=1,
    )
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1, :]
    w = X[:, 2]
    ok = np.abs(w) > 1e-9 * np.abs(X).max(axis=1)
    w = np.where(ok, w, 1.0)
    return np.column_stack([X[:, 0] / w, X[:, 1] / w, X[:, 3] / w]), ok


def _residuals(P1, pts, pn, qn, s1, s2):
    X = np.column_stack([pts[:, 0], pts[:, 1], np.ones(len(pts)), pts[:, 2]])
    x = X @ P1.T
    r1 = (x[:, :2] / x[:, 2:3] - pn) / s1
    r2 = (pts[:, :2] - qn) / s2
    return r1, r2, x


def refine_fundamental_gold_standard(
    F0,
    matches: CorrespondenceSet,
    max_iter: int = GS_MAX_ITER,
    rel_tol: float = GS_REL_TOL,
) -> FundamentalMatrix:
    """Two-view bundle adjustment over the image-1 camera and 3D points.

    Image 2 keeps the canonical camera. Points are parametrized as
    ``(u, v, 1, rho)`` in normalized coordinates so their image-2 projection
    is just ``(u, v)``. Levenberg-Marquardt with a Schur complement on the
    12 camera entries; a step is accepted only when the cost drops.
    """
    F0 = np.asarray(getattr(F0, "F", F0), dtype=np.float64)
    p, q = matches.p, matches.q
    if len(p) < 8:
        raise InsufficientFeaturesError(f"gold standard needs at least 8 inliers, got {len(p)}")
    T1, T2 = hartley_normalization(p), hartley_normalization(q)
    s1, s2 = T1[0, 0], T2[0, 0]
    pn = (_homog(p) @ T1.T)[:, :2]
    qn = (_homog(q) @ T2.T)[:, :2]
    Fn = np.linalg.inv(T1).T @ F0 @ np.linalg.inv(T2)
    Fn /= np.linalg.norm(Fn)
    P1 = _cameras_from_F(Fn)
    pts, ok = _triangulate_canonical(P1, pn, qn)
    # refine on finite points only
    pts, pn, qn = pts[ok], pn[ok], qn[ok]
    n = len(pts)

    def cost_of(P, X):
        r1, r2, _ = _residuals(P, X, pn, qn, s1, s2)
        c = float((r1**2).sum() + (r2**2).sum())
        return c if np.isfinite(c) else np.inf

    cost = cost_of(P1, pts)
    info = RefinementInfo(cost, cost, [cost], 0, False, n)
    lam = 1e-3
    for it in range(max_iter):
        r1, r2, x = _residuals(P1, pts, pn, qn, s1, s2)
        X = np.column_stack([pts[:, 0], pts[:, 1], np.ones(n), pts[:, 2]])
        w = x[:, 2]
        # d(proj)/d(x) : (n, 2, 3), scaled to pixels of image 1
        D = np.zeros((n, 2, 3))
        D[:, 0, 0] = 1 / w
        D[:, 1, 1] = 1 / w
        D[:, 0, 2] = -x[:, 0] / w**2
        D[:, 1, 2] = -x[:, 1] / w**2
        D /= s1
        # camera jacobian (n, 2, 12): dx_r/dP[r, c] = X_c
        Jc = np.einsum("nkr,nc->nkrc", D, X).reshape(n, 2, 12)
        # point jacobian for image 1 (n, 2, 3) over (u, v, rho)
        Jp = D @ P1[:, [0, 1, 3]]
        U = np.einsum("nki,nkj->ij", Jc, Jc)
        Wm = np.einsum("nki,nkj->nij", Jc, Jp)
        V = np.einsum("nki,nkj->nij", Jp, Jp)
        V[:, 0, 0] += 1 / s2**2
        V[:, 1, 1] += 1 / s2**2
        gc = -np.einsum("nki,nk->i", Jc, r1)
        gp = -np.einsum("nki,nk->ni", Jp, r1)
        gp[:, :2] -= r2 / s2
        improved = False
        while lam < 1e12:
            Ud = U + lam * np.diag(np.diag(U) + 1e-12)
            Vd = V + lam * (np.einsum("nii->ni", V)[:, :, None] * np.eye(3) + 1e-12 * np.eye(3))
            Vinv = np.linalg.inv(Vd)
            WV = Wm @ Vinv
            S = Ud - np.einsum("nij,nkj->ik", WV, Wm)
            rhs = gc - np.einsum("nij,nj->i", WV, gp)
            try:
                dc = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dp = np.einsum("nij,nj->ni", Vinv, gp - np.einsum("nji,j->ni", Wm, dc))
            P_new = P1 + dc.reshape(3, 4)
            pts_new = pts + dp
            c_new = cost_of(P_new, pts_new)
            if c_new < cost:
                rel = (cost - c_new) / max(cost, 1e-300)
                # projections are invariant to the scale of P1
                P1, pts, cost = P_new / np.linalg.norm(P_new), pts_new, c_new
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        info.cost_history.append(cost)
        info.iterations = it + 1
        if not improved or rel < rel_tol or cost == 0.0:
            info.converged = True
            break
    else:
        info.converged = False
    info.final_cost = cost
    if not info.converged:
        warnings.warn("gold standard refinement hit the iteration cap", RuntimeWarning, stacklevel=2)
    Fr = T1.T @ _F_from_camera(P1) @ T2
    Fr = enforce_rank2(Fr)
    if np.sum(Fr * F0) < 0:
        Fr = -Fr
    return FundamentalMatrix(Fr, info)
