"""Essential matrix, rotation extraction and orientation correction.

With ``p^T F q = 0`` (see :mod:`.fundamental`) the essential matrix is
``E = K^T F K = [t]x R`` where ``X_1 = R X_2 + t`` maps camera-2 coordinates
into camera 1. For stitching, camera 1 is the reference light field, so ``R``
rotates the second light field's rays into the reference orientation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._imaging import warp_homography
from ..core import LightField
from ..errors import AmbiguousDecompositionError, DegenerateGeometryError, InsufficientFeaturesError
from ..features import CorrespondenceSet, match_pair
from .fundamental import SAMPSON_THRESHOLD, FundamentalMatrix, ransac_fundamental, refine_fundamental_gold_standard

W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
W_ALT = W.T


@dataclass
class EssentialMatrix:
    E: np.ndarray
    singular_values: np.ndarray
    raw: np.ndarray | None = None  # K^T F K before projection


@dataclass
class RotationEstimate:
    R: np.ndarray
    t_dir: np.ndarray
    cheirality_count: int
    n_points: int = 0

    @property
    def angle_deg(self) -> float:
        return rotation_angle_deg(self.R)


def rotation_angle_deg(R: np.ndarray) -> float:
    c = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def project_to_essential(E: np.ndarray) -> EssentialMatrix:
    U, s, Vt = np.linalg.svd(E)
    m = (s[0] + s[1]) / 2
    Ep = U @ np.diag([m, m, 0.0]) @ Vt
    return EssentialMatrix(Ep, np.array([m, m, 0.0]), np.asarray(E, dtype=np.float64))


def essential_from_fundamental(F, K: np.ndarray) -> EssentialMatrix:
    F = np.asarray(getattr(F, "F", F), dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    return project_to_essential(K.T @ F @ K)


def _normalized(x: np.ndarray, K: np.ndarray) -> np.ndarray:
    xh = np.column_stack([x, np.ones(len(x))])
    return xh @ np.linalg.inv(K).T


def triangulate_depths(R: np.ndarray, t: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Depths ``(z1, z2)`` solving ``z1 x1 = z2 R x2 + t`` in least squares.

    ``x1``, ``x2`` are normalized homogeneous rays ``(N, 3)`` with unit last
    coordinate, so the scalars are depths along the optical axes.
    """
    a = x1
    b = -(x2 @ R.T)
    aa, bb, ab = (a * a).sum(1), (b * b).sum(1), (a * b).sum(1)
    at, bt = a @ t, b @ t
    det = aa * bb - ab * ab
    det = np.where(np.abs(det) < 1e-15, np.nan, det)
    z1 = (bb * at - ab * bt) / det
    z2 = (aa * bt - ab * at) / det
    return z1, z2


def decomposition_candidates(E: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    U, _, Vt = np.linalg.svd(E)
    out = []
    for Wm in (W, W_ALT):
        R = U @ Wm @ Vt
        if np.linalg.det(R) < 0:
            R = -R
        for sign in (1.0, -1.0):
            out.append((R, sign * U[:, 2]))
    return out


def decompose_essential(E, matches: CorrespondenceSet, K: np.ndarray) -> RotationEstimate:
    """Pick the ``(R, t)`` candidate with the most points in front of both cameras."""
    E = np.asarray(getattr(E, "E", E), dtype=np.float64)
    if len(matches) < 1:
        raise InsufficientFeaturesError("decomposition needs at least one correspondence")
    x1, x2 = _normalized(matches.p, K), _normalized(matches.q, K)
    best = None
    for R, t in decomposition_candidates(E):
        z1, z2 = triangulate_depths(R, t, x1, x2)
        count = int(np.sum((z1 > 0) & (z2 > 0)))
        if best is None or count > best[2]:
            best = (R, t, count)
    R, t, count = best
    if count <= 0.5 * len(x1):
        raise AmbiguousDecompositionError(f"best candidate has {count}/{len(x1)} points in front of both cameras")
    # re-orthonormalize against round-off
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return RotationEstimate(R, t / np.linalg.norm(t), count, len(x1))


def orientation_homography(K: np.ndarray, R: np.ndarray) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    return K @ np.asarray(R, dtype=np.float64) @ np.linalg.inv(K)


def apply_orientation_correction(lf: LightField, H: np.ndarray) -> LightField:
    """Warp every view by ``H``: output pixel ``x`` samples input ``H^-1 x``."""
    if np.allclose(H / H[2, 2], np.eye(3), atol=1e-12):
        return lf
    S, T = lf.n_s, lf.n_t
    out = np.empty_like(lf.pixels)
    for s in range(S):
        for t in range(T):
            out[s, t] = warp_homography(lf.pixels[s, t], H)
    return lf.with_pixels(out)


@dataclass
class PairGeometry:
    matches: CorrespondenceSet
    inliers: np.ndarray
    F: FundamentalMatrix
    E: EssentialMatrix
    rotation: RotationEstimate


def _pair_rotation(img_ref, img, K, seed, threshold=SAMPSON_THRESHOLD):
    matches = match_pair(img_ref, img, source=("reference", "moving"))
    F0, mask = ransac_fundamental(matches, threshold=threshold, seed=seed)
    inl = matches.subset(mask)
    F = refine_fundamental_gold_standard(F0, inl)
    E = essential_from_fundamental(F, K)
    rot = decompose_essential(E, inl, K)
    matches.inlier = mask
    return PairGeometry(matches, mask, F, E, rot)


def estimate_relative_rotation(
    img_ref: np.ndarray, img: np.ndarray, K: np.ndarray, seed: int = 0, passes: int = 2,
    threshold: float = SAMPSON_THRESHOLD,
) -> PairGeometry:
    """Rotation taking ``img``'s camera frame into ``img_ref``'s frame.

    After the first estimate ``img`` is derotated with ``K R K^-1`` and the
    residual rotation is measured again; tracking is far more precise once
    the dominant rotational motion is gone. Returned matches, F and E are
    those of the last pass (between the reference and the derotated image).
    """
    geo = _pair_rotation(img_ref, img, K, seed, threshold)
    R = geo.rotation.R
    for _ in range(passes - 1):
        warped = warp_homography(img, orientation_homography(K, R))
        try:
            step = _pair_rotation(img_ref, warped, K, seed, threshold)
        except (InsufficientFeaturesError, AmbiguousDecompositionError, DegenerateGeometryError):
            break
        R = step.rotation.R @ R
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
        geo = step
    geo.rotation = RotationEstimate(R, geo.rotation.t_dir, geo.rotation.cheirality_count, geo.rotation.n_points)
    return geo
