import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lfstitch.errors import DegenerateGeometryError, InsufficientFeaturesError
from lfstitch.features import CorrespondenceSet
from lfstitch.geometry import (
    cluster_depths,
    cluster_values,
    decompose_essential,
    eight_point,
    essential_from_fundamental,
    estimate_scale_between,
    estimate_scale_within,
    estimate_similarity,
    orientation_homography,
    ransac_fundamental,
    refine_fundamental_gold_standard,
    rotation_angle_deg,
    sampson_distance,
)
from lfstitch.geometry.essential import decomposition_candidates, project_to_essential
from lfstitch.geometry.scale import _geomean
from lfstitch._imaging import warp_homography
from scenes import intrinsics, random_rotation, render
from lfstitch.synth import PlanarScene, Plane

K = intrinsics(128, 120.0).K


def skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0.0]])


def two_view(R, t, n=80, seed=0, noise=0.0):
    """Points ``X2`` in camera 2, ``X1 = R X2 + t``; returns pixel matches (p in image 1)."""
    rng = np.random.default_rng(seed)
    X2 = np.column_stack([rng.uniform(-4, 4, n), rng.uniform(-4, 4, n), rng.uniform(6, 20, n)])
    X1 = X2 @ R.T + t
    p = (X1 @ K.T)[:, :2] / X1[:, 2:]
    q = (X2 @ K.T)[:, :2] / X2[:, 2:]
    if noise:
        p = p + rng.normal(0, noise, p.shape)
        q = q + rng.normal(0, noise, q.shape)
    return CorrespondenceSet(p, q)


def true_F(R, t):
    Ki = np.linalg.inv(K)
    F = Ki.T @ skew(t) @ R @ Ki
    return F / np.linalg.norm(F)


def same_up_to_sign(A, B, tol):
    A, B = A / np.linalg.norm(A), B / np.linalg.norm(B)
    return min(np.abs(A - B).max(), np.abs(A + B).max()) < tol


def rotation_error_deg(A, B):
    return rotation_angle_deg(A.T @ B)


# --- fundamental ------------------------------------------------------------------


def test_eight_point_noiseless():
    R = random_rotation(np.random.default_rng(1), 2, 8)
    t = np.array([0.5, 0.1, 0.05])
    m = two_view(R, t)
    F = eight_point(m.p, m.q)
    assert np.max(sampson_distance(F, m.p, m.q)) < 1e-6
    assert same_up_to_sign(F, true_F(R, t), 1e-6)
    assert abs(np.linalg.det(F)) < 1e-12 and np.linalg.matrix_rank(F, tol=1e-9) == 2
    fm, mask = ransac_fundamental(m)
    assert mask.all()


def test_pure_x_translation_structure():
    m = two_view(np.eye(3), np.array([1.0, 0.0, 0.0]))
    F = eight_point(m.p, m.q)
    F = F / np.abs(F).max()
    off = F.copy()
    off[1, 2] = off[2, 1] = 0.0
    assert np.abs(off).max() < 1e-6
    assert abs(F[1, 2] + F[2, 1]) < 1e-6


def test_ransac_rejects_outliers():
    R = random_rotation(np.random.default_rng(2), 2, 8)
    t = np.array([0.4, -0.2, 0.1])
    m = two_view(R, t, n=200, seed=3, noise=0.2)
    rng = np.random.default_rng(4)
    bad = rng.random(200) < 0.3
    q = m.q.copy()
    q[bad] += rng.uniform(8, 30, (bad.sum(), 2)) * rng.choice([-1, 1], (bad.sum(), 2))
    fm, mask = ransac_fundamental(CorrespondenceSet(m.p, q), seed=5)
    assert (~mask[bad]).mean() >= 0.95
    assert mask[~bad].mean() >= 0.9
    assert abs(np.linalg.det(fm.F)) < 1e-10


def test_ransac_too_few():
    m = two_view(np.eye(3), np.array([1.0, 0, 0]), n=7)
    with pytest.raises(InsufficientFeaturesError):
        ransac_fundamental(m)


def test_gold_standard_noiseless():
    R = random_rotation(np.random.default_rng(6), 2, 8)
    t = np.array([0.3, 0.2, -0.1])
    m = two_view(R, t, seed=7)
    ref = refine_fundamental_gold_standard(eight_point(m.p, m.q), m)
    assert ref.refinement.rms < 1e-6
    assert same_up_to_sign(ref.F, true_F(R, t), 1e-5)


def test_gold_standard_improves_noisy_estimate():
    R = random_rotation(np.random.default_rng(8), 2, 8)
    t = np.array([0.5, 0.1, 0.2])
    m = two_view(R, t, n=100, seed=9, noise=0.5)
    F8 = eight_point(m.p, m.q)
    ref = refine_fundamental_gold_standard(F8, m)
    s8 = np.sum(sampson_distance(F8, m.p, m.q) ** 2)
    sr = np.sum(sampson_distance(ref.F, m.p, m.q) ** 2)
    assert sr <= s8
    hist = np.array(ref.refinement.cost_history)
    assert np.all(np.diff(hist) <= 0)
    assert ref.refinement.final_cost <= ref.refinement.initial_cost


# --- essential ---------------------------------------------------------------------


def test_essential_projection_singular_values():
    U = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
    V = Rotation.from_rotvec([-0.1, 0.4, 0.2]).as_matrix()
    E = U @ np.diag([1.1, 0.9, 0.05]) @ V.T
    ep = project_to_essential(E)
    assert np.allclose(np.linalg.svd(ep.E, compute_uv=False), [1.0, 1.0, 0.0], atol=1e-12)


def test_essential_identity_K_equals_F():
    R = random_rotation(np.random.default_rng(10))
    E = skew([0.2, 0.5, -0.3]) @ R
    assert np.allclose(essential_from_fundamental(E, np.eye(3)).E, E, atol=1e-12)


def test_essential_projection_is_nearest():
    rng = np.random.default_rng(11)
    M = rng.normal(size=(3, 3))
    ep = project_to_essential(M).E
    d0 = np.linalg.norm(M - ep)
    for _ in range(100):
        R = random_rotation(rng, 0, 180)
        t = rng.normal(size=3)
        cand = skew(t) @ R
        # best scale of this candidate, so the comparison is over shape not size
        cand *= np.sum(cand * M) / np.sum(cand * cand)
        assert d0 <= np.linalg.norm(M - cand) + 1e-12


def test_decompose_identity_rotation():
    t = np.array([1.0, 0.0, 0.0])
    m = two_view(np.eye(3), t)
    est = decompose_essential(skew(t), m, K)
    assert rotation_angle_deg(est.R) < 1e-9
    assert np.allclose(est.t_dir, t, atol=1e-9)


def test_decompose_round_trip_random():
    rng = np.random.default_rng(12)
    for i in range(200):
        R = random_rotation(rng, 0.5, 30)
        t = rng.normal(size=3)
        t /= np.linalg.norm(t)
        m = two_view(R, t * 2, n=20, seed=i)
        est = decompose_essential(skew(t) @ R, m, K)
        assert np.abs(est.R - R).max() < 1e-6
        assert np.abs(est.t_dir - t).max() < 1e-6


def test_candidates_include_both_W_forms():
    R = random_rotation(np.random.default_rng(13), 5, 20)
    t = np.array([0.3, 0.4, 0.5])
    cands = decomposition_candidates(skew(t) @ R)
    assert len(cands) == 4
    Rs = [c[0] for c in cands]
    assert any(np.allclose(r, R, atol=1e-9) for r in Rs)
    # the twisted pair differs from R by a half turn about the baseline
    twisted = [r for r in Rs if not np.allclose(r, R, atol=1e-9)]
    assert all(abs(rotation_error_deg(r, R) - 180.0) < 1e-6 for r in twisted)


# --- orientation homography ------------------------------------------------------


def test_homography_identity():
    assert np.allclose(orientation_homography(K, np.eye(3)), np.eye(3))


def test_z_rotation_is_rotation_about_principal_point():
    a = math.radians(7.0)
    Rz = Rotation.from_rotvec([0, 0, a]).as_matrix()
    H = orientation_homography(K, Rz)
    c = K[:2, 2]
    x = np.array([100.0, 30.0])
    h = H @ np.array([*x, 1.0])
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    assert np.allclose(h[:2] / h[2], c + rot @ (x - c), atol=1e-9)
    img = np.zeros((128, 128))
    img[60:68, 60:68] = 1.0
    assert np.allclose(warp_homography(img, np.eye(3)), img)


# --- depth clustering ------------------------------------------------------------


def disp_set(values):
    v = np.asarray(values, float)
    p = np.column_stack([np.linspace(10, 100, len(v)), np.full(len(v), 50.0)])
    return CorrespondenceSet(p, p + np.column_stack([v, np.zeros_like(v)]))


def test_cluster_equal_values_single():
    cl = cluster_depths(disp_set(np.full(40, 2.0)))
    assert cl.chosen_k == 1 and np.allclose(cl.centroids, 2.0)


def test_cluster_two_modes():
    rng = np.random.default_rng(14)
    truth = rng.random(200) < 0.6
    v = np.where(truth, rng.normal(1.0, 0.1, 200), rng.normal(5.0, 0.1, 200))
    cl = cluster_depths(disp_set(v))
    assert cl.chosen_k == 2
    far = cl.labels == cl.farthest
    assert (far == truth).mean() >= 0.98
    assert abs(cl.centroids[cl.farthest] - 1.0) < 0.05


def test_cluster_three_modes():
    rng = np.random.default_rng(15)
    v = np.concatenate([rng.normal(m, 0.15, 60) for m in (1.0, 4.0, 9.0)])
    cl = cluster_values(v)
    assert cl.chosen_k == 3
    assert np.allclose(np.sort(cl.centroids), [1, 4, 9], atol=0.1)


def test_cluster_separable_trials():
    rng = np.random.default_rng(16)
    ok = 0
    trials = 40
    for i in range(trials):
        k = int(rng.integers(2, 4))
        means = np.cumsum(rng.uniform(2.0, 5.0, k))
        v = np.concatenate([rng.normal(m, 0.2, int(rng.integers(30, 80))) for m in means])
        ok += cluster_values(v, seed=i).chosen_k == k
    assert ok >= 0.95 * trials


def test_farthest_skips_stray_cluster():
    v = np.concatenate([[0.01, 0.02], np.full(50, 2.0), np.full(50, 6.0)])
    v = v + np.random.default_rng(17).normal(0, 0.05, len(v))
    cl = cluster_values(v)
    assert abs(cl.centroids[cl.farthest] - 2.0) < 0.1


def test_cluster_too_few():
    with pytest.raises(InsufficientFeaturesError):
        cluster_depths(disp_set([1.0] * 5))


# --- similarity -------------------------------------------------------------------


def sim_set(scale, angle_deg, t, noise=0.0, seed=0, n=60):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 128, (n, 2))
    a = math.radians(angle_deg)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    q = scale * p @ R.T + t + rng.normal(0, noise, p.shape) if noise else scale * p @ R.T + t
    return CorrespondenceSet(p, q)


def test_similarity_identity_and_scale():
    s = estimate_similarity(sim_set(1.0, 0.0, [0, 0]))
    assert abs(s.scale - 1) < 1e-12 and abs(s.rotation2d) < 1e-12 and np.allclose(s.translation, 0, atol=1e-9)
    s = estimate_similarity(sim_set(1.05, 0.0, [3, -2]))
    assert abs(s.scale - 1.05) < 1e-12 and np.allclose(s.translation, [3, -2], atol=1e-9)


def test_similarity_noisy():
    s = estimate_similarity(sim_set(1.2, 5.0, [4, 1], noise=0.3, seed=1, n=200))
    assert abs(s.scale / 1.2 - 1) < 0.01
    assert abs(math.degrees(s.rotation2d) - 5.0) < 0.5


def test_similarity_degenerate():
    p = np.tile([[10.0, 10.0]], (5, 1))
    with pytest.raises(DegenerateGeometryError):
        estimate_similarity(CorrespondenceSet(p, p))


@given(st.floats(0.5, 2.0), st.floats(-30, 30), st.floats(-20, 20), st.floats(-20, 20))
def test_similarity_recovers_exact(scale, ang, tx, ty):
    s = estimate_similarity(sim_set(scale, ang, [tx, ty], seed=2))
    assert math.isclose(s.scale, scale, rel_tol=1e-9)
    assert abs(math.degrees(s.rotation2d) - ang) < 1e-7
    assert s.residual_rms < 1e-8


# --- scale within / between ---------------------------------------------------------


def far_scene(seed=0, z=20.0):
    return PlanarScene([Plane(z, (-3 * z, 3 * z, -3 * z, 3 * z), seed, texels_per_unit=0.4 * 120 / z)])


def test_scale_within_no_drift():
    lf = render(far_scene(1), intrinsics(128, 120.0), S=5, T=5, baseline=0.2)
    assert abs(estimate_scale_within(lf) - 1.0) < 1e-3


def test_scale_within_known_drift():
    z, dz = 20.0, 0.04
    truth = z / (z - dz)  # about 1.002 per step
    lf = render(far_scene(2, z), intrinsics(128, 120.0), S=5, T=5, baseline=0.2, z_step=dz)
    assert abs(estimate_scale_within(lf) - truth) < 5e-4


def test_geomean_reciprocal():
    assert math.isclose(_geomean([1.3, 1 / 1.3]), 1.0, rel_tol=1e-12)


def test_scale_between_known():
    z = 20.0
    intr = intrinsics(128, 120.0)
    a = render(far_scene(3, z), intr, S=3, T=3)
    assert abs(estimate_scale_between(a, a) - 1.0) < 1e-6
    dz = z * (1 - 1 / 1.05)
    b = render(far_scene(3, z), intr, S=3, T=3, center=(0, 0, dz))
    s_ab = estimate_scale_between(a, b)
    assert abs(s_ab - 1.05) < 0.005
    s_ba = estimate_scale_between(b, a)
    assert abs(s_ab * s_ba - 1.0) < 2e-3
