import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lfstitch.core import Intrinsics, LightField
from lfstitch.errors import (
    DegenerateGeometryError,
    HullTooSparseError,
    InconsistencyError,
    InsufficientFeaturesError,
    StageError,
)
from lfstitch.preprocess import photometric_correct
from lfstitch.render import RefocusParams, refocus, sharpness
from lfstitch.stitch import (
    IrregularLightField,
    RigidRegistration,
    Sample,
    StitchConfig,
    deduplicate,
    delaunay,
    estimate_translation_between,
    estimate_translation_within,
    grid_positions,
    interpolation_weights,
    place_samples,
    resample_regular_grid,
    stitch,
    stitch_with_report,
)
from lfstitch.synth import ArrayPose, PlanarScene, Plane, visible_plane_map
from scenes import baseline_for, intrinsics, layered_scene, render


def in_circumcircle(a, b, c, d):
    """Independent oracle: signed in-circle determinant (counter-clockwise ``abc``)."""
    m = np.array([[*(p - d), (p - d) @ (p - d)] for p in (a, b, c)])
    det = np.linalg.det(m)
    orient = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    return det * math.copysign(1.0, orient)


def brute_force_delaunay_ok(pts, triangles, tol=1e-9):
    scale = np.abs(pts).max() ** 4
    for tri in triangles:
        a, b, c = pts[tri]
        others = np.setdiff1d(np.arange(len(pts)), tri)
        for k in others:
            if in_circumcircle(a, b, c, pts[k]) > tol * scale:
                return False
    return True


def const_sample(pos, value, source=0, shape=(16, 17, 3)):
    return Sample(np.asarray(pos, float), np.full(shape, value, np.float32), source, (0, 0))


# --- translations ---------------------------------------------------------------------


F = 120.0
Z = 20.0


def single_plane(seed=0):
    return PlanarScene([Plane(Z, (-3 * Z, 3 * Z, -3 * Z, 3 * Z), seed, texels_per_unit=0.4 * F / Z)])


def test_translation_within_known_step():
    b = baseline_for(1.25, Z, F)
    lf = render(single_plane(1), intrinsics(128, F), S=5, T=5, baseline=b)
    st_ = estimate_translation_within(lf)
    assert np.allclose(st_.horizontal, [1.25, 0.0], atol=0.05)
    assert np.allclose(st_.vertical, [0.0, 1.25], atol=0.05)


def test_translation_within_single_view():
    lf = render(single_plane(1), intrinsics(64, 60.0), S=1, T=1, n=64)
    with pytest.raises(InsufficientFeaturesError):
        estimate_translation_within(lf)


def test_translation_between():
    b = baseline_for(1.25, Z, F)
    intr = intrinsics(128, F)
    a = render(single_plane(2), intr, S=3, T=3, baseline=b)
    assert np.allclose(estimate_translation_between(a, a), 0.0, atol=0.05)
    c = render(single_plane(2), intr, S=3, T=3, baseline=b, center=(-15 * b, 0, 0))
    ab = estimate_translation_between(a, c)
    assert abs(ab[0] / (15 * 1.25) - 1) < 0.02 and abs(ab[1]) < 0.02 * 15 * 1.25
    ba = estimate_translation_between(c, a)
    assert np.all(np.abs(ab + ba) < 0.1)


# --- placement ------------------------------------------------------------------------


def flat_lf(S, T, value=0.5, n=16):
    return LightField(np.full((S, T, n, n, 3), value, np.float32), Intrinsics.centered(10.0, n, n))


def test_place_single_reference_integer_grid():
    lf = flat_lf(9, 9)
    reg = RigidRegistration(np.eye(3), np.ones((9, 9)), grid_positions(lf))
    ilf = place_samples([reg], [lf])
    pos = ilf.positions
    assert len(ilf) == 81
    assert set(map(tuple, pos.astype(int).tolist())) == {(s, t) for s in range(-4, 5) for t in range(-4, 5)}
    assert np.array_equal(pos, np.round(pos))


def test_place_two_offset_bbox_9x24():
    a, b = flat_lf(9, 9), flat_lf(9, 9, 0.3)
    regs = [
        RigidRegistration(np.eye(3), np.ones((9, 9)), grid_positions(a)),
        RigidRegistration(np.eye(3), np.ones((9, 9)), grid_positions(b, (15.0, 0.0))),
    ]
    pos = place_samples(regs, [a, b]).positions
    span = pos.max(0) - pos.min(0) + 1
    assert tuple(span) == (24, 9)


def test_place_coincident_kept_then_deduplicated():
    a, b = flat_lf(3, 3, 0.2), flat_lf(3, 3, 0.7)
    regs = [RigidRegistration(np.eye(3), np.ones((3, 3)), grid_positions(x)) for x in (a, b)]
    ilf = place_samples(regs, [a, b])
    assert len(ilf) == 18
    d = deduplicate(ilf)
    assert len(d) == 9 and all(smp.source_id == 0 for smp in d.samples)


def test_place_mismatched_sizes():
    a, b = flat_lf(3, 3, n=16), flat_lf(3, 3, n=20)
    regs = [RigidRegistration(np.eye(3), np.ones((3, 3)), grid_positions(x)) for x in (a, b)]
    with pytest.raises(InconsistencyError):
        place_samples(regs, [a, b])


# --- Delaunay ---------------------------------------------------------------------------


def test_delaunay_three_points_and_square():
    tri = delaunay([[0, 0], [1, 0], [0, 1]])
    assert len(tri.triangles) == 1 and sorted(tri.triangles[0]) == [0, 1, 2]
    tri = delaunay([[0, 0], [1, 0], [1, 1], [0, 1]])
    assert len(tri.triangles) == 2
    shared = set(tri.triangles[0]) & set(tri.triangles[1])
    assert shared in ({0, 2}, {1, 3})


def test_delaunay_random_circumcircle():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-5, 5, (200, 2))
    tri = delaunay(pts)
    assert brute_force_delaunay_ok(pts, tri.triangles)
    assert tri.triangles.min() >= 0 and tri.triangles.max() < 200


def test_delaunay_degenerate():
    with pytest.raises(DegenerateGeometryError):
        delaunay([[0, 0], [1, 1], [2, 2], [3, 3]])
    with pytest.raises(DegenerateGeometryError):
        delaunay([[0, 0], [1, 1]])


# --- inverse-distance resampling ---------------------------------------------------------------


def test_weights_one_two_two():
    w = interpolation_weights([0.0, 0.0], [[1.0, 0.0], [0.0, 2.0], [-2.0, 0.0]])
    assert w.tolist() == [0.5, 0.25, 0.25]


def test_weights_coincident_short_circuit():
    w = interpolation_weights([1.0, 1.0], [[1.0, 1.0], [2.0, 1.0], [1.0, 2.0]])
    assert w.tolist() == [1.0, 0.0, 0.0]


@given(st.lists(st.floats(-3, 3), min_size=8, max_size=8), st.floats(-3, 3), st.floats(-3, 3))
def test_weights_sum_to_one(coords, x, y):
    verts = np.array(coords[:6]).reshape(3, 2)
    w = interpolation_weights([x, y], verts)
    assert np.all(w >= 0) and abs(w.sum() - 1.0) <= 1e-12


def test_resample_copies_recorded_views():
    rng = np.random.default_rng(1)
    samples = [Sample(np.array([s, t], float), rng.random((16, 17, 3)).astype(np.float32), 0, (s, t))
               for s in range(3) for t in range(2)]
    ilf = IrregularLightField(samples)
    out, info = resample_regular_grid(ilf, return_info=True)
    assert out.pixels.shape[:2] == (3, 2)
    for smp in samples:
        s, t = smp.view
        assert np.array_equal(out.pixels[s, t], smp.image)
    assert info.n_interpolated == 0


def test_resample_equidistant_mean():
    rng = np.random.default_rng(2)
    samples = [Sample(np.array([s, t], float), rng.random((16, 17, 3)).astype(np.float32), 0, (s, t))
               for s in range(3) for t in range(3) if (s, t) != (1, 1)]
    ring = []
    for k, ang in enumerate((90.0, 210.0, 330.0)):
        a = math.radians(ang)
        img = rng.random((16, 17, 3)).astype(np.float32)
        ring.append(img)
        samples.append(Sample(np.array([1 + 0.5 * math.cos(a), 1 + 0.5 * math.sin(a)]), img, 1, (k, 0)))
    out, info = resample_regular_grid(IrregularLightField(samples), return_info=True)
    expect = (ring[0].astype(np.float64) + ring[1] + ring[2]) / 3
    assert np.allclose(out.pixels[1, 1], expect, atol=1e-6)
    assert info.max_weight_sum_error <= 1e-12


def test_resample_irregular_weights_sum():
    rng = np.random.default_rng(3)
    pos = rng.uniform(0, 6, (40, 2))
    samples = [const_sample(p, float(rng.random())) for p in pos]
    out, info = resample_regular_grid(IrregularLightField(samples), return_info=True)
    assert info.n_interpolated > 0 and info.max_weight_sum_error <= 1e-12


def test_resample_hull_too_sparse():
    samples = [const_sample(p, 0.5) for p in ([0.4, 0.4], [0.6, 0.4], [0.5, 0.6])]
    with pytest.raises(HullTooSparseError):
        resample_regular_grid(IrregularLightField(samples))


def test_resample_crops_outside_hull():
    # an L-shaped sample set: (2, 2) sits on the hull edge and is interpolated,
    # the three corner points beyond it are cropped away, never extrapolated
    samples = [const_sample([s, t], 0.5) for s in range(4) for t in range(4) if not (s >= 2 and t >= 2)]
    out, info = resample_regular_grid(IrregularLightField(samples), return_info=True)
    assert (out.n_s, out.n_t) == (3, 3) and info.n_interpolated == 1
    assert np.allclose(info.origin, [0, 0])


# --- pipeline -----------------------------------------------------------------------


def test_stitch_single_light_field():
    intr = intrinsics(96, 90.0)
    lf = render(single_plane(3), intr, S=5, T=5, n=96, baseline=0.0)
    out, rep = stitch_with_report([lf])
    assert np.array_equal(out.pixels, photometric_correct(lf).pixels)
    pos = np.array(rep["light_fields"][0]["positions"])
    assert np.array_equal(pos, np.round(pos)) and (rep["grid"]["rows"], rep["grid"]["cols"]) == (5, 5)


def test_stitch_propagates_stage_and_index():
    intr = intrinsics(64, 60.0)
    lf = render(single_plane(4), intr, S=3, T=3, n=64, baseline=0.05)
    with pytest.raises(StageError) as ei:
        stitch([lf, flat_lf(3, 3, n=32)])
    assert ei.value.stage == "load" and ei.value.index == 1
    blank = LightField(np.full(lf.pixels.shape, 0.5, np.float32), lf.intrinsics)
    with pytest.raises(StageError) as ei:
        stitch([lf, blank], config=None)
    assert ei.value.index == 1 and ei.value.exit_code == 3


@pytest.mark.slow
def test_stitch_rotation_scale_offset_end_to_end():
    n = 128
    intr = intrinsics(n)
    f = intr.K[0, 0]
    zfar = 20.0
    b = baseline_for(1.0, zfar, f)
    sc = layered_scene(0, zfar)
    ref = render(sc, intr, n=n, baseline=b)
    axis = np.array([0.3, 1.0, 0.2]) / np.linalg.norm([0.3, 1.0, 0.2])
    R = Rotation.from_rotvec(np.radians(2.0) * axis).as_matrix()
    dz = zfar * (1 - 1 / 1.03)
    other = render(sc, intr, n=n, baseline=b, rotation=R, center=(-10 * b, 0, dz))
    out, rep = stitch_with_report([ref, other], seed=42, config=StitchConfig(rotation_check=True))
    assert out.grid_shape == (9, 19)
    e = rep["light_fields"][1]
    assert abs(e["rotation_deg"] - 2.0) < 0.1
    # the array moves rigidly; two independent estimates, each good to about 0.1 deg
    assert e["rotation_check_deg"] < 0.2
    assert rep["light_fields"][0]["rotation_check_deg"] is None
    assert abs(e["offset"][0] - 10.0) < 0.25
    # reference positions stay on the integer lattice
    pos = np.array(rep["light_fields"][0]["positions"])
    assert np.array_equal(pos, np.round(pos))

    # refocusing the extended field: the far plane is in focus at slope 0 and
    # blurs away from it
    region = visible_plane_map(sc, ArrayPose(baseline=b), intr, (4, 4), 9, 9, (n, n)) == 0
    sharp = sharpness(refocus(out, RefocusParams(0.0)), region, margin=12)
    blurred = sharpness(refocus(out, RefocusParams(1.0)), region, margin=12)
    assert sharp >= 2 * blurred
