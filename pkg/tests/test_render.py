import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from lfstitch.core import Intrinsics, LightField
from lfstitch.errors import InconsistencyError, ParameterError
from lfstitch.render import (
    RefocusParams,
    aperture_from_views,
    disparity_map,
    extreme_views,
    load_png16,
    refocus,
    refocus_stack,
    render_epi_comparison,
    save_image,
    sharpness,
)
from lfstitch.synth import ArrayPose, PlanarScene, Plane, visible_plane_map
from scenes import intrinsics, render, two_plane_scene

N = 96
F = 90.0
Z_FAR = 20.0
B = Z_FAR / F  # far plane moves 1 px per view
Z_NEAR = F * B / 3.0  # near plane moves 3 px per view


def two_plane_lf(S=9, T=9, half=0.3):
    sc = two_plane_scene(Z_NEAR, Z_FAR, half * Z_NEAR, seed=3, f=F)
    lf = render(sc, intrinsics(N, F), S=S, T=T, n=N, baseline=B)
    return sc, lf


def region(sc, S, T, plane, erode, margin=6):
    """Pixels of ``plane`` in the middle view, away from occlusion edges and the border."""
    idx = visible_plane_map(sc, ArrayPose(baseline=B), intrinsics(N, F), (S // 2, T // 2), S, T, (N, N))
    keep = ndimage.binary_erosion(idx == plane, iterations=erode, border_value=1)
    keep[:margin] = keep[-margin:] = False
    keep[:, :margin] = keep[:, -margin:] = False
    return keep


# --- refocus -----------------------------------------------------------------------


def test_refocus_constant():
    lf = LightField(np.full((3, 3, 16, 16, 3), 0.42, np.float32), Intrinsics.centered(10, 16, 16))
    for k in (-1.5, 0.0, 2.25):
        assert np.allclose(refocus(lf, RefocusParams(k)), 0.42, atol=1e-6)


def test_refocus_params_validation():
    with pytest.raises(ParameterError):
        RefocusParams(float("nan"))
    with pytest.raises(ParameterError):
        RefocusParams(1.0, np.zeros((3, 3), bool))
    lf = LightField(np.full((3, 3, 16, 16, 3), 0.5, np.float32), Intrinsics.centered(10, 16, 16))
    with pytest.raises(ParameterError):
        refocus(lf, RefocusParams(1.0, np.ones((2, 2), bool)))


def test_refocus_in_and_out_of_focus():
    sc, lf = two_plane_lf()
    far = region(sc, 9, 9, 1, 10)
    near = region(sc, 9, 9, 0, 4)
    centre = lf.middle_view()
    # focusing at a plane reproduces its texture (integer shifts are exact)
    far_focus = refocus(lf, RefocusParams(1.0))
    assert abs(sharpness(far_focus, far) / sharpness(centre, far) - 1) < 0.05
    near_focus = refocus(lf, RefocusParams(3.0))
    assert abs(sharpness(near_focus, near) / sharpness(centre, near) - 1) < 0.05
    # the other plane blurs
    assert sharpness(near_focus, far) < 0.5 * sharpness(centre, far)
    assert sharpness(far_focus, near) < 0.5 * sharpness(centre, near)


def test_refocus_sharpness_peaks_at_true_slope():
    sc, lf = two_plane_lf()
    near = region(sc, 9, 9, 0, 4)
    slopes = [2.0, 2.5, 3.0, 3.5, 4.0]
    vals = [sharpness(img, near) for img in refocus_stack(lf, slopes)]
    assert int(np.argmax(vals)) == 2


def test_wider_aperture_blurs_more():
    sc, lf = two_plane_lf(S=24, T=1, half=0.45)
    near = region(sc, 24, 1, 0, 4)
    mask9 = aperture_from_views(lf, [(s, 0) for s in range(7, 16)])
    out9 = refocus(lf, RefocusParams(1.0, mask9))
    out24 = refocus(lf, RefocusParams(1.0))
    assert sharpness(out24, near) < sharpness(out9, near)


def test_single_view_aperture_is_that_view():
    _, lf = two_plane_lf(S=3, T=3)
    for s, t in [(0, 0), (2, 1), (1, 1)]:
        out = refocus(lf, RefocusParams(2.7, aperture_from_views(lf, [(s, t)])))
        assert np.array_equal(out, lf.view(s, t))


def test_refocus_slope_zero_is_view_mean():
    _, lf = two_plane_lf(S=3, T=3)
    expect = lf.pixels.astype(np.float64).mean(axis=(0, 1))
    assert np.allclose(refocus(lf, RefocusParams(0.0)), expect, atol=1e-6)


def single_plane_lf(d, S=9, T=9):
    sc = PlanarScene([Plane(Z_FAR, (-3 * Z_FAR, 3 * Z_FAR, -3 * Z_FAR, 3 * Z_FAR), 8, texels_per_unit=0.5 * F / Z_FAR)])
    return render(sc, intrinsics(N, F), S=S, T=T, n=N, baseline=d * Z_FAR / F)


@pytest.mark.parametrize("d", [1.0, 2.0])
def test_single_plane_focus_and_local_maximum(d):
    lf = single_plane_lf(d)
    m = int(4 * d) + 2
    ref = sharpness(lf.middle_view(), margin=m)
    focused = sharpness(refocus(lf, RefocusParams(d)), margin=m)
    assert abs(focused / ref - 1) < 0.05
    assert sharpness(refocus(lf, RefocusParams(0.0)), margin=m) < 0.5 * focused
    around = [sharpness(refocus(lf, RefocusParams(k)), margin=m) for k in (d - 0.5, d + 0.5)]
    assert focused > max(around)


def test_single_plane_blur_grows_with_aperture():
    lf = single_plane_lf(1.0, S=24, T=1)
    m = 16
    mask9 = aperture_from_views(lf, [(s, 0) for s in range(8, 17)])
    s9 = sharpness(refocus(lf, RefocusParams(0.0, mask9)), margin=m)
    s24 = sharpness(refocus(lf, RefocusParams(0.0)), margin=m)
    assert s24 < s9


def test_refocus_preserves_mean_interior():
    lf = single_plane_lf(1.0)
    out = refocus(lf, RefocusParams(0.5))
    m = 8
    inner = (slice(m, -m), slice(m, -m))
    views = lf.pixels.astype(np.float64)[:, :, inner[0], inner[1]]
    assert abs(out[inner].mean() - views.mean()) < 1e-3


# --- extreme views -----------------------------------------------------------------


def indexed_lf(S, T, n=16):
    px = np.zeros((S, T, n, n, 3), np.float32)
    for s in range(S):
        for t in range(T):
            px[s, t, 0, 0] = [s / 32, t / 32, 0]
    return LightField(px, Intrinsics.centered(10, n, n))


def test_extreme_views_indices():
    lf = indexed_lf(24, 9)
    a, b = extreme_views(lf, "horizontal")
    assert np.array_equal(a, lf.view(0, 4)) and np.array_equal(b, lf.view(23, 4))
    assert round((b[0, 0, 0] - a[0, 0, 0]) * 32) == 23
    a, b = extreme_views(lf, "vertical")
    assert np.array_equal(a, lf.view(12, 0)) and np.array_equal(b, lf.view(12, 8))
    one = indexed_lf(1, 1)
    a, b = extreme_views(one)
    assert np.array_equal(a, b)
    with pytest.raises(ParameterError):
        extreme_views(lf, "diagonal")


# --- disparity ---------------------------------------------------------------------


def texture(seed=0, n=96):
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.random((n, n)), 1.0)


def test_disparity_identity_is_zero():
    img = texture(1)
    d = disparity_map(img, img, 8)
    # within max_disp + window/2 of the side borders the minimum cannot be bracketed
    assert d.valid[:, 12:-12].mean() > 0.95
    assert np.all(d.values[d.valid] == 0.0)


def test_disparity_integer_shift():
    img = texture(2)
    right = np.roll(img, 3, axis=1)
    d = disparity_map(img, right, 8)
    inner = d.valid[:, 12:-12]
    assert inner.mean() > 0.9
    assert np.mean(np.abs(d.values[:, 12:-12][inner] - 3) <= 0.25) >= 0.9


def test_disparity_subpixel_scene():
    # two planes with known per-view disparity, from rendered views
    _, lf = two_plane_lf(S=3, T=1)
    d = disparity_map(lf.view(0, 0), lf.view(2, 0), 12)
    vals = d.values[d.valid]
    assert np.mean(np.abs(vals - 2.0) < 0.25) > 0.4
    assert np.mean(np.abs(vals - 6.0) < 0.25) > 0.1


def test_disparity_parameter_checks():
    img = texture(3, 64)
    with pytest.raises(ParameterError):
        disparity_map(img, img, 16)
    with pytest.raises(ParameterError):
        disparity_map(img, img, -1)
    with pytest.raises(InconsistencyError):
        disparity_map(img, img[:, :60], 4)


def test_png16_round_trip(tmp_path):
    img = texture(4)
    d = disparity_map(img, np.roll(img, -2, axis=1), 6)
    meta = d.save_png16(tmp_path / "d.png")
    back = load_png16(tmp_path / "d.png")
    assert np.array_equal(back.valid, d.valid)
    assert np.max(np.abs(back.values[d.valid] - d.values[d.valid])) <= 0.5 / meta["scale"] + 1e-12
    raw = np.asarray(Image.open(tmp_path / "d.png"))
    assert raw.dtype == np.uint16 and np.all(raw[~d.valid] == 0)


@given(st.floats(-5.0, 5.0), st.floats(0.0, 10.0))
def test_disparity_range_translation_invariant(offset, spread):
    rng = np.random.default_rng(0)
    from lfstitch.render import DisparityMap

    v = rng.uniform(0, spread, (20, 20))
    valid = rng.random((20, 20)) > 0.2
    a, b = DisparityMap(v, valid), DisparityMap(v + offset, valid)
    assert math.isclose(a.range(), b.range(), abs_tol=1e-9)


# --- EPI comparison and image output ------------------------------------------------


def test_epi_comparison_heights():
    a, b = indexed_lf(9, 9, 20), indexed_lf(24, 9, 20)
    e1, e2 = render_epi_comparison(a, b)
    assert e1.pixels.shape == (9, 20) and e2.pixels.shape == (24, 20)
    e1, e2 = render_epi_comparison(a, a)
    assert np.array_equal(e1.pixels, e2.pixels)
    with pytest.raises(InconsistencyError):
        render_epi_comparison(a, indexed_lf(9, 9, 24))


def test_epi_comparison_slopes_agree():
    # the same plane rendered with 9 and 24 views traces lines of one slope
    sc = PlanarScene([Plane(Z_FAR, (-3 * Z_FAR, 3 * Z_FAR, -3 * Z_FAR, 3 * Z_FAR), 5, texels_per_unit=0.5 * F / Z_FAR)])
    a = render(sc, intrinsics(N, F), S=9, T=1, n=N, baseline=B)
    b = render(sc, intrinsics(N, F), S=24, T=1, n=N, baseline=B)
    e1, e2 = render_epi_comparison(a, b, fixed_spatial_index=N // 2, fixed_angular_index=0)

    def slope(epi):
        rows = epi.pixels - epi.pixels.mean(axis=1, keepdims=True)
        mid = len(rows) // 2
        ref = rows[mid, 30:66]
        pos = []
        for r in range(len(rows)):
            lags = np.arange(-30, 31)
            sc = [np.dot(ref, rows[r, 30 + l:66 + l]) if 0 <= 30 + l and 66 + l <= N else -np.inf for l in lags]
            k = int(np.argmax(sc))
            pos.append(lags[k])
        return np.polyfit(np.arange(len(rows)) - mid, pos, 1)[0]

    assert abs(math.degrees(math.atan2(1, slope(e1))) - math.degrees(math.atan2(1, slope(e2)))) < 0.5


def test_save_image(tmp_path):
    img = np.linspace(0, 1, 16 * 16 * 3).reshape(16, 16, 3)
    save_image(img, tmp_path / "x.png")
    back = np.asarray(Image.open(tmp_path / "x.png")) / 255.0
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
