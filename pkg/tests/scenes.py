"""Seeded synthetic scenes shared by the tests."""

import numpy as np
from scipy.spatial.transform import Rotation

from lfstitch.core import Intrinsics
from lfstitch.synth import ArrayPose, PlanarScene, Plane, render_light_field


def intrinsics(n=128, f=None):
    return Intrinsics.centered(f if f is not None else 0.94 * n, n, n)


def layered_scene(seed, zfar=20.0, n_near=5, near=(0.3, 0.75)):
    """A wide far plane plus ``n_near`` smaller planes at scattered depths."""
    r = np.random.default_rng(seed)
    planes = [Plane(zfar, (-3 * zfar, 3 * zfar, -3 * zfar, 3 * zfar), seed)]
    for k, z in enumerate(np.linspace(near[0] * zfar, near[1] * zfar, n_near)):
        x, y = r.uniform(-0.35, 0.35, 2) * z
        w = r.uniform(0.12, 0.22) * z
        planes.append(Plane(z, (x - w, x + w, y - w, y + w), seed * 10 + k + 1))
    return PlanarScene(planes)


def baseline_for(disparity, depth, f):
    """Baseline giving ``disparity`` px per view on a plane at ``depth``."""
    return disparity * depth / f


def render(scene, intr, S=9, T=9, n=128, baseline=0.1, rotation=None, center=(0, 0, 0), z_step=0.0):
    R = np.eye(3) if rotation is None else rotation
    pose = ArrayPose(R, np.asarray(center, dtype=float), baseline, z_step)
    return render_light_field(scene, pose, intr, S, T, (n, n))


def random_rotation(rng, lo_deg=1.0, hi_deg=10.0):
    ang = rng.uniform(lo_deg, hi_deg)
    ax = rng.normal(size=3)
    ax /= np.linalg.norm(ax)
    return Rotation.from_rotvec(np.radians(ang) * ax).as_matrix()


def two_plane_scene(z_near, z_far, half_width_near, seed=0, f=None):
    """A centred near square in front of a wide far plane."""
    near = Plane(z_near, (-half_width_near, half_width_near, -half_width_near, half_width_near), seed + 1,
                 texels_per_unit=None if f is None else 0.5 * f / z_near)
    far = Plane(z_far, (-3 * z_far, 3 * z_far, -3 * z_far, 3 * z_far), seed + 2,
                texels_per_unit=None if f is None else 0.5 * f / z_far)
    return PlanarScene([near, far])
