"""Relative rotation recovery on random two-view pairs of a layered planar scene.

Usage: python3 scripts/rotation_benchmark.py [--pairs 50] [--size 192]
"""

import argparse
import time

import numpy as np
from scipy.spatial.transform import Rotation

from lfstitch.core import Intrinsics
from lfstitch.synth import ArrayPose, PlanarScene, Plane, render_light_field


def scene(seed):
    r = np.random.default_rng(seed)
    planes = [Plane(30.0, (-60, 60, -60, 60), seed)]
    for k, z in enumerate([6.0, 9.0, 12.0, 16.0, 21.0]):
        x, y = r.uniform(-0.4, 0.4, 2) * z
        w = r.uniform(0.15, 0.3) * z
        planes.append(Plane(z, (x - w, x + w, y - w, y + w), seed * 10 + k + 1))
    return PlanarScene(planes)


def main():
    from lfstitch.geometry import estimate_relative_rotation

    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=50)
    ap.add_argument("--size", type=int, default=192)
    args = ap.parse_args()
    n = args.size
    intr = Intrinsics.centered(0.9375 * n, n, n)
    rng = np.random.default_rng(0)
    errs = []
    t0 = time.perf_counter()
    for i in range(args.pairs):
        ang = rng.uniform(1.0, 10.0)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = Rotation.from_rotvec(np.radians(ang) * axis).as_matrix()
        sc = scene(i)
        a = render_light_field(sc, ArrayPose(), intr, 1, 1, (n, n)).view(0, 0)
        b = render_light_field(sc, ArrayPose(R, np.array([1.0, 0.3, 0.0])), intr, 1, 1, (n, n)).view(0, 0)
        est = estimate_relative_rotation(a, b, intr.K, seed=1)
        err = np.degrees(Rotation.from_matrix(est.rotation.R.T @ R).magnitude())
        errs.append(err)
        print(f"pair {i:3d}  angle {ang:5.2f} deg  error {err:.4f} deg  inliers {est.inliers.sum()}")
    errs = np.array(errs)
    print(f"\n{(errs < 0.1).sum()}/{len(errs)} below 0.1 deg; median {np.median(errs):.4f}, "
          f"max {errs.max():.4f}; {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
