"""Scale recovery between two captures and within one light field.

Usage: python3 scripts/scale_benchmark.py
"""

import time

import numpy as np

from lfstitch.core import Intrinsics
from lfstitch.geometry import estimate_scale_between, estimate_scale_within
from lfstitch.synth import ArrayPose, PlanarScene, Plane, render_light_field

N, F, Z_REF = 128, 120.0, 20.0


def main():
    intr = Intrinsics.centered(F, N, N)
    b = 8 / F
    sc = PlanarScene([Plane(Z_REF, (-30, 30, -30, 30), 1), Plane(10, (-2, 2, -2, 2), 2), Plane(13, (1, 5, -4, 0), 3)])
    ref = render_light_field(sc, ArrayPose(baseline=b), intr, 1, 1, (N, N))
    for s in (1.02, 1.05, 1.10):
        t0 = time.perf_counter()
        # stepping forward by Z (1 - 1/s) magnifies the far plane by s
        pose = ArrayPose(np.eye(3), np.array([0.6, 0.2, Z_REF * (1 - 1 / s)]), b)
        est = estimate_scale_between(ref, render_light_field(sc, pose, intr, 1, 1, (N, N)))
        print(f"between  true {s:.3f}  est {est:.5f}  rel err {100 * abs(est / s - 1):.3f}%  "
              f"{time.perf_counter() - t0:.1f}s")
    z_step = Z_REF * (1 - 1 / 1.002)
    truth = Z_REF / (Z_REF - z_step)
    t0 = time.perf_counter()
    lf = render_light_field(sc, ArrayPose(np.eye(3), np.zeros(3), b, z_step), intr, 5, 5, (N, N))
    est = estimate_scale_within(lf)
    print(f"within   true {truth:.5f}  est {est:.5f}  abs err {abs(est - truth):.1e}  {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
