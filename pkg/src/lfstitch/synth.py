"""Ground-truth light fields of textured fronto-parallel planes.

The virtual camera array follows the angular convention used throughout the
package: stepping ``s`` (or ``t``) by one moves the camera by one baseline
towards its own -x (or -y) axis, so a point at depth ``Z`` drifts by
``+f*b/Z`` pixels per view in ``u`` (or ``v``). Disparities are therefore
positive for finite depth and vanish at infinity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from ._imaging import pixel_grid
from .core import Intrinsics, LightField
from .errors import GeometryError, ParameterError

BACKGROUND = 0.5


def procedural_texture(seed: int, size: int = 512, blur: float = 2.0) -> np.ndarray:
    """Seeded smooth colour noise with a faint grid, values in [0.08, 0.92]."""
    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.standard_normal((size, size)), blur, mode="wrap")
    base /= base.std() + 1e-12
    tint = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), (3 * blur, 3 * blur, 0), mode="wrap")
    tint /= tint.std() + 1e-12
    gray = 0.5 + 0.16 * np.clip(base, -2.5, 2.5)
    tex = gray[..., None] + 0.03 * np.clip(tint, -2.5, 2.5)
    step = max(size // 8, 8)
    lines = (np.arange(size) % step) < 2
    grid = lines[:, None] | lines[None, :]
    tex[grid] *= 0.8
    return np.clip(tex, 0.08, 0.92)


@dataclass
class Plane:
    depth: float
    extent: tuple[float, float, float, float]  # (xmin, xmax, ymin, ymax) in world units
    seed: int = 0
    texels_per_unit: float | None = None
    texture: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.depth = float(self.depth)
        self.extent = tuple(float(e) for e in self.extent)
        if len(self.extent) != 4 or self.extent[1] <= self.extent[0] or self.extent[3] <= self.extent[2]:
            raise GeometryError(f"plane extent must be (xmin, xmax, ymin, ymax), got {self.extent}")
        if not np.isfinite(self.depth) or self.depth <= 0:
            raise GeometryError(f"plane depth must be positive, got {self.depth}")
        if self.texture is None:
            # about one texel per pixel for focal lengths near 100 px
            density = self.texels_per_unit or 100.0 / self.depth
            span = max(self.extent[1] - self.extent[0], self.extent[3] - self.extent[2])
            self.texture = procedural_texture(self.seed, int(np.clip(round(span * density), 32, 2048)))


@dataclass
class PlanarScene:
    """Planes sorted nearest-first; the nearest visible plane wins."""

    planes: list[Plane]

    def __post_init__(self):
        if not self.planes:
            raise GeometryError("scene needs at least one plane")
        self.planes = sorted(self.planes, key=lambda p: p.depth)
        depths = [p.depth for p in self.planes]
        if len(set(depths)) != len(depths):
            raise GeometryError(f"plane depths must be distinct, got {depths}")


@dataclass(frozen=True)
class ArrayPose:
    """Pose of a virtual camera array.

    ``rotation`` maps camera to world coordinates and is shared by every view.
    ``z_step`` adds a forward offset per angular step (along both ``s`` and
    ``t``) to emulate within-light-field scale drift.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    center_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    baseline: float = 0.1
    z_step: float = 0.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-10) or abs(np.linalg.det(R) - 1) > 1e-10:
            raise GeometryError("rotation must be a proper 3x3 rotation matrix")
        c = np.asarray(self.center_translation, dtype=np.float64).reshape(3)
        if not self.baseline >= 0:
            raise GeometryError(f"baseline must be non-negative, got {self.baseline}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center_translation", c)

    @classmethod
    def from_axis_angle(cls, rotvec=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0), baseline=0.1, z_step=0.0):
        R = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()
        return cls(R, np.asarray(translation, dtype=np.float64), float(baseline), float(z_step))

    def camera_center(self, s: float, t: float, S: int, T: int) -> np.ndarray:
        ds = s - (S - 1) / 2.0
        dt = t - (T - 1) / 2.0
        local = np.array([-self.baseline * ds, -self.baseline * dt, self.z_step * (ds + dt)])
        return self.center_translation + self.rotation @ local

    def shifted(self, ds: float = 0.0, dt: float = 0.0, forward: float = 0.0) -> "ArrayPose":
        """Same array moved by ``(ds, dt)`` angular steps and ``forward`` world units."""
        local = np.array([-self.baseline * ds, -self.baseline * dt, forward])
        return ArrayPose(self.rotation, self.center_translation + self.rotation @ local, self.baseline, self.z_step)

    def rotated(self, R: np.ndarray) -> "ArrayPose":
        """Camera orientation composed with an extra camera-frame rotation ``R``."""
        return ArrayPose(self.rotation @ R, self.center_translation, self.baseline, self.z_step)


def _default_size(intr: Intrinsics) -> tuple[int, int]:
    cx, cy = intr.principal_point
    return int(round(2 * cy + 1)), int(round(2 * cx + 1))


def _check_in_front(scene: PlanarScene, centers: np.ndarray) -> None:
    zmax = centers[:, 2].max()
    for p in scene.planes:
        if p.depth <= zmax:
            raise GeometryError(f"plane at depth {p.depth} is not in front of every camera (camera z up to {zmax:.4g})")


def _trace(scene: PlanarScene, R: np.ndarray, C: np.ndarray, intr: Intrinsics, size: tuple[int, int]):
    """Visible plane index and world hit point for every pixel of one camera."""
    H, W = size
    u, v = pixel_grid(H, W)
    Kinv = np.linalg.inv(intr.K)
    rays = np.einsum("ij,jhw->ihw", R @ Kinv, np.stack([u, v, np.ones_like(u)]))
    index = np.full((H, W), -1, dtype=np.int64)
    hit = np.full((3, H, W), np.nan)
    for k, plane in enumerate(scene.planes):
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (plane.depth - C[2]) / rays[2]
        X = C[0] + lam * rays[0]
        Y = C[1] + lam * rays[1]
        xmin, xmax, ymin, ymax = plane.extent
        take = (index < 0) & (rays[2] > 0) & (lam > 0) & (X >= xmin) & (X <= xmax) & (Y >= ymin) & (Y <= ymax)
        index[take] = k
        hit[0][take] = X[take]
        hit[1][take] = Y[take]
        hit[2][take] = plane.depth
    return index, hit


def _shade(scene: PlanarScene, index: np.ndarray, hit: np.ndarray) -> np.ndarray:
    H, W = index.shape
    out = np.full((H, W, 3), BACKGROUND)
    for k, plane in enumerate(scene.planes):
        m = index == k
        if not m.any():
            continue
        tex = plane.texture
        n_v, n_u = tex.shape[:2]
        xmin, xmax, ymin, ymax = plane.extent
        tu = (hit[0][m] - xmin) / (xmax - xmin) * (n_u - 1)
        tv = (hit[1][m] - ymin) / (ymax - ymin) * (n_v - 1)
        coords = np.stack([tv, tu])
        for c in range(3):
            out[..., c][m] = ndimage.map_coordinates(tex[..., c], coords, order=1, mode="nearest")
    return out


def render_light_field(
    scene: PlanarScene,
    pose: ArrayPose,
    intrinsics: Intrinsics,
    S: int,
    T: int,
    size: tuple[int, int] | None = None,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> LightField:
    """Render an ``S x T`` pinhole array; ``size`` is ``(height, width)``."""
    if S < 1 or T < 1:
        raise ParameterError(f"grid must be at least 1x1, got {S}x{T}")
    H, W = size or _default_size(intrinsics)
    centers = np.array([pose.camera_center(s, t, S, T) for s in range(S) for t in range(T)])
    _check_in_front(scene, centers)
    pixels = np.empty((S, T, H, W, 3), dtype=np.float32)
    rng = np.random.default_rng(seed) if noise_sigma > 0 else None
    for i, C in enumerate(centers):
        s, t = divmod(i, T)
        img = _shade(scene, *_trace(scene, pose.rotation, C, intrinsics, (H, W)))
        if rng is not None:
            img = img + rng.normal(0.0, noise_sigma, img.shape)
        pixels[s, t] = np.clip(img, 0.0, 1.0)
    return LightField(pixels, intrinsics, 1.0)


def visible_plane_map(scene, pose, intrinsics, view, S, T, size=None) -> np.ndarray:
    """Index (into ``scene.planes``) of the plane seen by each pixel, -1 for background."""
    H, W = size or _default_size(intrinsics)
    C = pose.camera_center(view[0], view[1], S, T)
    _check_in_front(scene, C[None])
    index, _ = _trace(scene, pose.rotation, C, intrinsics, (H, W))
    return index


def ground_truth_disparity(scene, pose, intrinsics, view_pair, S, T, size=None) -> np.ndarray:
    """Signed horizontal disparity ``u_b - u_a`` of the surface seen in view ``a``.

    ``view_pair`` is ``((s_a, t_a), (s_b, t_b))``. Background pixels are NaN.
    """
    H, W = size or _default_size(intrinsics)
    (sa, ta), (sb, tb) = view_pair
    Ca = pose.camera_center(sa, ta, S, T)
    Cb = pose.camera_center(sb, tb, S, T)
    _check_in_front(scene, np.stack([Ca, Cb]))
    index, hit = _trace(scene, pose.rotation, Ca, intrinsics, (H, W))
    cam_b = np.einsum("ij,jhw->ihw", intrinsics.K @ pose.rotation.T, hit - Cb[:, None, None])
    u_b = cam_b[0] / cam_b[2]
    u_a, _ = pixel_grid(H, W)
    disp = u_b - u_a
    disp[index < 0] = np.nan
    return disp


def scene_from_spec(spec: dict):
    """Parse the JSON scene description used by ``lfstitch synth``.

    Returns ``(scene, pose, intrinsics, S, T, size, noise_sigma)``.
    """
    try:
        planes = [
            Plane(p["depth"], tuple(p["extent"]), int(p.get("seed", 0)), p.get("texels_per_unit"))
            for p in spec["planes"]
        ]
        pose_spec = spec.get("pose", {})
        pose = ArrayPose.from_axis_angle(
            pose_spec.get("rotation_axis_angle", (0.0, 0.0, 0.0)),
            pose_spec.get("translation", (0.0, 0.0, 0.0)),
            float(pose_spec.get("baseline", 0.1)),
            float(pose_spec.get("z_step", 0.0)),
        )
        grid = spec.get("grid", {})
        S, T = int(grid.get("cols", 9)), int(grid.get("rows", 9))
        width, height = (int(x) for x in spec.get("size", (128, 128)))
        intr_spec = spec.get("intrinsics", {})
        f = float(intr_spec.get("focal_length_px", 120.0))
        pp = intr_spec.get("principal_point", ((width - 1) / 2.0, (height - 1) / 2.0))
        intr = Intrinsics(f, tuple(pp))
        noise = float(spec.get("noise_sigma", 0.0))
    except GeometryError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParameterError(f"invalid scene spec: {exc}") from exc
    return PlanarScene(planes), pose, intr, S, T, (height, width), noise
