"""Light field data model, directory I/O and EPI slicing.

A light field is stored as one array ``pixels[s, t, v, u, c]``. ``s`` is the
horizontal angular index and ``t`` the vertical one, so a grid with ``S``
horizontal and ``T`` vertical views reads as ``T x S`` (rows x cols).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from ._imaging import to_gray
from .errors import FormatError, InconsistencyError, MissingViewError, ParameterError, RangeError

MANIFEST = "manifest.json"
MIN_SIZE = 16

Orientation = Literal["horizontal", "vertical"]


@dataclass(frozen=True)
class Intrinsics:
    focal_length_px: float
    principal_point: tuple[float, float]

    def __post_init__(self):
        f = float(self.focal_length_px)
        if not np.isfinite(f) or f <= 0:
            raise ParameterError(f"focal length must be positive, got {self.focal_length_px}")
        cx, cy = (float(c) for c in self.principal_point)
        object.__setattr__(self, "focal_length_px", f)
        object.__setattr__(self, "principal_point", (cx, cy))

    @property
    def K(self) -> np.ndarray:
        f = self.focal_length_px
        cx, cy = self.principal_point
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    @classmethod
    def centered(cls, focal_length_px: float, height: int, width: int) -> "Intrinsics":
        return cls(focal_length_px, ((width - 1) / 2.0, (height - 1) / 2.0))


@dataclass(frozen=True, eq=False)
class LightField:
    """Regular grid of sub-aperture images with values in [0, 1].

    ``pixels`` has shape ``(S, T, H, W, 3)`` and is made read-only on
    construction.
    """

    pixels: np.ndarray
    intrinsics: Intrinsics
    angular_spacing: float = 1.0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 5 or px.shape[4] != 3:
            raise InconsistencyError(f"pixels must have shape (S, T, H, W, 3), got {px.shape}")
        S, T, H, W, _ = px.shape
        if S < 1 or T < 1:
            raise InconsistencyError("light field needs at least one view")
        if H < MIN_SIZE or W < MIN_SIZE:
            raise InconsistencyError(f"views must be at least {MIN_SIZE}x{MIN_SIZE}, got {H}x{W}")
        if not px.dtype == np.float32:
            px = px.astype(np.float32)
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise InconsistencyError("intensities must be finite and within [0, 1]")
        if px.flags.writeable:
            px = px.copy()
            px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "angular_spacing", float(self.angular_spacing))

    @property
    def n_s(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_t(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[2]

    @property
    def width(self) -> int:
        return self.pixels.shape[3]

    @property
    def grid_shape(self) -> tuple[int, int]:
        """(rows, cols) = (vertical views, horizontal views)."""
        return self.n_t, self.n_s

    @property
    def center(self) -> tuple[float, float]:
        """Angular centre ``(s_mid, t_mid)``, fractional for even grids."""
        return (self.n_s - 1) / 2.0, (self.n_t - 1) / 2.0

    @property
    def middle_index(self) -> tuple[int, int]:
        return self.n_s // 2, self.n_t // 2

    def view(self, s: int, t: int) -> np.ndarray:
        if not (0 <= s < self.n_s and 0 <= t < self.n_t):
            raise RangeError(f"view ({s},{t}) outside {self.n_s}x{self.n_t} grid")
        return self.pixels[s, t]

    def middle_view(self) -> np.ndarray:
        return self.view(*self.middle_index)

    def with_pixels(self, pixels: np.ndarray) -> "LightField":
        return LightField(np.clip(pixels, 0.0, 1.0), self.intrinsics, self.angular_spacing)


@dataclass(frozen=True)
class EPI:
    pixels: np.ndarray
    orientation: Orientation
    fixed_indices: tuple[int, int] = field(default=(0, 0))


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def view_filename(s: int, t: int) -> str:
    return f"view_{s:02d}_{t:02d}.png"


def save_light_field(lf: LightField, path) -> None:
    """Write ``lf`` as a directory of 8-bit PNG views plus ``manifest.json``."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        manifest = {
            "rows": lf.n_t,
            "cols": lf.n_s,
            "width": lf.width,
            "height": lf.height,
            "focal_length_px": lf.intrinsics.focal_length_px,
            "principal_point": list(lf.intrinsics.principal_point),
            "angular_spacing": lf.angular_spacing,
        }
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        for s in range(lf.n_s):
            for t in range(lf.n_t):
                Image.fromarray(_to_uint8(lf.pixels[s, t]), mode="RGB").save(path / view_filename(s, t))
    except OSError as exc:
        raise FormatError(f"cannot write light field to {path}: {exc}") from exc


def load_light_field(path) -> LightField:
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.is_file():
        raise FormatError(f"no {MANIFEST} in {path}")
    try:
        meta = json.loads(manifest_path.read_text())
        n_t, n_s = int(meta["rows"]), int(meta["cols"])
        width, height = int(meta["width"]), int(meta["height"])
        intr = Intrinsics(float(meta["focal_length_px"]), tuple(meta["principal_point"]))
        spacing = float(meta.get("angular_spacing", 1.0))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest {manifest_path}: {exc}") from exc

    missing = [(s, t) for s in range(n_s) for t in range(n_t) if not (path / view_filename(s, t)).is_file()]
    if missing:
        raise MissingViewError(missing)

    pixels = np.empty((n_s, n_t, height, width, 3), dtype=np.float32)
    for s in range(n_s):
        for t in range(n_t):
            with Image.open(path / view_filename(s, t)) as im:
                arr = np.asarray(im.convert("RGB"))
            if arr.shape[:2] != (height, width):
                raise InconsistencyError(
                    f"view ({s},{t}) is {arr.shape[1]}x{arr.shape[0]}, manifest declares {width}x{height}"
                )
            pixels[s, t] = arr.astype(np.float32) / np.float32(255.0)
    return LightField(pixels, intr, spacing)


def extract_epi(lf: LightField, orientation: Orientation, fixed_angular_index: int, fixed_spatial_index: int) -> EPI:
    """Slice an epipolar plane image out of ``lf``.

    Horizontal: row ``a`` is row ``v = fixed_spatial_index`` of view
    ``(a, fixed_angular_index)``. Vertical: row ``a`` is column
    ``u = fixed_spatial_index`` of view ``(fixed_angular_index, a)``.
    Row index ``a`` is the angular coordinate, read as pointing up.
    """
    if orientation == "horizontal":
        if not 0 <= fixed_angular_index < lf.n_t or not 0 <= fixed_spatial_index < lf.height:
            raise RangeError(f"horizontal EPI index (t={fixed_angular_index}, v={fixed_spatial_index}) out of range")
        rows = lf.pixels[:, fixed_angular_index, fixed_spatial_index, :, :]
    elif orientation == "vertical":
        if not 0 <= fixed_angular_index < lf.n_s or not 0 <= fixed_spatial_index < lf.width:
            raise RangeError(f"vertical EPI index (s={fixed_angular_index}, u={fixed_spatial_index}) out of range")
        rows = lf.pixels[fixed_angular_index, :, :, fixed_spatial_index, :]
    else:
        raise ParameterError(f"unknown orientation {orientation!r}")
    return EPI(to_gray(rows.astype(np.float64)), orientation, (fixed_angular_index, fixed_spatial_index))
