"""``lfstitch`` command line: synth, preprocess, stitch, render and info."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import extract_epi, load_light_field, save_light_field
from .errors import FormatError, LightFieldError, ParameterError
from .geometry.fundamental import SAMPSON_THRESHOLD
from .preprocess import apply_recentering, estimate_recentering, photometric_correct
from .render import RefocusParams, disparity_map, extreme_views, refocus, save_image
from .stitch import DEDUP_RADIUS, HULL_TOLERANCE, StitchConfig, stitch_with_report
from .synth import render_light_field, scene_from_spec

DEFAULT_SEED = 42


@dataclass
class PipelineConfig:
    inputs: list[str]
    output: str
    seed: int = DEFAULT_SEED
    threads: int = 1
    recenter: bool = True
    hough_step: float = 0.25
    full_epi_scan: bool = False
    grid_step: float = 1.0
    ransac_threshold: float = SAMPSON_THRESHOLD
    rotation_check: bool = False
    max_disp: int | None = None
    slopes: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.inputs:
            raise ParameterError("at least one input is required")
        if self.threads < 1:
            raise ParameterError(f"--threads must be >= 1, got {self.threads}")
        if not self.hough_step > 0:
            raise ParameterError(f"--hough-step must be positive, got {self.hough_step}")
        if not self.grid_step > 0:
            raise ParameterError(f"--grid-step must be positive, got {self.grid_step}")
        if not self.ransac_threshold > 0:
            raise ParameterError(f"--ransac-threshold must be positive, got {self.ransac_threshold}")
        if any(not np.isfinite(k) for k in self.slopes):
            raise ParameterError("slopes must be finite")

    def stitch_config(self) -> StitchConfig:
        return StitchConfig(
            recenter=self.recenter,
            hough_step=self.hough_step,
            full_epi_scan=self.full_epi_scan,
            grid_step=self.grid_step,
            ransac_threshold=self.ransac_threshold,
            dedup_radius=DEDUP_RADIUS,
            hull_tolerance=HULL_TOLERANCE,
            rotation_check=self.rotation_check,
        )


class _Parser(argparse.ArgumentParser):
    """Usage errors become a one-line ``stage=cli`` message and exit code 2."""

    def error(self, message):
        err = ParameterError(message, stage="cli")
        sys.stderr.write(err.cli_line() + "\n")
        raise SystemExit(err.exit_code)


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParameterError(f"invalid JSON in {path}: {exc}") from exc


def _write_json(obj, path) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create {p}: {exc}") from exc
    return p


def _config(args, inputs) -> PipelineConfig:
    return PipelineConfig(
        inputs=list(inputs),
        output=args.out,
        seed=args.seed,
        threads=args.threads,
        recenter=not getattr(args, "no_recenter", False),
        hough_step=getattr(args, "hough_step", 0.25),
        full_epi_scan=getattr(args, "full_epi_scan", False),
        grid_step=getattr(args, "grid_step", 1.0),
        ransac_threshold=getattr(args, "ransac_threshold", SAMPSON_THRESHOLD),
        rotation_check=getattr(args, "rotation_check", False),
        max_disp=getattr(args, "max_disp", None),
        slopes=list(getattr(args, "slope", None) or []),
    )


# --- commands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = _read_json(args.scene)
    if args.pose:
        spec = {**spec, "pose": _read_json(args.pose)}
    _config(args, [args.scene])
    scene, pose, intr, S, T, size, noise = scene_from_spec(spec)
    lf = render_light_field(scene, pose, intr, S, T, size, noise_sigma=noise, seed=args.seed)
    save_light_field(lf, _out_dir(args.out))
    truth = {
        "grid": {"rows": T, "cols": S},
        "size": [size[1], size[0]],
        "focal_length_px": intr.focal_length_px,
        "baseline": pose.baseline,
        "rotation_axis_angle": spec.get("pose", {}).get("rotation_axis_angle", [0.0, 0.0, 0.0]),
        "translation": pose.center_translation.tolist(),
        "z_step": pose.z_step,
        "planes": [
            {"depth": p.depth, "disparity_px_per_view": intr.focal_length_px * pose.baseline / p.depth}
            for p in scene.planes
        ],
        "seed": args.seed,
    }
    print(json.dumps(truth, indent=2, sort_keys=True))
    return 0


def cmd_preprocess(args) -> int:
    cfg = _config(args, [args.input])
    lf = photometric_correct(load_light_field(args.input))
    info = {"recentering": None}
    if cfg.recenter:
        d_s, d_t = estimate_recentering(lf, cfg.hough_step, cfg.full_epi_scan)
        lf = apply_recentering(lf, d_s, d_t)
        info["recentering"] = {"d_s": d_s, "d_t": d_t}
    out = _out_dir(cfg.output)
    save_light_field(lf, out)
    _write_json(info, out / "preprocess.json")
    return 0


def cmd_stitch(args) -> int:
    cfg = _config(args, args.inputs)
    lfs = []
    for j, path in enumerate(cfg.inputs):
        try:
            lfs.append(load_light_field(path))
        except LightFieldError as exc:
            exc.stage = f"load[{j}]"
            raise
    out_lf, report = stitch_with_report(lfs, seed=cfg.seed, config=cfg.stitch_config())
    report["config"] = {k: v for k, v in asdict(cfg).items() if k not in ("inputs", "output", "slopes", "max_disp")}
    report["inputs"] = [str(p) for p in cfg.inputs]
    out = _out_dir(cfg.output)
    save_light_field(out_lf, out)
    _write_json(report, args.report or out / "report.json")
    g = report["grid"]
    print(f"grid {g['rows']}x{g['cols']} from {len(lfs)} light field(s)")
    return 0


def cmd_render(args) -> int:
    cfg = _config(args, [args.input])
    lf = load_light_field(args.input)
    out = _out_dir(cfg.output)
    if args.what == "refocus":
        if not cfg.slopes:
            raise ParameterError("refocus needs at least one --slope")
        for i, k in enumerate(cfg.slopes):
            save_image(refocus(lf, RefocusParams(k)), out / f"refocus_{i:02d}.png")
    elif args.what == "epi":
        orient = args.orientation
        a = args.angular_index
        if a is None:
            a = lf.middle_index[1] if orient == "horizontal" else lf.middle_index[0]
        x = args.spatial_index
        if x is None:
            x = (lf.height if orient == "horizontal" else lf.width) // 2
        epi = extract_epi(lf, orient, a, x)
        save_image(epi.pixels, out / f"epi_{orient}.png")
    elif args.what == "disparity":
        left, right = extreme_views(lf, args.orientation)
        if args.orientation == "vertical":
            left, right = np.swapaxes(left, 0, 1), np.swapaxes(right, 0, 1)
        max_disp = cfg.max_disp if cfg.max_disp is not None else max(1, (left.shape[1] - 1) // 4)
        dm = disparity_map(left, right, max_disp)
        if args.orientation == "vertical":
            dm.values, dm.valid = dm.values.T, dm.valid.T
        meta = dm.save_png16(out / "disparity.png")
        lo, hi = meta["min"], meta["max"]
        vis = np.where(dm.valid, (dm.values - lo) / (hi - lo if hi > lo else 1.0), 0.0)
        save_image(np.repeat(vis[..., None], 3, axis=2), out / "disparity_vis.png")
    elif args.what == "views":
        for name, img in zip(("first", "last"), extreme_views(lf, args.orientation)):
            save_image(img, out / f"{args.orientation}_{name}.png")
        save_image(lf.middle_view(), out / "middle.png")
    return 0


def cmd_info(args) -> int:
    lf = load_light_field(args.input)
    info = {
        "grid": {"rows": lf.grid_shape[0], "cols": lf.grid_shape[1]},
        "width": lf.width,
        "height": lf.height,
        "focal_length_px": lf.intrinsics.focal_length_px,
        "principal_point": list(lf.intrinsics.principal_point),
        "angular_spacing": lf.angular_spacing,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--threads", type=int, default=1, help="worker cap (library code runs sequentially)")

    pre_flags = argparse.ArgumentParser(add_help=False)
    pre_flags.add_argument("--no-recenter", action="store_true")
    pre_flags.add_argument("--hough-step", type=float, default=0.25, help="Hough angle step in degrees")
    pre_flags.add_argument("--full-epi-scan", action="store_true", help="analyze every EPI, not a subsample")

    p = _Parser(prog="lfstitch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("synth", parents=[common], help="render a synthetic light field")
    q.add_argument("--scene", required=True, help="scene JSON")
    q.add_argument("--pose", help="pose JSON overriding the scene's pose")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("preprocess", parents=[common, pre_flags], help="photometric correction and recentering")
    q.add_argument("input")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_preprocess)

    q = sub.add_parser("stitch", parents=[common, pre_flags], help="register and merge light fields")
    q.add_argument("inputs", nargs="+", help="light field directories; the first is the reference")
    q.add_argument("--out", required=True)
    q.add_argument("--report", help="report path (default OUT/report.json)")
    q.add_argument("--grid-step", type=float, default=1.0)
    q.add_argument("--ransac-threshold", type=float, default=SAMPSON_THRESHOLD, help="Sampson distance in px")
    q.add_argument("--rotation-check", action="store_true",
                   help="also estimate R from the corner views and report the disagreement")
    q.set_defaults(func=cmd_stitch)

    q = sub.add_parser("render", parents=[common], help="refocus, EPIs, disparity maps, views")
    q.add_argument("what", choices=["refocus", "epi", "disparity", "views"])
    q.add_argument("input")
    q.add_argument("--out", required=True)
    q.add_argument("--slope", type=float, nargs="+", help="refocus slopes in px per view")
    q.add_argument("--orientation", choices=["horizontal", "vertical"], default="horizontal")
    q.add_argument("--angular-index", type=int)
    q.add_argument("--spatial-index", type=int)
    q.add_argument("--max-disp", type=int)
    q.set_defaults(func=cmd_render)

    q = sub.add_parser("info", parents=[common], help="print light field metadata")
    q.add_argument("input")
    q.set_defaults(func=cmd_info, out=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except LightFieldError as exc:
        sys.stderr.write(exc.cli_line(args.command) + "\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(FormatError(str(exc)).cli_line(args.command) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
