"""Command-line entry point: ``sic-calib {synth,calibrate,undistort,sweep}``.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 pipeline stage failure, 5 invalid curve.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from . import synth
from .errors import CalibrationError, NonMonotoneCurve
from .geometry import SensorSpec, total_disparity
from .homography import reproject
from .pipeline import ModelFreeConfig, run_full_pipeline, undistort_points

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_STAGE, EXIT_CURVE = 0, 2, 3, 4, 5

logger = logging.getLogger("sic_calib")


class UsageError(Exception):
    pass


def _positive_float(name):
    def parse(s):
        try:
            v = float(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name}: not a number: {s!r}") from None
        if not np.isfinite(v) or v <= 0:
            raise argparse.ArgumentTypeError(f"{name} must be > 0, got {s}")
        return v
    return parse


def _non_negative_float(name):
    def parse(s):
        try:
            v = float(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name}: not a number: {s!r}") from None
        if not np.isfinite(v) or v < 0:
            raise argparse.ArgumentTypeError(f"{name} must be >= 0, got {s}")
        return v
    return parse


def _positive_int(name):
    def parse(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name}: not an integer: {s!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {s}")
        return v
    return parse


def _sensor(s: str) -> SensorSpec:
    try:
        w, h = s.lower().split("x")
        return SensorSpec(int(w), int(h))
    except ValueError:
        raise argparse.ArgumentTypeError(f"sensor must look like 3264x2448, got {s!r}") from None


def _sigma_list(s: str) -> list[float]:
    try:
        vals = [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sigmas must be comma-separated numbers, got {s!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("no noise levels given")
    if any(not (np.isfinite(v) and v >= 0) for v in vals):
        raise argparse.ArgumentTypeError(f"noise levels must be >= 0, got {s!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sic-calib", description="Single-image camera calibration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic correspondence files")
    s.add_argument("--preset", choices=("pose1", "poses20"), default="pose1")
    s.add_argument("--spacing", type=_positive_float("spacing"), default=synth.POSE1_SPACING,
                   help="ideal-grid pitch in px (pose1 preset)")
    s.add_argument("--sigma", type=_non_negative_float("sigma"), default=0.0,
                   help="image noise standard deviation in px")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--allow-large-noise", action="store_true", help="accept sigma > 1 px")
    s.add_argument("--out", required=True,
                   help="output CSV (pose1) or directory (poses20)")

    c = sub.add_parser("calibrate", help="run the calibration pipeline on a correspondence file")
    c.add_argument("--input", required=True)
    c.add_argument("--sensor", type=_sensor, default=synth.SENSOR)
    c.add_argument("--mode", choices=("mb", "mf"), default="mb",
                   help="mb: polynomial distortion model; mf: model-free radial curve")
    c.add_argument("--epsilon", type=_non_negative_float("epsilon"), default=None,
                   help="slack of the tangency constraint in px (mf); median variant when omitted")
    c.add_argument("--nprime", type=_positive_int("nprime"), default=200,
                   help="points nearest the centre used by the median variant (mf)")
    c.add_argument("--init", choices=("center", "disparity"), default="center",
                   help="starting centre for the centre search")
    c.add_argument("--report", required=True)
    c.add_argument("--curve-out", help="write the final radial curve CSV (mf)")
    c.add_argument("--disparity-out", help="write the per-point homography disparity CSV")
    c.add_argument("--no-plots", action="store_true", help="skip the figures written next to the report")

    u = sub.add_parser("undistort", help="correct image points with a radial curve")
    u.add_argument("--points", required=True)
    u.add_argument("--curve", required=True)
    u.add_argument("--cod", help="override the curve centre, as u0,v0")
    u.add_argument("--out", required=True)

    w = sub.add_parser("sweep", help="Monte-Carlo noise sweep on the pose-1 scene")
    w.add_argument("--sigmas", type=_sigma_list, default=[round(0.1 * i, 1) for i in range(1, 11)],
                   help="comma-separated noise levels in px")
    w.add_argument("--trials", type=_positive_int("trials"), default=10)
    w.add_argument("--mode", choices=("mb", "mf", "both"), default="both")
    w.add_argument("--spacing", type=_positive_float("spacing"), default=synth.POSE1_SPACING)
    w.add_argument("--workers", type=_positive_int("workers"), default=1)
    w.add_argument("--seed", type=int, default=1000)
    w.add_argument("--out", required=True)
    w.add_argument("--no-plots", action="store_true")
    return p


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    try:
        noise = synth.NoiseSpec(args.sigma, args.seed, args.allow_large_noise)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    meta = {"preset": args.preset, "sigma": args.sigma, "seed": args.seed}
    scene = synth.pose1_scene()
    out = Path(args.out)
    if args.preset == "pose1":
        if args.spacing < 1.0:
            raise UsageError(f"spacing must be >= 1 px, got {args.spacing}")
        data = synth.add_noise(synth.generate_dense_grid(scene, args.spacing), noise)
        meta.update(spacing=args.spacing, n_points=len(data))
        sio.write_correspondences(out, data)
        sio.write_report(out.with_suffix(".truth.txt"),
                         sio.truth_report(scene.intrinsics, scene.pose, scene.distortion, meta))
        logger.info("wrote %d correspondences to %s", len(data), out)
        return EXIT_OK
    scenes = synth.twenty_pose_scenes()
    sets = synth.generate_pose_set(scenes)
    out.mkdir(parents=True, exist_ok=True)
    for i, cs in enumerate(sets, 1):
        sio.write_correspondences(out / f"pose{i:02d}.csv",
                                  synth.add_noise(cs, synth.NoiseSpec(args.sigma, args.seed + i,
                                                                      args.allow_large_noise)))
    meta.update(n_poses=len(sets), points_per_pose=len(sets[0]))
    sio.write_report(out / "truth.txt", sio.truth_report(scene.intrinsics, [s.pose for s in scenes],
                                                         scene.distortion, meta))
    logger.info("wrote %d pose files to %s", len(sets), out)
    return EXIT_OK


def _figure_paths(report: Path) -> dict[str, Path]:
    stem = report.with_suffix("")
    return {"disparity": Path(f"{stem}_disparity.png"), "curve": Path(f"{stem}_curve.png")}


def cmd_calibrate(args) -> int:
    data = sio.read_correspondences(args.input)
    if args.mode == "mf":
        cfg = (ModelFreeConfig(epsilon=args.epsilon, n_prime_p=args.nprime, variant="epsilon")
               if args.epsilon is not None else
               ModelFreeConfig(n_prime_p=args.nprime, variant="median"))
    else:
        cfg = None
    sensor = args.sensor
    meta = {"input": Path(args.input).name, "input_sha256": sio.file_digest(args.input),
            "n_points": len(data), "sensor": f"{sensor.width}x{sensor.height}"}
    config = {"mode": args.mode, "init": args.init}
    if cfg is not None:
        config.update(variant=cfg.variant, epsilon=cfg.epsilon, nprime=cfg.n_prime_p)

    run, error = None, None
    try:
        run = run_full_pipeline(data, sensor, mode=args.mode, cfg=cfg, init=args.init)
    except CalibrationError as exc:
        error = exc
        run = getattr(exc, "partial", None)

    curve_path = None
    if run is not None and error is None and args.curve_out and args.mode == "mf":
        sio.write_curve(args.curve_out, run.final.distortion)
        curve_path = Path(args.curve_out).name
    report = sio.build_report(run, meta, config, error, curve_path)
    sio.write_report(args.report, report)

    d_tot = None
    if run is not None and "Step1" in run.stages:
        H = run.stages["Step1"].extras["homography"]
        d_tot = total_disparity(reproject(H, data.pw), data.pd)
        if args.disparity_out:
            sio.write_disparity(args.disparity_out, data.pd, d_tot)
    if not args.no_plots and run is not None and run.stages:
        _calibration_figures(Path(args.report), data, sensor, run, d_tot)

    if error is not None:
        print(f"calibration failed at {error.stage}: {type(error).__name__}: {error}", file=sys.stderr)
        return EXIT_STAGE
    A = run.final.intrinsics
    print(f"{run.final.stage}: fx={A.fx:.6g} fy={A.fy:.6g} u0={A.u0:.6g} v0={A.v0:.6g} "
          f"rpe={run.final.rpe_mean:.3g}+-{run.final.rpe_std:.3g} px")
    return EXIT_OK


def _calibration_figures(report: Path, data, sensor, run, d_tot) -> None:
    from . import plotting
    from .pipeline import RadialCurve

    paths = _figure_paths(report)
    if d_tot is not None:
        plotting.plot_disparity_map(data.pd, d_tot, paths["disparity"], sensor=sensor,
                                    cod=run.step1.cod if run.step1 is not None else None)
    curves = {s: r.distortion for s, r in run.stages.items() if isinstance(r.distortion, RadialCurve)
              and s != "Step1"}
    final = run.final
    if final.stage == "Step3A":
        from .geometry import remove_distortion
        pu = remove_distortion(data.pd, final.intrinsics, final.distortion)
        curves["Step3A"] = RadialCurve.from_points(data.pd, pu, final.intrinsics.center)
    if curves:
        plotting.plot_radial_curves(curves, paths["curve"])


def cmd_undistort(args) -> int:
    cod = None
    if args.cod:
        try:
            cod = tuple(float(v) for v in args.cod.split(","))
        except ValueError:
            raise UsageError(f"--cod must be u0,v0, got {args.cod!r}") from None
        if len(cod) != 2:
            raise UsageError(f"--cod must be u0,v0, got {args.cod!r}")
    try:
        curve = sio.read_curve(args.curve, cod)
    except ValueError as exc:
        if isinstance(exc, sio.FileFormatError):
            raise
        print(f"invalid curve: {exc}", file=sys.stderr)
        return EXIT_CURVE
    pts = sio.read_points(args.points)
    try:
        pu, flags = undistort_points(pts, curve)
    except NonMonotoneCurve as exc:
        print(f"invalid curve: {exc}", file=sys.stderr)
        return EXIT_CURVE
    sio.write_undistorted(args.out, pts, pu, flags)
    logger.info("undistorted %d points, %d extrapolated", len(pts), int(flags.sum()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    modes = ("mb", "mf") if args.mode == "both" else (args.mode,)
    rows, cells = synth.run_noise_sweep(synth.pose1_scene(), args.sigmas, args.trials, modes,
                                        spacing=args.spacing, workers=args.workers,
                                        base_seed=args.seed)
    sio.write_table(args.out, rows, synth.SWEEP_COLUMNS)
    if not args.no_plots:
        from . import plotting
        plotting.plot_sweep(rows, Path(args.out).with_suffix(".png"))
    n_fail = sum(c.failure is not None for c in cells)
    if n_fail:
        print(f"{n_fail} of {len(cells)} cells failed", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "calibrate": cmd_calibrate, "undistort": cmd_undistort, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, sio.FileFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
