"""Command-line entry points: calibrate, synth, run, eval, errsurf."""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, fileio, mapper, pipeline, radiometric, synth, tracker
from .imagecore import load_sequence
from .se3 import Pose
from .tracker import AXES, OBJECTIVES

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_IO = 3

FRAME_HZ = 30.0
PCF_VARIANTS = ("p0", "p1", "p2", "p3")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the documented code is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _update_dataclass(obj, values: dict, path: str) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, val in values.items():
        if key not in names:
            raise ValueError(f"unknown config field '{path}{key}'")
        cur = getattr(obj, key)
        if isinstance(cur, tuple) and isinstance(val, list):
            val = tuple(val)
        setattr(obj, key, val)


def _apply_config_file(cfg: pipeline.PipelineConfig, path) -> None:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    for section, values in data.items():
        if section in ("tracker", "mapper"):
            if not isinstance(values, dict):
                raise ValueError(f"config section '{section}' must be an object")
            _update_dataclass(getattr(cfg, section), values, f"{section}.")
        else:
            _update_dataclass(cfg, {section: values}, "")
    cfg.tracker.__post_init__()


def cmd_calibrate(args) -> int:
    images, exposures = synth.response_stack(seed=args.seed)
    curve = radiometric.estimate_crf(images, exposures)
    noise_images = synth.noise_stack(seed=args.seed + 2)
    noise = radiometric.estimate_noise(noise_images, curve)
    pcf = radiometric.build_pcf(curve, noise)
    radiometric.save_calibration(args.out, curve, noise, pcf)
    print(f"calibration written to {args.out}")
    print(f"  sigma_s={np.array2string(noise.sigma_s, precision=3)} "
          f"sigma_c={np.array2string(noise.sigma_c, precision=3)} "
          f"m={noise.m:.3f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    synth.generate_sequence(args.out, mode=args.mode, n_frames=args.frames,
                            seed=args.seed,
                            depth_noise=not args.no_depth_noise,
                            write_hdr=not args.no_hdr)
    print(f"{args.frames}-frame {args.mode} sequence written to {args.out}")
    return EXIT_OK


def _load_calibration_if_needed(cfg, calib_path):
    if not pipeline.uses_radiance(cfg.tracker.objective):
        return None, None
    if calib_path is None:
        raise ValueError(
            f"objective {cfg.tracker.objective} requires --calib")
    curve, _noise, pcf = radiometric.load_calibration(calib_path)
    return curve, pcf


def cmd_run(args) -> int:
    cfg = pipeline.PipelineConfig()
    cfg.tracker.objective = args.objective
    cfg.tracker.pcf_variant = args.pcf
    cfg.frame_to_frame = args.mode == "frame_to_frame"
    cfg.snapshot_every = args.snapshot_every
    if args.config:
        _apply_config_file(cfg, args.config)

    seq = load_sequence(args.sequence)
    curve, pcf = _load_calibration_if_needed(cfg, args.calib)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        if not rec.converged:
            print(f"frame {rec.index}: tracking failed, holding pose")
        elif args.verbose and rec.index % 10 == 0:
            print(f"frame {rec.index}: cost {rec.cost:.3e} "
                  f"scale {rec.exposure_scale:.4f}")

    result = pipeline.run_sequence(seq, cfg, curve=curve, pcf=pcf,
                                   progress=progress)

    timestamps = [i / FRAME_HZ for i in range(len(result.poses))]
    fileio.write_trajectory(out / "trajectory.txt", timestamps, result.poses)
    mapper.save_volume(out / "volume.bin", result.volume)
    with open(out / "frames.csv", "w") as fh:
        fh.write("frame,converged,integrated,exposure_scale,cost\n")
        for r in result.records:
            fh.write(f"{r.index},{int(r.converged)},{int(r.integrated)},"
                     f"{r.exposure_scale:.9g},{r.cost:.9g}\n")
    if result.prediction is not None:
        count = mapper.export_pointcloud(out / "cloud.ply", result.prediction,
                                         seq.camera, result.poses[-1])
        print(f"cloud.ply: {count} points")
    for idx, pred in sorted(result.snapshots.items()):
        fileio.write_pfm(out / f"predicted_{idx:06d}.pfm", pred.radiance)

    if seq.groundtruth is not None:
        report = evaluation.summarize(result.poses, seq.groundtruth)
        print(f"ATE RMSE {report['ate_rmse_m']:.4f} m over "
              f"{report['n_frames']} frames")
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def cmd_eval(args) -> int:
    _, est = fileio.read_trajectory(args.trajectory)
    _, ref = fileio.read_trajectory(args.groundtruth)
    if len(est) != len(ref):
        raise ValueError(
            f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_error_report(out / "errors.csv", out / "summary.json",
                                  est, ref)
    summary = evaluation.summarize(est, ref)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_errsurf(args) -> int:
    cfg = pipeline.PipelineConfig()
    cfg.tracker.objective = args.objective
    cfg.tracker.pcf_variant = args.pcf

    seq = load_sequence(args.sequence)
    curve, pcf = _load_calibration_if_needed(cfg, args.calib)
    n = len(seq)
    if not (0 <= args.ref < n and 0 <= args.live < n):
        raise ValueError(f"frame indices out of range for {n} frames")

    _, _, ref_view = pipeline._live_state(seq.camera, seq.frames[args.ref],
                                          cfg, curve, pcf)
    _, _, live_view = pipeline._live_state(seq.camera, seq.frames[args.live],
                                           cfg, curve, pcf)
    if seq.groundtruth is not None:
        center = seq.groundtruth[args.live].inverse().compose(
            seq.groundtruth[args.ref])
    else:
        center = Pose.identity()

    offsets = np.arange(-args.range_m, args.range_m + 0.5 * args.step_m,
                        args.step_m)
    costs = tracker.error_surface(ref_view, live_view, center, args.axis,
                                  offsets, cfg.tracker)
    tracker.write_error_surface_csv(args.out, offsets, costs,
                                    args.objective, args.axis)
    argmin = offsets[int(np.nanargmin(costs))]
    print(f"{args.objective} argmin offset along {args.axis}: "
          f"{argmin * 1000:.1f} mm")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radslam",
                     description="Exposure-invariant RGB-D tracking and "
                                 "HDR fusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[],
                       help="fit response curve, noise model and confidence "
                            "table from synthetic exposure stacks")
    p.add_argument("--out", required=True, help="output calibration JSON")
    p.add_argument("--seed", type=int, default=11)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("synth", help="generate a synthetic RGB-D sequence")
    p.add_argument("--out", required=True, help="output sequence directory")
    p.add_argument("--mode", choices=("constant", "flicker", "smooth"),
                   default="smooth")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-depth-noise", action="store_true")
    p.add_argument("--no-hdr", action="store_true",
                   help="skip writing ground-truth radiance PFMs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="track a sequence and fuse the model")
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--calib", help="calibration JSON (radiance objectives)")
    p.add_argument("--objective", choices=OBJECTIVES,
                   default="norm_radiance")
    p.add_argument("--pcf", choices=PCF_VARIANTS, default="p2")
    p.add_argument("--mode", choices=("frame_to_model", "frame_to_frame"),
                   default="frame_to_model")
    p.add_argument("--config", help="JSON overrides for tracker/mapper "
                                    "config fields")
    p.add_argument("--snapshot-every", type=int, default=0,
                   help="write a predicted radiance PFM every N frames")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="trajectory error report vs ground truth")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--groundtruth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("errsurf",
                       help="1-D objective sweep around the true offset "
                            "between two frames")
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--ref", type=int, default=0)
    p.add_argument("--live", type=int, default=1)
    p.add_argument("--objective", choices=OBJECTIVES,
                   default="norm_radiance")
    p.add_argument("--pcf", choices=PCF_VARIANTS, default="p2")
    p.add_argument("--axis", choices=AXES, default="tx")
    p.add_argument("--range-m", type=float, default=0.02)
    p.add_argument("--step-m", type=float, default=0.001)
    p.add_argument("--calib", help="calibration JSON (radiance objectives)")
    p.set_defaults(func=cmd_errsurf)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
