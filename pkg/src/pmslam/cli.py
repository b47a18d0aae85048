"""Command line entry point: ``slam run``, ``slam eval`` and ``slam synth``."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .camera import PinholeIntrinsics
from .eval import AlignmentError, Trajectory, ate_rmse, read_tum, write_tum
from .pipeline import PredictorError, SlamConfig, StreamPredictor, record, run, synthetic_predictor
from .synth import intrinsics_for

SYNTH_KINDS = ("orbit", "loop", "pure_rotation", "zoom_like")


def _config(args) -> SlamConfig:
    cfg = SlamConfig.from_file(args.config) if args.config else SlamConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "no_loop_closure", False):
        cfg.loop_closure = False
    calib = getattr(args, "calib", None)
    if calib is not None:
        if calib.lower() == "none":
            cfg.calibrated, cfg.intrinsics = False, None
        elif calib.lower() == "auto":
            cfg.calibrated, cfg.intrinsics = True, intrinsics_for(cfg.resolution)
        else:
            cfg.calibrated, cfg.intrinsics = True, PinholeIntrinsics.parse(calib)
    return cfg


def _ground_truth(pred) -> Trajectory:
    return Trajectory(pred.timestamps(), pred.poses)


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.input.startswith("synthetic:"):
        kind = args.input.split(":", 1)[1]
        if kind not in SYNTH_KINDS:
            raise SystemExit(f"unknown synthetic kind {kind!r}; choose from {', '.join(SYNTH_KINDS)}")
        pred = synthetic_predictor(kind, args.frames, cfg)
    else:
        pred = StreamPredictor(args.input)
    traj, cloud, report, _ = run(cfg, pred, args.out)
    if hasattr(pred, "poses"):
        gt = _ground_truth(pred)
        write_tum(os.path.join(args.out, "groundtruth.txt"), gt)
        try:
            report["ate_rmse"] = ate_rmse(traj, gt)
        except AlignmentError as exc:
            report["ate_rmse"] = None
            print(f"warning: {exc}", file=sys.stderr)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2)
    print(f"frames {report['frames']}  keyframes {report['keyframes']}  loop edges {len(report['loop_edges'])}  "
          f"lost {len(report['lost_frames'])}  points {len(cloud)}")
    if report.get("ate_rmse") is not None:
        print(f"ate_rmse {report['ate_rmse']:.6g}")
    print(f"outputs written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    est, ref = read_tum(args.est), read_tum(args.ref)
    ate = ate_rmse(est, ref)
    print(json.dumps({"ate_rmse": ate, "est_poses": len(est), "ref_poses": len(ref)}))
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    pred = synthetic_predictor(args.kind, args.frames, cfg)
    slam = record(cfg, pred, args.out)
    write_tum(os.path.join(args.out, "groundtruth.txt"), _ground_truth(pred))
    n = len([f for f in os.listdir(args.out) if f.startswith("pair_")])
    print(f"recorded {n} predictions for {pred.n_frames} frames ({len(slam.graph)} keyframes) in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slam", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run SLAM on a synthetic sequence or a recorded pointmap stream")
    r.add_argument("--input", required=True, help="stream directory or synthetic:KIND")
    r.add_argument("--frames", type=int, default=30, help="frame count for synthetic input")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--config", default=None, help="flat 'key = value' config file")
    r.add_argument("--calib", default=None, help="fx,fy,cx,cy, 'auto' (synthetic intrinsics) or 'none'")
    r.add_argument("--no-loop-closure", action="store_true")
    r.add_argument("--out", default="slam_out")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="ATE RMSE of an estimated TUM trajectory against a reference")
    e.add_argument("--est", required=True)
    e.add_argument("--ref", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="record a synthetic sequence as a pointmap stream directory")
    s.add_argument("--kind", choices=SYNTH_KINDS, default="loop")
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, PredictorError, AlignmentError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
