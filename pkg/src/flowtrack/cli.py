"""Command-line entry point: ``flowtrack {track,evaluate,simulate,inspect}``.

Exit codes: 0 success, 2 bad input, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from .errors import InputError, InvariantViolation, MissingFlow
from .io import (bundle_providers, load_bundle, read_detections, read_gt, read_poses, write_bundle,
                 write_poses, write_report)
from .metrics import EvalReport, evaluate
from .similarity import Metric
from .synth import generate, load_scenario, noisy_detector, oracle_entries, scenario_to_dict
from .tracker import TrackerConfig, run_sequence

log = logging.getLogger("flowtrack")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVARIANT = 3
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("FLOWTRACK_LOG", "info").lower()
    level = LOG_LEVELS.get(name, logging.INFO)
    root = logging.getLogger("flowtrack")
    root.handlers[:] = []
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    if name not in LOG_LEVELS:
        log.warning("unknown FLOWTRACK_LOG=%r, using info", name)


def _log_config(command: str, cfg: dict) -> None:
    log.info("%s config: %s", command, json.dumps(cfg, sort_keys=True))


def cmd_track(args) -> int:
    bundle = load_bundle(args.bundle)
    metric = Metric(args.metric)
    propagate = not args.no_flow_boxes
    flows = None
    if bundle.has_flow():
        flows = bundle.flows()
    elif metric in (Metric.FLOW, Metric.MULTI_FLOW):
        raise MissingFlow(f"metric {metric.value!r} needs optical flow but bundle {bundle.root} has no flow directory")
    elif propagate:
        log.warning("bundle has no flow directory; running without flow boxes")
        propagate = False
    cfg = TrackerConfig(l_q=args.lq, box_drop_threshold=args.box_thresh, joint_drop_threshold=args.joint_thresh,
                        nms_iou_threshold=args.nms_iou, similarity_metric=metric,
                        min_match_similarity=args.min_sim, joint_propagation=propagate,
                        n_threads=args.threads, schema=bundle.schema)
    _log_config("track", {**cfg.as_dict(), "bundle": str(bundle.root), "out": str(args.out), "seed": args.seed,
                          "n_frames": bundle.n_frames})
    det, pose = bundle_providers(bundle, seed=args.seed)
    tracked = run_sequence(bundle.n_frames, det, pose, flows, cfg)
    write_poses(args.out, tracked, bundle.schema)
    n_ids = len({inst.id for frame in tracked for inst in frame})
    log.info("wrote %d frames, %d track ids to %s", len(tracked), n_ids, args.out)
    return EXIT_OK


def _fmt(v: float) -> str:
    return "   nan" if math.isnan(v) else f"{v:.4f}"


def format_report(report: EvalReport) -> str:
    """Group columns plus totals, one row per metric; per-joint rows below."""
    names = list(report.groups)
    width = max(7, *(len(n) + 1 for n in names))
    head = "".join(f"{n:>{width}}" for n in names + ["Total"])
    lines = [f"{'':<6}{head}"]
    for label, attr in (("mAP", "ap"), ("MOTA", "mota"), ("MOTP", "motp"), ("Prec", "precision"),
                        ("Rec", "recall")):
        cells = [getattr(report.groups[n], attr) for n in names] + [getattr(report.total, attr)]
        lines.append(f"{label:<6}" + "".join(f"{_fmt(c):>{width}}" for c in cells))
    lines.append("")
    jw = max(len(n) for n in report.per_joint) + 2
    lines.append(f"{'joint':<{jw}}" + "".join(f"{c:>8}" for c in ("AP", "MOTA", "MOTP", "Prec", "Rec", "IDSW")))
    for name, st in report.per_joint.items():
        lines.append(f"{name:<{jw}}" + "".join(f"{_fmt(v):>8}" for v in (st.ap, st.mota, st.motp, st.precision,
                                                                          st.recall)) + f"{st.idsw:>8}")
    t = report.total
    lines.append("")
    lines.append(f"GT {t.n_gt}  TP {t.tp}  FP {t.fp}  FN {t.fn}  IDSW {t.idsw}")
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    gt = read_gt(args.gt)
    tracks, schema = read_poses(args.tracks, len(gt))
    if schema.name != gt.schema.name:
        raise InputError(f"tracks use schema {schema.name!r}, ground truth uses {gt.schema.name!r}")
    _log_config("evaluate", {"tracks": str(args.tracks), "gt": str(args.gt),
                             "report": str(args.report) if args.report else None})
    report = evaluate(tracks, gt)
    print(format_report(report))
    if args.report:
        write_report(args.report, report)
        log.info("wrote report to %s", args.report)
    return EXIT_OK


def cmd_simulate(args) -> int:
    scn = load_scenario(args.scenario)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    noise = scn.noise
    if args.miss_rate is not None:
        noise = replace(noise, detector_miss_rate=args.miss_rate)
        overrides["noise"] = noise
    if overrides:
        scn = replace(scn, **overrides)
    _log_config("simulate", {"scenario": scenario_to_dict(scn), "out_bundle": str(args.out_bundle)})
    gt, flows = generate(scn)
    det = noisy_detector(gt, scn.noise, scn.seed, scn.frame_w, scn.frame_h)
    poses = [[inst for _, inst in row] for row in oracle_entries(gt, scn.noise, scn.seed)]
    write_bundle(args.out_bundle, scn.n_frames, scn.frame_w, scn.frame_h, gt.schema,
                 det.frames, poses, flows, gt)
    log.info("wrote bundle %s (%d frames, %d actors)", args.out_bundle, scn.n_frames, len(scn.actors))
    return EXIT_OK


def cmd_inspect(args) -> int:
    bundle = load_bundle(args.bundle)
    print(f"bundle     {bundle.root}")
    print(f"frames     {bundle.n_frames}")
    print(f"size       {bundle.width}x{bundle.height}")
    print(f"schema     {bundle.schema.name} ({bundle.schema.n_joints} joints)")
    dets = read_detections(bundle.path(bundle.detections), bundle.n_frames)
    print(f"detections {sum(len(d) for d in dets)} boxes")
    poses_path = bundle.path(bundle.poses)
    if poses_path is not None and poses_path.is_file():
        frames, _ = read_poses(poses_path, bundle.n_frames)
        print(f"poses      {sum(len(f) for f in frames)} instances")
    else:
        print("poses      none")
    gt_path = bundle.path(bundle.gt)
    if gt_path is not None and gt_path.is_file():
        gt = read_gt(gt_path, bundle.n_frames)
        print(f"gt         {sum(len(f) for f in gt.frames)} people, "
              f"{len({p.track_id for f in gt.frames for p in f})} tracks")
    else:
        print("gt         none")
    if bundle.has_flow():
        fd = bundle.flows()
        missing = [k for k in range(1, bundle.n_frames) if k not in fd]
        print(f"flow       {len(fd)} fields" + (f", missing {missing}" if missing else ""))
    else:
        print("flow       none")
    return EXIT_OK


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    defaults = TrackerConfig()
    parser = argparse.ArgumentParser(prog="flowtrack", description="Flow-based multi-person pose tracking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="track poses through a sequence bundle")
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--metric", choices=[m.value for m in Metric], default=defaults.similarity_metric.value)
    p.add_argument("--lq", type=_positive_int, default=defaults.l_q, help="history queue length")
    p.add_argument("--box-thresh", type=_unit, default=defaults.box_drop_threshold)
    p.add_argument("--joint-thresh", type=_unit, default=defaults.joint_drop_threshold)
    p.add_argument("--nms-iou", type=_unit, default=defaults.nms_iou_threshold)
    p.add_argument("--min-sim", type=_unit, default=defaults.min_match_similarity)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0, help="seed for answers to boxes that hold no stored pose")
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--no-flow-boxes", action="store_true", help="disable flow-propagated candidate boxes")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("evaluate", help="score a tracks file against ground truth")
    p.add_argument("--tracks", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="materialize a bundle from a scenario")
    p.add_argument("--scenario", required=True, help="scenario JSON path or shipped scenario name")
    p.add_argument("--out-bundle", required=True, type=Path)
    p.add_argument("--miss-rate", type=_unit, default=None, help="override the detector miss rate")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("inspect", help="summarize a bundle")
    p.add_argument("--bundle", required=True, type=Path)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"flowtrack: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except InputError as exc:
        print(f"flowtrack: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"flowtrack: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
