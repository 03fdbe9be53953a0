"""Command-line interface: one subcommand per pipeline stage.

Angular flags are degrees and get converted at this boundary; the library
works in radians. All randomness flows from ``--seed``. Exit codes: 0 ok,
1 domain error (one ``error: ...`` line on stderr), 2 usage error.
The ``NAVFORGE_BIND`` environment variable overrides the serve/capture
endpoint when set.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from . import capture as cap
from . import evaluation as ev
from . import sequence_store as store
from . import vpr_builder as vpr
from .geometry import PerturbationParams, Waypoint, densify_path, perturb_trajectory
from .depth_codec import DepthCodecParams

DEFAULT_SEED = 20240

TIME_OF_DAY_CHOICES = ("day", "night")
WEATHER_CHOICES = ("extrasunny", "overcast", "rain", "clear")


def parse_waypoints(text: str) -> list[Waypoint]:
    waypoints = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [float(v) for v in chunk.split(",")]
        if len(parts) not in (2, 3):
            raise ValueError(f"waypoint '{chunk}' must be x,y or x,y,z")
        waypoints.append(Waypoint(parts[0], parts[1], parts[2] if len(parts) == 3 else 0.0))
    if not waypoints:
        raise ValueError("no waypoints given")
    return waypoints


def resolve_endpoint(flag_value: str) -> str:
    return os.environ.get("NAVFORGE_BIND", flag_value)


def cmd_simulate(args) -> int:
    if args.waypoints:
        waypoints = parse_waypoints(args.waypoints)
    else:
        import numpy as np

        rng = np.random.default_rng(args.seed)
        pts = rng.uniform(-args.extent, args.extent, size=(args.random_waypoints, 2))
        waypoints = [Waypoint(float(x), float(y), 0.0) for x, y in pts]
    poses = densify_path(waypoints, args.spacing)
    if args.sigma_linear > 0.0 or args.sigma_angular_deg > 0.0:
        params = PerturbationParams(args.sigma_linear, math.radians(args.sigma_angular_deg), seed=args.seed)
        poses = perturb_trajectory(poses, params)
    timestamps = [i / args.fps for i in range(len(poses))]
    trajectory = ev.Trajectory.from_poses(poses, timestamps)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    store.write_trajectory(trajectory, args.out)
    print(f"wrote {len(poses)} poses to {args.out}")
    return 0


def cmd_serve(args) -> int:
    trajectory = store.read_trajectory(args.trajectory)
    condition = cap.Condition(args.time_of_day, args.weather)
    config = cap.SessionConfig(endpoint=resolve_endpoint(args.bind), fps=args.fps)
    source = cap.FrameSource(trajectory.poses, condition)
    summary = cap.serve_sequence(source, config)
    print(f"served {summary.frames_sent} frames ({summary.control_changes} condition changes)")
    return 0


def cmd_capture(args) -> int:
    config = cap.SessionConfig(endpoint=resolve_endpoint(args.connect), fps=args.fps, out_dir=args.out)
    result = cap.capture_client(config)
    print(f"persisted {result.persisted} raw frames to {result.raw_dir}")
    return 0


def cmd_postprocess(args) -> int:
    codec = DepthCodecParams(d_max=args.d_max, d_min=args.d_min)
    report = cap.postprocess_frames(args.raw, args.out, codec)
    print(f"processed ok={report.ok} rejected={report.rejected}")
    return 0


def discover_sequences(root: Path) -> list[store.Sequence]:
    root = Path(root)
    manifests = []
    if (root / "frames.jsonl").is_file():
        manifests.append(root / "frames.jsonl")
    manifests.extend(sorted(root.glob("*/frames.jsonl")))
    if not manifests:
        raise ValueError(f"no frames.jsonl manifests under {root}")
    return [store.load_sequence(m) for m in manifests]


def cmd_stats(args) -> int:
    sequences = []
    for entry in args.inputs:
        path = Path(entry)
        if path.is_file():
            sequences.append(store.load_sequence(path))
        else:
            sequences.extend(discover_sequences(path))
    stats = store.stats_table(sequences)
    print(stats.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(stats.to_csv(), encoding="utf-8")
        print(f"wrote {args.csv}")
    return 0


def cmd_build_vpr(args) -> int:
    thresholds = vpr.SelectionThresholds(
        t_l_new=args.tl_new,
        t_a_new=math.radians(args.ta_new),
        t_l_same=args.tl_same,
        t_a_same=math.radians(args.ta_same),
    )
    sequences = discover_sequences(Path(args.input))
    places, associations, summary = vpr.build_vpr_dataset(
        sequences, thresholds, day_sunny_only=not args.all_conditions
    )
    if not places:
        raise ValueError("no places selected; check thresholds and input sequences")
    export = vpr.export_vpr_dataset(associations, args.out)
    print(
        f"places: {summary.place_count}  images: {summary.image_count}  "
        f"mean images/place: {summary.mean_images_per_place:.2f}  dropped: {summary.dropped_frames}"
    )
    print(f"wrote {export.manifest}")
    return 0


def cmd_make_triplets(args) -> int:
    associations = vpr.load_place_manifest(args.input)
    triplets = vpr.sample_triplets(associations, count=args.count, seed=args.seed)
    vpr.write_triplet_manifest(triplets, args.out)
    print(f"wrote {len(triplets)} triplets to {args.out}")
    return 0


def cmd_eval_retrieval(args) -> int:
    queries = ev.load_embeddings(args.queries)
    database = ev.load_embeddings(args.database)
    with open(args.ground_truth, "r", encoding="utf-8") as fh:
        ground_truth = json.load(fh)
    ks = [int(k) for k in args.ks.split(",") if k.strip()]
    recalls = ev.topk_recall(queries, database, ground_truth, ks)
    print(ev.recall_report_text(recalls))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({str(k): v for k, v in sorted(recalls.items())}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {args.json}")
    return 0


def cmd_eval_ate(args) -> int:
    estimated = store.read_trajectory(args.est)
    ground_truth = store.read_trajectory(args.gt)
    report = ev.ate_rmse(estimated, ground_truth)
    print(f"RMSE {report.rmse:.3f}")
    if args.verbose:
        print(report.to_text())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(include_errors=True), fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {args.json}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="navforge",
        description="Synthetic capture, VPR dataset construction and trajectory evaluation.",
    )
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED, help="seed for all randomness")
    parser.add_argument("--verbose", action="store_true", help="more detailed output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a trajectory from waypoints")
    p.add_argument("--out", required=True, help="output trajectory CSV")
    p.add_argument("--waypoints", help="semicolon-separated x,y[,z] markers")
    p.add_argument("--random-waypoints", type=int, default=6, help="number of random markers when --waypoints is absent")
    p.add_argument("--extent", type=float, default=400.0, help="half-size of the random marker area (m)")
    p.add_argument("--spacing", type=float, default=5.0, help="max pose spacing (m)")
    p.add_argument("--sigma-linear", type=float, default=0.0, help="uniform position noise bound (m)")
    p.add_argument("--sigma-angular-deg", type=float, default=0.0, help="uniform yaw noise bound (deg)")
    p.add_argument("--fps", type=float, default=10.0, help="frame rate used for timestamps")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="stream a trajectory as frame messages over TCP")
    p.add_argument("--trajectory", required=True, help="trajectory CSV to serve")
    p.add_argument("--bind", default="127.0.0.1:8040", help="host:port to bind")
    p.add_argument("--fps", type=float, default=10.0)
    p.add_argument("--time-of-day", choices=TIME_OF_DAY_CHOICES, default="day")
    p.add_argument("--weather", choices=WEATHER_CHOICES, default="extrasunny")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("capture", help="receive a session and persist raw frame JSON")
    p.add_argument("--connect", default="127.0.0.1:8040", help="server host:port")
    p.add_argument("--out", required=True, help="session output directory")
    p.add_argument("--fps", type=float, default=10.0, help="expected rate (sizes the receive buffer)")
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("postprocess", help="split raw frames into per-type files")
    p.add_argument("--raw", required=True, help="directory of raw frame JSON files")
    p.add_argument("--out", required=True, help="output sequence directory")
    p.add_argument("--d-max", type=float, default=960.0, help="depth codec range max (m)")
    p.add_argument("--d-min", type=float, default=1.0, help="depth codec range min (m)")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("stats", help="frame-count table over sequences")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="sequence dirs or frames.jsonl files")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("build-vpr", help="select places and associate frames")
    p.add_argument("--in", dest="input", required=True, help="directory of sequence directories")
    p.add_argument("--out", required=True, help="VPR dataset output directory")
    p.add_argument("--tl-new", type=float, default=100.0, help="new-place linear threshold (m)")
    p.add_argument("--ta-new", type=float, default=90.0, help="new-place angular threshold (deg)")
    p.add_argument("--tl-same", type=float, default=10.0, help="same-place linear threshold (m)")
    p.add_argument("--ta-same", type=float, default=20.0, help="same-place angular threshold (deg)")
    p.add_argument("--all-conditions", action="store_true", help="select places from every condition, not only day/extrasunny")
    p.set_defaults(func=cmd_build_vpr)

    p = sub.add_parser("make-triplets", help="sample day/night training triplets")
    p.add_argument("--in", dest="input", required=True, help="places.jsonl manifest")
    p.add_argument("--out", required=True, help="output triplets.jsonl")
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(func=cmd_make_triplets)

    p = sub.add_parser("eval-retrieval", help="top-k recall over embedding files")
    p.add_argument("--queries", required=True, help="query embeddings JSONL")
    p.add_argument("--database", required=True, help="database embeddings JSONL")
    p.add_argument("--ground-truth", required=True, help="JSON map query id -> database id")
    p.add_argument("--ks", default="1,5,10", help="comma-separated k values")
    p.add_argument("--json", help="write recalls as JSON")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-ate", help="Horn-aligned absolute trajectory error")
    p.add_argument("--gt", required=True, help="ground-truth trajectory CSV")
    p.add_argument("--est", required=True, help="estimated trajectory CSV")
    p.add_argument("--json", help="write the full report as JSON")
    p.set_defaults(func=cmd_eval_ate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, cap.CaptureError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
