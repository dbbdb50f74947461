"""Command-line runner: simulate scenarios, train probe models, compare runs."""

import argparse
import glob
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Tuple

from . import engine, probe, scenario
from .engine import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COVERAGE = 3

TABLE_COLUMNS = ["Attack Method", "TTFT (↑)", "TTFT P99 (↑)", "TPOT (↑)",
                 "TPOT P99 (↑)", "Preempt#", "Attack Request# (↓)",
                 "Cost ($) (↓)"]


def _run_point(args: Tuple[str, Dict[str, Any], Optional[int], str]) -> str:
    point_name, tree, seed_override, out_dir = args
    config = scenario.build_sim_config(tree, seed_override)
    report = engine.run(config)
    point_dir = os.path.join(out_dir, point_name)
    engine.write_run_outputs(report, point_dir)
    resolved = scenario.config_to_tree(config, point_name)
    with open(os.path.join(point_dir, "resolved_config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return point_dir


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        scn = scenario.load_scenario(args.config)
        points = scn.points()
        # validate every point up front so config errors fail fast
        jobs = []
        for point_name, tree in points:
            scenario.build_sim_config(tree, args.seed)
            jobs.append((point_name, tree, args.seed,
                         os.path.join(args.out, scn.name)))
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    workers = min(len(jobs), int(os.environ.get("KVSIM_THREADS",
                                                os.cpu_count() or 1)))
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for point_dir in pool.map(_run_point, jobs):
                    print(point_dir)
        else:
            for job in jobs:
                print(_run_point(job))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_probe_train(args: argparse.Namespace) -> int:
    paths = sorted(glob.glob(os.path.join(args.traces, "**", "probe_windows.csv"),
                             recursive=True))
    if os.path.isfile(args.traces):
        paths = [args.traces]
    if not paths:
        print(f"error: no probe_windows.csv under {args.traces}",
              file=sys.stderr)
        return EXIT_CONFIG
    samples: List[probe.LabeledSample] = []
    try:
        for path in paths:
            samples.extend(probe.read_samples_csv(path))
    except (probe.ProbeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    hyper = probe.Hyper(n_trees=args.n_trees, max_depth=args.max_depth,
                        learning_rate=args.learning_rate)
    try:
        result = probe.train(samples, hyper, n_bins=args.bins, seed=args.seed)
    except probe.InsufficientCoverage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COVERAGE
    result.model.save(args.out)
    print(f"samples: {len(samples)}")
    print(f"holdout accuracy: {result.holdout_accuracy:.4f}")
    print("confusion (rows=true bin, cols=predicted):")
    for row in result.confusion:
        print("  " + " ".join(f"{v:5d}" for v in row))
    print(f"model written to {args.out}")
    return EXIT_OK


def _load_aggregate(run_dir: str) -> Dict[str, Any]:
    path = os.path.join(run_dir, "report.json")
    with open(path) as fh:
        return json.load(fh)["aggregate"]


def _fmt_row(name: str, agg: Dict[str, Any],
             base: Optional[Dict[str, Any]]) -> List[str]:
    benign = agg["per_class"]["benign"]

    def sec(v: Optional[float]) -> str:
        return "---" if v is None else f"{v / 1e6:.3f}"

    def ms(v: Optional[float]) -> str:
        return "---" if v is None else f"{v / 1e3:.2f}"

    cost = agg.get("attacker_cost_usd")
    row = [name, sec(benign["ttft_mean_us"]), sec(benign["ttft_p99_us"]),
           ms(benign["tpot_mean_us"]), ms(benign["tpot_p99_us"]),
           str(agg["preemptions_total"]), str(agg["attack_requests"]),
           "---" if cost is None else f"{cost:.4f}"]
    if base is not None:
        base_benign = base["per_class"]["benign"]
        for key in ("ttft_mean_us", "tpot_mean_us"):
            ours, theirs = benign.get(key), base_benign.get(key)
            if ours is None or theirs is None or theirs == 0:
                row.append("---")
            else:
                row.append(f"{ours / theirs:.1f}x")
    return row


def cmd_report(args: argparse.Namespace) -> int:
    base = None
    try:
        if args.baseline:
            base = _load_aggregate(args.baseline)
        rows = []
        for run_dir in args.run_dirs:
            rows.append(_fmt_row(os.path.basename(os.path.normpath(run_dir)),
                                 _load_aggregate(run_dir), base))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: missing or malformed report: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    header = list(TABLE_COLUMNS)
    if base is not None:
        header += ["ΔTTFT", "ΔTPOT"]
    widths = [max(len(header[i]), max((len(r[i]) for r in rows), default=0))
              for i in range(len(header))]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvsim",
        description="Deterministic continuous-batching serving-node simulator "
                    "with an adversarial fill-and-squeeze client stack.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario (and its sweep)")
    sim.add_argument("--config", required=True, help="scenario .toml/.json")
    sim.add_argument("--seed", type=int, default=None, help="seed override")
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=cmd_simulate)

    train = sub.add_parser("probe-train", help="train the KV-usage estimator")
    train.add_argument("--traces", required=True,
                       help="directory of probe_windows.csv files (or one file)")
    train.add_argument("--bins", type=int, default=10)
    train.add_argument("--out", required=True, help="model JSON path")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--n-trees", type=int, default=30)
    train.add_argument("--max-depth", type=int, default=3)
    train.add_argument("--learning-rate", type=float, default=0.2)
    train.set_defaults(func=cmd_probe_train)

    rep = sub.add_parser("report", help="compare run reports")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--baseline", default=None)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
