"""Command-line front end: run one scenario, sweep drop rates, or recompute
metrics from a saved trace."""

from __future__ import annotations

import argparse
import json
import sys

from .harness import (
    ScenarioError,
    bandwidth_moving_average,
    load_scenario,
    max_bandwidth_ratio,
    neighbor_ratio_by_state,
    read_trace,
    run_scenario,
    sweep_droprate,
    sweep_table,
    write_sweep_csv,
)


def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    result = run_scenario(scenario, out_dir=args.out, seed=args.seed)
    s = result.summary
    print(f"{scenario.name}: {'completed' if s.completed else 'incomplete'} "
          f"after {s.total_steps} steps "
          f"({s.total_steps * scenario.step_period:.1f} s simulated)")
    for rid in sorted(s.join_times):
        t = s.join_times[rid]
        print(f"  robot {rid}: joined at "
              f"{'never' if t is None else f'{t:.1f} s'}")
    print(f"  max 30-sample bandwidth ratio: {s.max_bandwidth_ratio:.3f}")
    if result.trace_path is not None:
        print(f"  trace:   {result.trace_path}")
        print(f"  summary: {result.summary_path}")
    return 0 if s.completed else 2


def _cmd_sweep(args) -> int:
    scenario = load_scenario(args.scenario)
    rates = [float(r) for r in args.rates.split(",") if r]
    seeds = [scenario.seed + i for i in range(args.seeds)]
    rows = sweep_droprate(scenario, rates, seeds, workers=args.jobs)
    table = sweep_table(rows)
    print(f"{'rate':>6} {'runs':>5} {'completed':>10} {'median_s':>9}")
    for rate, agg in table.items():
        med = agg["median_seconds"]
        print(f"{rate:>6.2f} {agg['runs']:>5} {agg['completion_ratio']:>10.2f} "
              f"{'-' if med is None else f'{med:>9.1f}'}")
    if args.out is not None:
        from pathlib import Path
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{scenario.name}_sweep.csv"
        write_sweep_csv(rows, path)
        print(f"table: {path}")
    return 0 if all(r.completed for r in rows) else 2


def _cmd_metrics(args) -> int:
    trace = read_trace(args.trace)
    robots = sorted({row[1] for row in trace})
    series = bandwidth_moving_average(trace, args.window)
    report = {
        "robots": len(robots),
        "steps": max(row[0] for row in trace) + 1 if trace else 0,
        "neighbor_ratio_by_state": (
            neighbor_ratio_by_state(trace, len(robots)) if len(robots) >= 2 else {}),
        "max_bandwidth_ratio": max_bandwidth_ratio(trace, args.window),
        "per_robot_max_ratio": {str(r): float(series[r].max()) for r in robots},
    }
    json.dump(report, sys.stdout, indent=2)
    print()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stigsim",
        description="Swarm coordination runtime and lossy-broadcast simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario to completion")
    p_run.add_argument("scenario", help="path to a scenario JSON file")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    p_run.add_argument("--out", default=None,
                       help="directory for trace.csv and summary.json")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a drop-rate sweep")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("--rates", required=True,
                         help="comma-separated drop rates, e.g. 0,0.25,0.5")
    p_sweep.add_argument("--seeds", type=int, required=True,
                         help="number of seeds per rate (scenario seed + i)")
    p_sweep.add_argument("--out", default=None, help="directory for the sweep table")
    p_sweep.add_argument("--jobs", type=int, default=1,
                         help="parallel worker processes")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_metrics = sub.add_parser("metrics", help="recompute metrics from a trace")
    p_metrics.add_argument("trace", help="path to a trace CSV file")
    p_metrics.add_argument("--window", type=int, default=30,
                           help="moving-average window in steps")
    p_metrics.set_defaults(func=_cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
