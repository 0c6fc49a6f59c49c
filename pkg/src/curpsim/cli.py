"""Command line: ``curpsim run | assoc | check | fuzz``.

Every command exits 0 only if its embedded assertions hold.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from curpsim.checker import check_trace_file
from curpsim.harness import Scenario, random_fault_scenario, run_associativity_experiment, run_scenario

DIRECT_MAPPED_BAND = (68.0, 92.0)  # 80 +- 15% for a direct-mapped 4096-slot table


def _run(args: argparse.Namespace) -> int:
    try:
        scenario = Scenario.load(args.scenario)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"invalid scenario {args.scenario}: {exc}", file=sys.stderr)
        return 2
    report, cluster = run_scenario(scenario)
    text = json.dumps(report.to_json(), indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        out.with_suffix(".csv").write_text(report.histogram_csv())
    else:
        print(text)
    if args.trace:
        with open(args.trace, "w") as fp:
            cluster.trace.dump(fp)
    for failure in report.failures:
        print(f"FAIL: {failure}", file=sys.stderr)
    return 0 if report.ok else 1


def _assoc(args: argparse.Namespace) -> int:
    try:
        means = run_associativity_experiment(args.slots, tuple(args.ways), args.trials, args.seed)
    except ValueError as exc:
        print(f"invalid geometry: {exc}", file=sys.stderr)
        return 2
    print("ways,sets,mean_records_before_rejection")
    for w, mean in means.items():
        print(f"{w},{args.slots // w},{mean:.2f}")
    ok = True
    ordered = [means[w] for w in sorted(means)]
    if any(a >= b for a, b in zip(ordered, ordered[1:])):
        print("FAIL: means do not increase with associativity", file=sys.stderr)
        ok = False
    if args.slots == 4096 and 1 in means and not DIRECT_MAPPED_BAND[0] <= means[1] <= DIRECT_MAPPED_BAND[1]:
        print(f"FAIL: direct-mapped mean {means[1]:.2f} outside {DIRECT_MAPPED_BAND}", file=sys.stderr)
        ok = False
    return 0 if ok else 1


def _check(args: argparse.Namespace) -> int:
    try:
        result = check_trace_file(args.trace, budget=args.budget)
    except (OSError, ValueError, KeyError) as exc:
        print(f"unreadable trace {args.trace}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result.to_json(), indent=2))
    return 0 if result.ok else 1


def _fuzz(args: argparse.Namespace) -> int:
    bad = 0
    for seed in range(args.start, args.start + args.runs):
        report, _ = run_scenario(random_fault_scenario(seed))
        if not report.ok or not report.final_state_checked:
            bad += 1
            print(f"seed {seed}: {report.failures or ['final state unavailable']}")
    print(f"{args.runs - bad}/{args.runs} scenarios passed")
    return 0 if bad == 0 else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="curpsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario file and write a metrics report")
    p.add_argument("scenario")
    p.add_argument("--out", help="report path; the CSV histogram goes next to it")
    p.add_argument("--trace", help="also write the trace as JSON lines")
    p.set_defaults(func=_run)

    p = sub.add_parser("assoc", help="records accepted before the first witness rejection")
    p.add_argument("--slots", type=int, default=4096)
    p.add_argument("--ways", type=int, nargs="+", default=[1, 2, 4, 8])
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_assoc)

    p = sub.add_parser("check", help="check a JSON-lines trace for linearizability")
    p.add_argument("trace")
    p.add_argument("--budget", type=int, default=2_000_000)
    p.set_defaults(func=_check)

    p = sub.add_parser("fuzz", help="run seeded random fault scenarios")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--start", type=int, default=0)
    p.set_defaults(func=_fuzz)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
