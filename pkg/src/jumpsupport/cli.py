"""Command-line entry point: ``run``, ``list`` and ``validate``."""

from __future__ import annotations

import argparse
import sys

from .errors import AcceptanceRateError, ConfigurationError, ModelError, NumericError
from .runner import run_scenario
from .scenario import list_scenarios, load_scenario, validate_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jumpsupport",
                                     description="Monte Carlo experiments for jump-diffusion SDEs.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its report")
    run.add_argument("config", help="scenario JSON file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--paths", type=int, help="override execution.n_paths")
    run.add_argument("--dt", type=float, help="override execution.dt")
    run.add_argument("--seed", type=int, help="override execution.seed")
    run.add_argument("--threads", type=int, help="worker threads (never changes results)")

    sub.add_parser("list", help="list bundled scenarios")

    val = sub.add_parser("validate", help="parse and check a scenario without simulating")
    val.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list":
            rows = list_scenarios()
            width = max(len(r["file"]) for r in rows)
            for r in rows:
                print(f"{r['file']:<{width}}  {r['exercises']:<26}  {r['description']}")
            return 0
        if args.command == "validate":
            scen = load_scenario(args.config)
            for note in validate_scenario(scen):
                print(note)
            print(f"{scen.name}: ok")
            return 0
        overrides = {"n_paths": args.paths, "dt": args.dt, "seed": args.seed, "threads": args.threads}
        scen = load_scenario(args.config, overrides)
        report = run_scenario(scen, args.out)
        print(report.summary())
        return 0 if report.passed else 1
    except AcceptanceRateError as exc:
        print(f"error: {exc}\ndiagnostics: {exc.diagnostics}", file=sys.stderr)
        return 2
    except (ConfigurationError, ModelError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
