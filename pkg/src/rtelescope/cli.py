"""Command-line entry point: ``rtelescope {run, grid-search, export-dataset}``."""

from __future__ import annotations

import argparse
import sys

from .experiment import (
    PROBLEMS,
    ConfigError,
    grid_search_reference_rate,
    load_config,
    run_experiment,
)
from .problems.lotka_volterra import LotkaVolterraVIProblem


def _parser():
    parser = argparse.ArgumentParser(prog="rtelescope",
                                     description="Randomized telescope experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment grid and write CSVs")
    run.add_argument("--config", help="flat key = value config file")
    run.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config key (repeatable)")
    run.add_argument("--output-dir", help="directory for CSVs (overrides output_dir)")
    run.add_argument("--grid-search", action="store_true",
                     help="pick reference_rate by grid search before running")
    run.add_argument("--quiet", action="store_true")

    grid = sub.add_parser("grid-search", help="grid-search the reference learning rate")
    grid.add_argument("--problem", required=True, choices=PROBLEMS)
    grid.add_argument("--config")
    grid.add_argument("--set", dest="overrides", action="append", default=[],
                      metavar="KEY=VALUE")

    export = sub.add_parser("export-dataset", help="write a generated dataset as text")
    export.add_argument("--problem", required=True, choices=("lotka_volterra",))
    export.add_argument("--seed", type=int, required=True)
    export.add_argument("--output", help="file to write (default: stdout)")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config, args.overrides)
            rate = None
            if args.grid_search:
                rate, _ = grid_search_reference_rate(cfg)
                print(f"reference_rate {rate!r}")

            def progress(est, seed, trace):
                if not args.quiet:
                    last = trace[-1]
                    print(f"{est} seed={seed} budget={last.budget_spent:g} "
                          f"final_loss={last.eval_loss:.6g}", flush=True)

            paths = run_experiment(cfg, args.output_dir, rate, progress)
            print(f"wrote {len(paths)} files")
        elif args.command == "grid-search":
            cfg = load_config(args.config, [f"problem={args.problem}"] + args.overrides)
            best, results = grid_search_reference_rate(cfg)
            for rate, loss in sorted(results.items()):
                print(f"{rate!r},{loss!r}")
            print(f"best {best!r}")
        else:
            text = LotkaVolterraVIProblem(seed=args.seed).export_dataset()
            if args.output:
                with open(args.output, "w", encoding="utf-8") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
    except (ConfigError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
