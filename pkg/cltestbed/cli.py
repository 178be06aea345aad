"""
Command-line front end.

    cltestbed run <config> [--seed N] [--workers N] [--out DIR]
    cltestbed verify [--seed N] [--seeds R] [--out DIR] [--sabotage-offdiag] [--grid FILE]
    cltestbed inspect <run-record.json>
    cltestbed grid <config> <strategy> [--grid FILE] [--out DIR]

Exit codes: 0 success, 1 run or check failure, 2 invalid configuration.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from rich.console import Console
from rich.table import Table

from . import settings
from .exceptions import CLTestbedError, ConfigError
from .harness import ExperimentConfig, VerifyReport, grid_search, inspect_record, run_config, verify_theory
from .logging_setup import configure_logging
from .serialization import write_json

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cltestbed", description="Loss-matrix continual-learning testbed")
    parser.add_argument("--log-level", default=None, help="Overrides CLTESTBED_LOG_LEVEL")
    verbs = parser.add_subparsers(dest="verb", required=True)

    run = verbs.add_parser("run", help="Run an experiment config")
    run.add_argument("config", type=Path)
    run.add_argument("--seed", type=int, default=None, help="Base seed (overrides the config)")
    run.add_argument("--workers", type=int, default=None, help="Parallel runs (overrides the config)")
    run.add_argument("--out", type=Path, default=None, help="Output directory (overrides the config)")

    verify = verbs.add_parser("verify", help="Run the theory checks")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--seeds", type=int, default=5, help="Repeats for the multi-seed checks")
    verify.add_argument("--out", type=Path, default=None, help="Write verify.json here")
    verify.add_argument("--sabotage-offdiag", action="store_true",
                        help="Skip off-diagonal evaluation (the implication check must fail)")
    verify.add_argument("--grid", type=Path, default=settings.HYPERPARAMS_GRID, help="Grid holding EWC's lambda values")

    inspect = verbs.add_parser("inspect", help="Print a run record's timeline")
    inspect.add_argument("record", type=Path)

    grid = verbs.add_parser("grid", help="Grid-search a strategy's regularization strength")
    grid.add_argument("config", type=Path)
    grid.add_argument("strategy")
    grid.add_argument("--grid", type=Path, default=settings.HYPERPARAMS_GRID)
    grid.add_argument("--out", type=Path, default=None, help="Write grid_<strategy>.json here")
    return parser


def render_report(report: VerifyReport, console: Console) -> None:
    table = Table(title="Theory checks")
    table.add_column("check")
    table.add_column("result")
    table.add_column("tolerance")
    table.add_column("measured")
    for check in report.checks:
        result = "[yellow]skipped[/yellow]" if check.skipped else ("[green]pass[/green]" if check.passed else "[red]FAIL[/red]")
        measured = ", ".join(f"{k}={v}" for k, v in check.to_dict()["measured"].items()) or check.detail
        table.add_row(check.name, result, check.tolerance, measured)
    console.print(table)


def _run(args) -> int:
    return run_config(args.config, seed=args.seed, workers=args.workers, out=args.out)


def _verify(args) -> int:
    report = verify_theory(seeds=args.seeds, base_seed=args.seed, skip_offdiag=args.sabotage_offdiag,
                           grid_path=args.grid)
    render_report(report, Console())
    if args.out is not None:
        write_json(args.out / "verify.json", report.to_dict())
    if not report.passed:
        logger.error(f"Failed checks: {', '.join(report.failures)}")
        return 1
    return 0


def _inspect(args) -> int:
    if not args.record.exists():
        raise ConfigError(f"Run record not found: {args.record}")
    print(inspect_record(args.record))
    return 0


def _grid(args) -> int:
    result = grid_search(ExperimentConfig.load(args.config), args.strategy, args.grid)
    logger.info(f"Chosen {result.parameter} for {result.strategy}: {result.chosen}")
    if args.out is not None:
        write_json(args.out / f"grid_{result.strategy}.json", result.to_dict())
    return 0


VERBS = {"run": _run, "verify": _verify, "inspect": _inspect, "grid": _grid}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return VERBS[args.verb](args)
    except ConfigError as exc:
        logger.error(f"Invalid configuration: {exc}")
        return 2
    except CLTestbedError as exc:
        logger.error(f"{args.verb} failed: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
