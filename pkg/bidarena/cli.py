"""Command line: ``bidarena run | aggregate | plot | verify``."""

from __future__ import annotations
from typing import Sequence

import argparse
import logging
import sys

from .config import output_root
from .harness import (
    MetricsFormatError,
    ScenarioError,
    Summary,
    aggregate,
    emit_plots,
    load_scenario,
    preset_names,
    resume_run,
    run_scenario,
    verify_appendix,
    write_default_instances,
)

logger = logging.getLogger(__name__)


def _store(url: str | None):
    if url is None:
        return None
    from .sqlalchemy import SQLAlchemyCheckpointStore

    return SQLAlchemyCheckpointStore(url)


def _run(args: argparse.Namespace) -> int:
    store = _store(args.store_url)
    try:
        if args.resume:
            if args.out is None:
                raise ScenarioError("--resume needs --out pointing at an existing run")
            print(resume_run(args.out, args.episodes or 1, store=store))
            return 0
        if args.scenario is None:
            raise ScenarioError("--scenario is required unless --resume is given")
        scenario = load_scenario(args.scenario, episodes=args.episodes, seed=args.seed)
        out = args.out if args.out is not None else output_root() / scenario.run_id
        print(run_scenario(scenario, out, store=store))
        return 0
    finally:
        if store is not None:
            store.close()


def _aggregate(args: argparse.Namespace) -> int:
    summary = aggregate(args.inputs, smoothing=args.smooth)
    print(summary.write(args.out))
    return 0


def _plot(args: argparse.Namespace) -> int:
    for path in emit_plots(Summary.load(args.input), args.out):
        print(path)
    return 0


def _verify(args: argparse.Namespace) -> int:
    if args.write_defaults is not None:
        for path in write_default_instances(args.write_defaults):
            print(path)
        return 0
    report = verify_appendix(args.instances, trials=args.trials, seed=args.seed)
    print(report.format())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bidarena",
        description="Self-play bidding agents in repeated auctions",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "Examples:\n"
            "  bidarena run --scenario smoke --seed 1 --out runs/smoke\n"
            "  bidarena aggregate --in runs/a runs/b --out summary.json\n"
            "  bidarena plot --in summary.json --out figures\n"
            "  bidarena verify --trials 200 --seed 0\n"
        ),
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging threshold (default INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument(
        "--scenario",
        help=f"preset ({', '.join(preset_names())}) or a TOML file",
    )
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--episodes", type=int, help="number of episodes to play")
    run.add_argument("--out", help="run directory (default: output root / run id)")
    run.add_argument("--resume", action="store_true", help="continue the run in --out")
    run.add_argument("--store-url", help="SQLAlchemy URL for checkpoints instead of SQLite")
    run.set_defaults(func=_run)

    agg = sub.add_parser("aggregate", help="summarize run directories")
    agg.add_argument("--in", dest="inputs", nargs="+", required=True, help="run directories")
    agg.add_argument("--out", required=True, help="summary JSON file")
    agg.add_argument("--smooth", type=int, default=10, help="moving-average window")
    agg.set_defaults(func=_aggregate)

    plot = sub.add_parser("plot", help="draw figures from a summary")
    plot.add_argument("--in", dest="input", required=True, help="summary JSON file")
    plot.add_argument("--out", required=True, help="figure directory")
    plot.set_defaults(func=_plot)

    verify = sub.add_parser("verify", help="run the equilibrium checks")
    verify.add_argument("--instances", help="directory of JSON instances (default: bundled)")
    verify.add_argument("--trials", type=int, default=200)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--write-defaults", metavar="DIR", help="write bundled instances and exit")
    verify.set_defaults(func=_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ScenarioError, MetricsFormatError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
