"""Command-line entry point: stage subcommands plus run-all."""

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, SeroError
from .pipeline import STAGES, PipelineStageError, load_config, run_pipeline, run_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sero",
        description="Bayesian seroprevalence estimation: ingest data, fit the "
                    "component models, predict per-country trends, and aggregate "
                    "world seroprevalence.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run-all",):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "run-all" else "run every stage in order")
        p.add_argument("--config", required=True, metavar="PATH", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override mcmc.seed")
        p.add_argument("--out", default=None, metavar="DIR", help="override output.dir")
        p.add_argument("--stride", type=int, default=None, metavar="D", help="prediction grid stride in days")
        p.add_argument("--allow-monotonic-repair", action="store_true",
                       help="clamp decreasing cumulative series to their running maximum instead of failing")
        p.add_argument("--joint", action="store_true",
                       help="draw vaccine seroprevalence fresh inside the infection sweep "
                            "instead of from a pre-materialized bank")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = Path(args.out)
        if args.stride is not None:
            cfg.stride = args.stride
        if args.allow_monotonic_repair:
            cfg.allow_monotonic_repair = True
        if args.joint:
            cfg.joint = True
        if args.command == "run-all":
            run_pipeline(cfg)
        else:
            run_stage(cfg, args.command)
    except ConfigError as exc:
        print(f"sero: config error: {exc}", file=sys.stderr)
        return 2
    except PipelineStageError as exc:
        print(f"sero: {exc}", file=sys.stderr)
        return 1
    except SeroError as exc:
        print(f"sero: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
