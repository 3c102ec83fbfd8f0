"""Command-line entry point: ``emednext {preprocess,infer,postprocess,evaluate,pipeline}``."""

from __future__ import annotations

import argparse
import logging
import os
import random
import sys

import numpy as np

from . import pipeline
from .pipeline import EXIT_CONFIG, ConfigError, PipelineConfig

COMMANDS = {
    "preprocess": pipeline.cmd_preprocess,
    "infer": pipeline.cmd_infer,
    "postprocess": pipeline.cmd_postprocess,
    "evaluate": pipeline.cmd_evaluate,
    "pipeline": pipeline.cmd_pipeline,
}


def _default_workers() -> int | None:
    env = os.environ.get("EMEDNEXT_WORKERS")
    return int(env) if env else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emednext", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--input-dir")
        p.add_argument("--work-dir")
        p.add_argument("--output-dir")
        p.add_argument("--model", action="append", dest="models", help="model directory (repeatable)")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: $EMEDNEXT_WORKERS or the config value)")
        p.add_argument("--seed", type=int)
        for c in ("tc", "wt", "et"):
            p.add_argument(f"--tau-{c}", type=float)
            p.add_argument(f"--gamma-{c}", type=int)
            p.add_argument(f"--eta-{c}", type=float)
        p.add_argument("--max-components", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> PipelineConfig:
    if args.config:
        cfg = PipelineConfig.load(args.config)
    else:
        if not (args.input_dir and args.work_dir and args.output_dir):
            raise ConfigError("give --config or all of --input-dir, --work-dir and --output-dir")
        cfg = PipelineConfig(args.input_dir, args.work_dir, args.output_dir)
    post = {
        f"{k}_{c}": getattr(args, f"{k}_{c}")
        for k in ("tau", "gamma", "eta")
        for c in ("tc", "wt", "et")
    }
    post["max_components"] = args.max_components
    workers = args.workers if args.workers is not None else _default_workers()
    return pipeline.with_overrides(
        cfg,
        input_dir=args.input_dir,
        work_dir=args.work_dir,
        output_dir=args.output_dir,
        models=tuple(args.models) if args.models else None,
        workers=workers,
        seed=args.seed,
        postprocess=post,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        random.seed(cfg.seed)
        np.random.seed(cfg.seed)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        logging.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
