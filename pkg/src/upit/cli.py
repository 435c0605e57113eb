"""Command-line entry point: ``python3 -m upit --config cfg.json --out run/ --stage all``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .checkpoint import CheckpointError
from .pipeline import STAGES, PipelineConfig, PipelineError, run_pipeline, run_stage

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="upit", description="Run stages of the expert upcycling pipeline.")
    p.add_argument("--config", help="JSON pipeline config (defaults are used for missing fields)")
    p.add_argument("--out", required=True, help="output directory for artifacts and stage records")
    p.add_argument("--seed", type=int, help="override the config's top-level seed")
    p.add_argument("--stage", default="all", choices=("all",) + STAGES)
    return p


def configure_logging() -> None:
    level = os.environ.get("UPIT_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise SystemExit(f"UPIT_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            config = config.with_seed(args.seed)
        if args.stage == "all":
            records = run_pipeline(config, args.out)
        else:
            records = [run_stage(config, args.stage, args.out)]
    except (PipelineError, CheckpointError, ValueError, OSError) as exc:
        logging.getLogger("upit").error("%s", exc)
        return 1
    for r in records:
        print(json.dumps({"stage": r.stage, "status": r.status, "outputs": len(r.outputs), "wall_time": round(r.wall_time, 3)}))
    return 0
