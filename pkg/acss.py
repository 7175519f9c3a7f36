"""Command line entry point: run experiment sweeps and validity checks.

    python acss.py run --config configs/behrens_fisher.json --reps 100 --out bf.csv
    python acss.py validate --suite quick
"""

import argparse
import logging
import sys
from logging.handlers import RotatingFileHandler

from pydantic import ValidationError

from errors import ConfigError
from experiments import (
    ExperimentConfig,
    check_super_uniformity,
    emit,
    load_config,
    run_experiment,
    summarize,
)

logger = logging.getLogger(__name__)

SUITES = {"validity": 2000, "quick": 200}


def setup_logging(log_file="acss.log", verbose=False):
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    console_handler = logging.StreamHandler()
    file_handler = RotatingFileHandler(log_file, maxBytes=1024 * 1024, backupCount=3)
    console_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    file_handler.setLevel(logging.DEBUG)
    formatter = logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    console_handler.setFormatter(formatter)
    file_handler.setFormatter(formatter)
    root.addHandler(console_handler)
    root.addHandler(file_handler)


def build_parser():
    parser = argparse.ArgumentParser(prog="acss", description="Approximate co-sufficient sampling experiments")
    parser.add_argument("--log-file", default="acss.log")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment sweep from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--reps", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--format", choices=["csv", "json", "svg-lines", "xlsx"])
    run.add_argument("--threads", type=int)

    validate = sub.add_parser("validate", help="check super-uniformity of exactly exchangeable p-values")
    validate.add_argument("--suite", choices=sorted(SUITES), default="validity")
    validate.add_argument("--reps", type=int)
    validate.add_argument("--seed", type=int)
    validate.add_argument("--threads", type=int, default=1)
    return parser


def _overrides(args, **names):
    return {field: getattr(args, flag) for flag, field in names.items() if getattr(args, flag, None) is not None}


def cmd_run(args) -> int:
    config = load_config(args.config)
    update = _overrides(args, reps="replications", seed="master_seed", out="output", format="format", threads="threads")
    if update:
        config = ExperimentConfig.model_validate({**config.model_dump(), **update})
    rows = run_experiment(config)
    suffix = "svg" if config.format == "svg-lines" else config.format
    out = config.output or f"{config.experiment}.{suffix}"
    emit(rows, config.format, out, alpha=config.alpha)
    if rows:
        print(summarize(rows, config.alpha).to_string(index=False))
    errors = sum(1 for r in rows if r.error)
    if errors:
        logger.warning(f"{errors} rows failed; see {args.log_file}")
        return 2
    return 0


def cmd_validate(args) -> int:
    update = _overrides(args, seed="master_seed")
    config = ExperimentConfig(
        experiment="validity-suite",
        replications=args.reps if args.reps is not None else SUITES[args.suite],
        threads=args.threads,
        **update,
    )
    rows = run_experiment(config)
    table = check_super_uniformity(rows, config.alphas)
    print(table.to_string(index=False))
    if not table["passed"].all():
        logger.warning("super-uniformity check failed")
        return 2
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_file, args.verbose)
    logger.info(f"acss {args.command} started")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_validate(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"Error: {e}")
        return 1
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        print(f"Error: {e}")
        return 1


if __name__ == "__main__":
    try:
        sys.exit(main())
    except Exception as e:
        logger.critical(f"Application failed: {str(e)}", exc_info=True)
        print(f"Error: {str(e)}")
        sys.exit(1)
