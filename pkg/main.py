import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from config import DEFAULT_THREADS, LOG_LEVEL
from modules.harness.experiment import SWEEP_AXES, run_experiment, run_meta_training, sweep
from modules.harness.experiment_config import ExperimentConfig, load_config
from modules.harness.report import report
from modules.metacv.errors import ConfigError, NumericalAbort

logger = logging.getLogger("main")

# коды выхода
EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ABORT = 2
EXIT_PARTIAL = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides experiment.seed)")
    common.add_argument("--out", default=None, help="output root (overrides experiment.output_dir)")
    common.add_argument("--estimators", default=None, help="comma-separated subset of mc,ncv,cf,mcv")
    common.add_argument("--threads", type=int, default=DEFAULT_THREADS, help="worker threads for test tasks")
    common.add_argument("--log-level", default=LOG_LEVEL, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="no progress bars, warnings and errors only")
    common.add_argument("--dump-tasks", action="store_true", help="write train/test task bundles to the run directory")

    parser = argparse.ArgumentParser(prog="metacv", description="Meta-learned Stein control variates: experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", parents=[common], help="meta-train and write a checkpoint")
    p.add_argument("config")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate estimators using a meta-trained checkpoint")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("run", parents=[common], help="meta-train, then evaluate")
    p.add_argument("config")

    p = sub.add_parser("sweep", parents=[common], help="run once per value of one axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated integers, e.g. 1,3,5")

    p = sub.add_parser("report", parents=[common], help="summarize run or sweep directories")
    p.add_argument("dirs", nargs="+")
    return parser


def _parse_list(raw: Optional[str], what: str) -> Optional[List[str]]:
    if raw is None:
        return None
    items = [part.strip() for part in raw.split(",") if part.strip()]
    if not items:
        raise ConfigError(f"empty {what} list", what)
    return items


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.override("experiment", seed=args.seed)
    if args.out is not None:
        config = config.override("experiment", output_dir=args.out)
    estimators = _parse_list(args.estimators, "estimators")
    if estimators is not None:
        config = replace(config, estimators=tuple(estimators))
    return config


def run(args) -> int:
    progress = not args.quiet
    if args.command == "report":
        report(args.dirs, out_dir=args.out)
        return EXIT_OK

    config = _resolve_config(args)
    if args.command == "meta-train":
        trained = run_meta_training(config, progress=progress, dump_tasks=args.dump_tasks)
        logger.info("Meta-parameter checkpoint: %s", trained.checkpoint)
        return EXIT_OK

    if args.command == "sweep":
        try:
            values = [int(v) for v in _parse_list(args.values, "values")]
        except ValueError as e:
            raise ConfigError(f"sweep values must be integers: {e}", "values") from e
        results = sweep(config, args.axis, values, threads=args.threads, progress=progress)
        partial = any(result.partial for result in results.values())
    else:
        result = run_experiment(
            config,
            threads=args.threads,
            checkpoint=args.checkpoint if args.command == "evaluate" else None,
            progress=progress,
            dump_tasks=args.dump_tasks,
        )
        partial = result.partial
    if partial:
        logger.warning("Some estimators failed on some tasks, see status column in per_task.csv")
        return EXIT_PARTIAL
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else getattr(logging, args.log_level),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ConfigError as e:
        logger.error("Config error: %s", e)
        return EXIT_CONFIG
    except NumericalAbort as e:
        logger.error("Numerical abort: %s", e)
        return EXIT_ABORT
    except (FileNotFoundError, ValueError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG


if __name__ == '__main__':
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print('Прервано')
        sys.exit(130)
