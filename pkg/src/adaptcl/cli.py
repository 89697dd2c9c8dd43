"""Command line entry point: ``adaptcl run|ablate|summarize``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ExperimentConfig
from .errors import AdaptclError, ConfigValidationError, NumericError
from .runner import RunRecord, compare_ablation, emit_summary, run_experiment

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_NUMERIC = 0, 1, 2, 3


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptcl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for task progress, -vv for epochs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run one experiment"), ("ablate", "run the four-way co-training ablation")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seeds", type=_seeds, help="override seeds, e.g. 0,1,2")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--workers", type=int, help="parallel seed workers")
    p = sub.add_parser("summarize", help="tabulate finished runs")
    p.add_argument("dirs", nargs="+", help="run directories containing run.json")
    p.add_argument("--out", default=".", help="where to write summary.csv and curves/")
    p.add_argument("--protocol", choices=("task_il", "class_il"), default="task_il")
    return parser


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    if args.seeds:
        config = config.replace(seeds=args.seeds)
    if args.out:
        config = config.replace(output_dir=args.out)
    return config.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.verbose == 1:
        logging.getLogger("adaptcl.trainer").setLevel(logging.WARNING)
    try:
        if args.command == "summarize":
            records = [RunRecord.load(d) for d in args.dirs]
            paths = emit_summary(records, args.out, args.protocol)
            print(paths["summary"])
            return EXIT_OK
        config = _load_config(args)
        if args.command == "run":
            records = [run_experiment(config, workers=args.workers)]
        else:
            records = list(compare_ablation(config, workers=args.workers).values())
    except ConfigValidationError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AdaptclError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for rec in records:
        if rec.failed:
            bad = [s.seed for s in rec.seeds if s.status != "ok"]
            print(f"{rec.label}: FAILED seeds {bad} ({rec.directory})", file=sys.stderr)
        else:
            mean, std = rec.a_curve()
            print(f"{rec.label}: final A_T {mean[-1]:.4f} +/- {std[-1]:.4f} ({rec.directory})")
    return EXIT_NUMERIC if any(r.failed for r in records) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
