"""Command-line entry point.

Subcommands mirror the pipeline stages plus sweep and compare. Exit codes:
0 ok, 1 usage error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import sys

from .config import ExperimentConfig, UsageError, parse_config_text
from .evalkit import MetricsReport
from .pipeline import StageError, compare_runs, run_pipeline, run_sweep

_STAGE_BY_COMMAND = {
    "generate": ("generate",),
    "split": ("generate", "split"),
    "train-teacher": ("generate", "split", "teacher"),
    "train-student": ("generate", "split", "teacher", "student"),
    "evaluate": ("generate", "split", "teacher", "student", "evaluate"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bgmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="path to a flat key-value config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        return p

    add_config_command("generate", "generate the synthetic UGC/PGC datasets")
    add_config_command("split", "generate data and build the music split")
    add_config_command("train-teacher", "run stages through teacher training")
    add_config_command("train-student", "run stages through student training")
    add_config_command("evaluate", "run the full pipeline and write metrics")
    add_config_command("sweep", "run the ablation grid of modes x teacher weights")

    cmp = sub.add_parser("compare", help="aggregate and diff metrics CSV files")
    cmp.add_argument("csvs", nargs="+", help="metrics CSV files to compare")
    cmp.add_argument("--labels", help="comma-separated labels, one per file")
    cmp.add_argument("--out", default="compare_out", help="output directory")
    return parser


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.default()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.update(parse_config_text(item))
    return config.with_overrides(overrides) if overrides else config


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "compare":
            reports = [MetricsReport.from_csv(p) for p in args.csvs]
            labels = args.labels.split(",") if args.labels else None
            table, plot = compare_runs(reports, labels, out_dir=args.out)
            for row in table:
                print(row)
            if plot:
                print(f"plot written to {plot}")
            return 0
        config = _load_config(args)
        if args.command == "sweep":
            _, path = run_sweep(config)
            print(f"sweep metrics written to {path}")
            return 0
        stages = _STAGE_BY_COMMAND[args.command]
        config = config.with_overrides({"pipeline.stages": stages})
        art = run_pipeline(config)
        if art.metrics_csv:
            print(f"metrics written to {art.metrics_csv}")
        else:
            print(f"artifacts under {art.root}")
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
