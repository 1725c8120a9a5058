"""Command-line frontend: ``classsr prepare|train|infer|eval``.

Exit codes: 0 on success, 1 when a ClassSR error is raised, 2 on usage errors.
"""

import argparse
import logging
import sys
from logging import getLogger
from typing import List, Optional

from . import set_stream_logger
from ._version import __version__
from .config import RunConfig, load_config, set_value
from .exceptions import ClassSRException
from .pipeline import Pipeline
from .utils import AVAILABLE_STAGES

logger = getLogger(__name__)


def _widths(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers: {value}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="classsr",
        description="Content-adaptive super-resolution with routed SR branches.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging level on stderr",
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--workdir", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--widths", type=_widths, help="branch widths, e.g. 16,36,56")
    common.add_argument("--w1", type=float, help="Image-Loss weight")
    common.add_argument("--w2", type=float, help="Class-Loss weight")
    common.add_argument("--w3", type=float, help="Average-Loss weight")
    strict = common.add_mutually_exclusive_group()
    strict.add_argument(
        "--strict-batch",
        dest="strict_batch",
        action="store_const",
        const=True,
        help="require batches divisible by the class count",
    )
    strict.add_argument(
        "--no-strict-batch", dest="strict_batch", action="store_const", const=False
    )

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("prepare", parents=[common], help="build the tile manifests")

    train = commands.add_parser("train", parents=[common], help="run a training stage")
    train.add_argument("stage", choices=AVAILABLE_STAGES)
    train.add_argument("--iterations", type=int)
    train.add_argument("--batch-size", type=int)

    infer = commands.add_parser("infer", parents=[common], help="super-resolve a PNG")
    infer.add_argument("image")
    infer.add_argument("--out", help="output directory")
    infer.add_argument(
        "--branch", type=int, help="force every tile to branch K (1-based)"
    )
    infer.add_argument("--labels", help="JSON list of per-tile branch indices")

    evaluate = commands.add_parser("eval", parents=[common], help="evaluate a test set")
    evaluate.add_argument("--test-set", help="directory of HR (and LR) PNGs")
    evaluate.add_argument("--cost-table", help="JSON branch and Class-Module FLOPs")
    return parser


def make_config(args: argparse.Namespace) -> RunConfig:
    """Load the config file and apply the command-line overrides.

    Raises:
        ConfigError: Unknown keys or invalid values.
    """
    cfg = load_config(args.config)
    overrides = {
        "paths.workdir": args.workdir,
        "seed": args.seed,
        "model.widths": args.widths,
        "training.w1": args.w1,
        "training.w2": args.w2,
        "training.w3": args.w3,
        "training.strict_batch": args.strict_batch,
    }
    stage = getattr(args, "stage", None)
    if stage is not None:
        overrides[f"training.{stage}.iterations"] = args.iterations
        overrides[f"training.{stage}.batch_size"] = args.batch_size
    for key, value in overrides.items():
        if value is not None:
            set_value(cfg, key, value)
    return cfg


def run(args: argparse.Namespace) -> None:
    pipeline = Pipeline(make_config(args))
    if args.command == "prepare":
        counts = pipeline.prepare()
        print(f"train tiles per class: {counts['train']}")
        print(f"val tiles per class: {counts['val']}")
    elif args.command == "train":
        path = pipeline.train(args.stage)
        print(f"checkpoint: {path}")
    elif args.command == "infer":
        force = args.branch - 1 if args.branch is not None else None
        report = pipeline.infer(args.image, args.out, force, args.labels)
        shares = ", ".join(f"{p:.1f}%" for p in report.percentages)
        print(f"tiles: {report.tiles_total}  classes: {shares}")
        print(f"average FLOPs per tile: {report.avg_flops:.0f}")
    elif args.command == "eval":
        metrics = pipeline.evaluate(args.test_set, args.cost_table)
        for key, row in metrics["aggregate"].items():
            print(
                f"{key}: psnr={row['psnr']:.3f} dB "
                f"flops={row['avg_flops']:.0f} ({row['ratio_vs_base']:.1%})"
            )


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    set_stream_logger("classsr", getattr(logging, args.log_level))
    try:
        run(args)
    except ClassSRException as e:
        logger.error(str(e))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
