"""Command-line entry point: ``iepkd <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .harness import (MissingCheckpointError, build_data, evaluate, train_mpnn, train_student,
                      train_teacher)
from .spca import DegenerateInputError
from .tensor import NumericalError
from .viz import UnwritableDirectoryError, export_viz

EXIT_MISSING_CHECKPOINT = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4
EXIT_UNWRITABLE = 5
EXIT_CHECKPOINT = 6

COMMANDS = ("train-teacher", "train-mpnn", "distill", "evaluate", "export-viz")
_PHASE = {"train-teacher": "teacher", "train-mpnn": "mpnn", "distill": "student"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iepkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config field (repeatable)")
        if name in ("train-mpnn",):
            p.add_argument("--teacher", help="teacher checkpoint (default: <work_dir>/teacher.iepk)")
        if name in ("distill", "export-viz"):
            p.add_argument("--frame", help="frame checkpoint (default: <work_dir>/frame.iepk)")
        if name == "train-teacher" or name == "distill":
            p.add_argument("--resume", help="resume from a step checkpoint")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="checkpoint to score (default from eval_network)")
        if name == "export-viz":
            p.add_argument("--out", help="output directory (default: <work_dir>/viz)")
    return parser


def _run(args) -> int:
    cfg = load_config(args.config, args.overrides, _PHASE.get(args.command))
    work = Path(cfg.work_dir)
    data = build_data(cfg)
    if args.command == "train-teacher":
        print(train_teacher(cfg, data, resume=args.resume))
    elif args.command == "train-mpnn":
        print(train_mpnn(cfg, data, args.teacher or work / "teacher.iepk"))
    elif args.command == "distill":
        frame = args.frame or work / "frame.iepk"
        if cfg.enable_k_int or cfg.enable_k_alt:
            if not Path(frame).is_file():
                raise MissingCheckpointError(f"frame checkpoint not found: {frame}")
        print(train_student(cfg, data, frame, resume=args.resume))
    elif args.command == "evaluate":
        ckpt = args.checkpoint or work / f"{cfg.eval_network}.iepk"
        print(f"accuracy {evaluate(ckpt, data):.6f}")
    elif args.command == "export-viz":
        for path in export_viz(args.frame or work / "frame.iepk", data, args.out or work / "viz",
                               cfg.viz_samples, cfg.cvis_literal):
            print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("IEPKD_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    failures = (
        (MissingCheckpointError, EXIT_MISSING_CHECKPOINT, "missing-checkpoint"),
        (ConfigError, EXIT_CONFIG, "config"),
        ((NumericalError, DegenerateInputError, FloatingPointError), EXIT_NUMERICAL, "numerical"),
        (UnwritableDirectoryError, EXIT_UNWRITABLE, "unwritable-directory"),
        (CheckpointError, EXIT_CHECKPOINT, "checkpoint"),
    )
    try:
        return _run(args)
    except Exception as exc:
        for kinds, code, category in failures:
            if isinstance(exc, kinds):
                print(f"error: {category}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
