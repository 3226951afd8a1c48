"""Command line entry point: ``lensrobust <command> --config FILE``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..errors import ConfigError, LensError
from . import runner
from .config import PRESETS, ExperimentConfig, load_config, load_preset
from .report import cmd_report

log = logging.getLogger("lensrobust")

COMMANDS = {
    "train": "train the natural and PGD models, write checkpoints and training logs",
    "attack": "attack sampled images, write per-image summaries and perturbed images",
    "evaluate": "attack, score every metric combination, write records and aggregates",
    "sweep-w": "evaluate over the w grid and write w,metric,attack,mean plot data",
    "sweep-k": "evaluate over the k grid and write k,metric,attack,mean plot data",
    "report": "render fixed-width tables from aggregate.csv",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lensrobust", description="Locality-sensitive attribution robustness experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        src = p.add_mutually_exclusive_group(required=name != "report")
        src.add_argument("--config", type=Path, help="flat key = value config file")
        src.add_argument("--preset", choices=PRESETS, help="bundled experiment preset")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="override the output directory")
        p.add_argument("--samples", type=int, help="override sample_count")
        if name == "report":
            p.add_argument("directory", nargs="?", type=Path, help="output directory holding aggregate.csv")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_preset(args.preset) if args.preset else load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.samples is not None:
        changes["sample_count"] = args.samples
    return cfg.replace(**changes) if changes else cfg


def run(args: argparse.Namespace) -> None:
    if args.command == "report":
        if args.directory is not None:
            directory = args.directory
        elif args.out is not None:
            directory = args.out
        elif args.config or args.preset:
            directory = Path(resolve_config(args).out)
        else:
            raise ConfigError("report needs an output directory, --out or --config")
        sys.stdout.write(cmd_report(directory))
        return
    cfg = resolve_config(args)
    if args.command == "train":
        for regime, path in runner.cmd_train(cfg).items():
            print(f"{regime}: {path}")
    elif args.command == "attack":
        print(runner.cmd_attack(cfg))
    elif args.command == "evaluate":
        print(runner.cmd_evaluate(cfg))
    elif args.command == "sweep-w":
        print(runner.cmd_sweep_w(cfg))
    elif args.command == "sweep-k":
        print(runner.cmd_sweep_k(cfg))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except LensError as exc:
        print(f"lensrobust {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
