"""Command-line entry point for the feature exporter.

Exit codes mirror the consumer convention: 0 success, 2 config error,
3 data error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ExportError
from .export import BACKBONES, ExportConfig, export_stream


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feature-export")
    parser.add_argument("--dataset", default="synthetic")
    parser.add_argument("--tasks", type=int, default=2)
    parser.add_argument("--classes-per-task", type=int, default=10)
    parser.add_argument("--train-per-class", type=int, default=16)
    parser.add_argument("--test-per-class", type=int, default=8)
    parser.add_argument("--backbone", choices=BACKBONES,
                        default="tiny-vit-random")
    parser.add_argument("--rank", type=int, default=4)
    parser.add_argument("--epochs", type=int, default=2)
    parser.add_argument("--lr", type=float, default=1e-4)
    parser.add_argument("--kd", action="store_true",
                        help="add the feature distillation penalties")
    parser.add_argument("--order-seed", type=int, default=0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="export")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExportConfig(
            dataset=args.dataset, tasks=args.tasks,
            classes_per_task=args.classes_per_task,
            train_per_class=args.train_per_class,
            test_per_class=args.test_per_class, backbone=args.backbone,
            rank=args.rank, epochs=args.epochs, lr=args.lr, kd=args.kd,
            order_seed=args.order_seed, seed=args.seed, out=args.out,
        )
        print(export_stream(cfg))
        return 0
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
