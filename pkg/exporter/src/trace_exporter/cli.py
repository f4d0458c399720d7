"""Command line entry point: dart-export --spec spec.json --out trace.jsonl"""
from __future__ import annotations

import argparse
import sys

from .export import export, load_spec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dart-export",
        description="Run a toy multi-exit model and export an inference "
                    "trace (JSONL) for the policy simulator.")
    parser.add_argument("--spec", required=True,
                        help="JSON export spec (model, dataset, attachments, "
                             "energy table, ...)")
    parser.add_argument("--out", required=True,
                        help="destination trace file (JSONL)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = load_spec(args.spec)
        result = export(spec, args.out)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {result.num_samples} samples ({result.num_exits} exits) "
          f"to {result.out_path}")
    if result.images_dir is not None:
        print(f"images in {result.images_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
