"""Command-line entry point: atrb-extract."""

from __future__ import annotations

import argparse
import sys

from .extractor import ExtractSpec, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atrb-extract",
        description="Export embeddings from a pretrained vision backbone "
        "into the attribution toolkit's binary store format",
    )
    parser.add_argument("--backbone", required=True,
                        help="architecture name (resnet18, resnet34, resnet50)")
    parser.add_argument("--checkpoint", default=None,
                        help="path to trunk weights (MoCo-style prefixes are stripped)")
    parser.add_argument("--data", required=True, help="dataset root with <split>/<class>/<image>")
    parser.add_argument("--split", choices=("train", "val"), default="val")
    parser.add_argument("--out", required=True, help="output store file (.atrb)")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExtractSpec(
        backbone=args.backbone,
        data_dir=args.data,
        split=args.split,
        output=args.out,
        checkpoint=args.checkpoint,
        batch_size=args.batch_size,
        device=args.device,
    )
    try:
        output = extract(spec)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
