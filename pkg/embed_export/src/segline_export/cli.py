"""Command-line entry point: export model embeddings for a corpus."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportError, export_corpus


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segline-export",
        description="Embed corpus sentences with a sentence-transformer model "
        "and write them as a SEGEMB1 file plus manifest.",
    )
    parser.add_argument("--corpus", required=True, help="corpus JSONL path")
    parser.add_argument(
        "--model-name", required=True, help="sentence-transformers model name or path"
    )
    parser.add_argument("--out", required=True, help="output SEGEMB1 path")
    parser.add_argument(
        "--manifest", default=None, help="manifest path (default: <out>.manifest.jsonl)"
    )
    parser.add_argument(
        "--normalize", action="store_true", help="L2-normalize rows and set flag bit0"
    )
    parser.add_argument("--batch-size", type=int, default=32, help="encoder batch size")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        n, d = export_corpus(
            args.corpus,
            args.model_name,
            args.out,
            manifest_path=args.manifest,
            normalize=args.normalize,
            batch_size=args.batch_size,
        )
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ExportError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"exported {n} embeddings of dimension {d} to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
