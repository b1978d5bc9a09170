"""Command line front end: convert checkpoints, export fixtures."""

from __future__ import annotations

import argparse
import json
import sys

from .convert import convert_checkpoint
from .fixtures import (
    DEFAULT_GREEDY_LEN,
    export_fixtures,
    fixture_bytes,
    read_prompts_file,
    write_fixtures,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="model-import",
        description="Convert HF-format decoder checkpoints into the engine's "
        "weight-manifest and vocab formats, and export reference fixtures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="write a weight-manifest directory")
    p.add_argument("--src", required=True, help="checkpoint directory")
    p.add_argument("--out", required=True, help="manifest directory to create")
    p.add_argument(
        "--no-vocab", action="store_true", help="skip the tokenizer vocab export"
    )
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("fixtures", help="export reference fixtures for prompts")
    p.add_argument("--src", required=True, help="checkpoint directory")
    p.add_argument("--prompts", required=True, help="file with one prompt per line")
    p.add_argument("--out", help="fixture file (default: stdout)")
    p.add_argument("--greedy", type=int, default=DEFAULT_GREEDY_LEN,
                   help="greedy continuation length per prompt")
    p.set_defaults(func=cmd_fixtures)
    return parser


def cmd_convert(args) -> int:
    manifest = convert_checkpoint(
        args.src, args.out, export_tokenizer_vocab=not args.no_vocab
    )
    summary = {
        "manifest": str(manifest.path),
        "tensors": len(manifest.tensors),
        "source_digest": manifest.source_digest,
        "tokenizer_id": manifest.config["tokenizer_id"],
        "vocab": str(manifest.vocab_path) if manifest.vocab_path else None,
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_fixtures(args) -> int:
    if args.greedy < 0:
        raise ValueError("--greedy must be >= 0")
    prompts = read_prompts_file(args.prompts)
    payload = export_fixtures(args.src, prompts, greedy_len=args.greedy)
    if args.out:
        write_fixtures(payload, args.out)
    else:
        sys.stdout.write(fixture_bytes(payload).decode("utf-8"))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
