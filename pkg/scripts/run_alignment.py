"""Compare last-layer attention between two models over a synthetic corpus.

Defaults pit a reseeded copy of the serving model against the stock one,
which shows what the report looks like when the scorer is a poor stand-in.
Point --model-a / --model-b at weight-manifest directories to study real
imported checkpoints instead.

Example:
    python3 scripts/run_alignment.py --length 64 --length 128 --count 8
"""

import argparse

from cacheclip import alignment_study, emit_alignment
from cacheclip.cli import _synth_corpus, resolve_model, resolve_tokenizer


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model-a", default="toy:primary:99", help="scoring side")
    ap.add_argument("--model-b", default="toy:primary", help="serving side")
    ap.add_argument("--vocab", help="vocab file for manifest models")
    ap.add_argument("--length", action="append", type=int,
                    help="repeatable; default 48 and 96")
    ap.add_argument("--count", type=int, default=8, help="sequences per length")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--frac", type=float, default=0.2, help="top fraction for overlap")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--format", choices=("json", "csv"), default="json")
    ap.add_argument("--out", help="default stdout")
    args = ap.parse_args()

    model_a = resolve_model(args.model_a)
    model_b = resolve_model(args.model_b)
    tok = resolve_tokenizer(model_b, args.vocab)
    corpus = _synth_corpus(tok, args.length or (48, 96), args.count, args.seed)
    stats = alignment_study(model_a, model_b, corpus, args.frac, workers=args.workers)
    text = emit_alignment(stats, args.format, path=args.out)
    if not args.out:
        print(text, end="")
    else:
        print(f"wrote {len(stats.rows)} rows to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
