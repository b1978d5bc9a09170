"""Command-line front end.

Subcommands: precompute, merge, select, prefill, bench, analyze. Cache
files are read and written relative to --cache-dir, which defaults to the
CACHECLIP_CACHE_DIR environment variable and then the working directory.
Model specs are either "toy:primary[:seed]" / "toy:aux[:seed]" for the
built-in desk-scale models or a path to a weight-manifest directory (its
manifest.json). Any error exits nonzero with a message on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import alignment_study, emit_alignment
from .bench import (
    TASK_KINDS,
    SuiteConfig,
    _filler,
    emit_report,
    run_suite,
)
from .kv_store import ChunkCache, load_cache, merge_caches, save_cache
from .model import Model, load_weights, prefill_chunk
from .pipeline import (
    ApeConfig,
    STRATEGIES,
    cacheblend_prefill,
    cacheclip_prefill,
    direct_reuse_prefill,
    full_attention_prefill,
    reuse_context_ids,
)
from .presets import (
    AUX_MODEL_SEED,
    PRIMARY_MODEL_SEED,
    aux_preset_model,
    primary_preset_model,
)
from .selector import (
    SelectionConfig,
    SelectionPlan,
    aux_score_tokens,
    select_tokens,
)
from .tokenizers import GreedyTokenizer, builtin_tokenizer, from_vocab_file

CACHE_DIR_ENV = "CACHECLIP_CACHE_DIR"


def resolve_model(spec: str) -> Model:
    """Spec is toy:primary[:seed], toy:aux[:seed], or a manifest path."""
    if spec.startswith("toy:"):
        parts = spec.split(":")
        kind = parts[1] if len(parts) > 1 else ""
        if kind not in ("primary", "aux") or len(parts) > 3:
            raise ValueError(f"unknown toy model spec {spec!r}")
        if kind == "primary":
            seed = int(parts[2]) if len(parts) == 3 else PRIMARY_MODEL_SEED
            return primary_preset_model(seed)
        seed = int(parts[2]) if len(parts) == 3 else AUX_MODEL_SEED
        return aux_preset_model(seed)
    path = Path(spec)
    if path.is_dir():
        path = path / "manifest.json"
    return load_weights(path)


def resolve_tokenizer(model: Model, vocab_path: str | None) -> GreedyTokenizer:
    if vocab_path:
        return from_vocab_file(vocab_path)
    tid = model.config.tokenizer_id
    try:
        return builtin_tokenizer(tid)
    except ValueError:
        raise ValueError(
            f"model declares tokenizer {tid!r} which is not built in; pass --vocab"
        ) from None


def _cache_dir(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(CACHE_DIR_ENV, "."))


def _cache_path(name: str, cache_dir: Path) -> Path:
    p = Path(name)
    return p if p.is_absolute() or p.exists() else cache_dir / p


def _read_text(path: str) -> str:
    # trailing newline is file convention, not chunk content
    return Path(path).read_text(encoding="utf-8").rstrip("\n")


def _prefix_text(args) -> str:
    if getattr(args, "prefix_file", None):
        return _read_text(args.prefix_file)
    return getattr(args, "prefix", None) or ""


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _selection_config(args) -> SelectionConfig:
    return SelectionConfig(
        recomp_ratio=args.ratio,
        window_len=args.window_len,
        window_threshold=args.window_threshold,
        expand_full_window=args.expand_window,
    )


def _add_window_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ratio", type=float, default=0.2, help="recompute ratio in [0, 1]")
    p.add_argument("--window-len", type=int, default=8)
    p.add_argument("--window-threshold", type=int, default=5)
    p.add_argument("--expand-window", action="store_true",
                   help="recompute whole kept windows, not only their scored tokens")


def cmd_precompute(args) -> int:
    model = resolve_model(args.model)
    tok = resolve_tokenizer(model, args.vocab)
    prefix_ids = tok.encode(_prefix_text(args)) if _prefix_text(args) else []
    cache_dir = _cache_dir(args.cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for chunk_file in args.chunks:
        text = _read_text(chunk_file)
        cache = prefill_chunk(model, prefix_ids, tok.encode(text))
        out = cache_dir / (Path(chunk_file).stem + ".cclp")
        save_cache(cache, out)
        written.append({"path": str(out), "chunk_tokens": cache.chunk_len})
    _emit(json.dumps({"prefix_tokens": len(prefix_ids), "caches": written}, indent=2), args.out)
    return 0


def cmd_merge(args) -> int:
    model = resolve_model(args.model)
    cache_dir = _cache_dir(args.cache_dir)
    chunks = [load_cache(_cache_path(c, cache_dir)) for c in args.caches]
    for i, c in enumerate(chunks):
        if not isinstance(c, ChunkCache):
            raise ValueError(f"{args.caches[i]} is not a chunk cache")
    merged = merge_caches(chunks, model.config.rope)
    out = _cache_path(args.out, cache_dir)
    save_cache(merged, out)
    _emit(
        json.dumps(
            {
                "path": str(out),
                "rows": merged.n_rows,
                "sink_len": merged.layout.sink_len,
                "chunk_lens": list(merged.layout.chunk_lens),
            },
            indent=2,
        ),
        None,
    )
    return 0


def cmd_select(args) -> int:
    model = resolve_model(args.model)
    tok = resolve_tokenizer(model, args.vocab)
    cache_dir = _cache_dir(args.cache_dir)
    caches = [load_cache(_cache_path(c, cache_dir)) for c in args.caches]
    for i, c in enumerate(caches):
        if not isinstance(c, ChunkCache):
            raise ValueError(f"{args.caches[i]} is not a chunk cache")
    scores = aux_score_tokens(model, caches, tok.encode(args.query))
    sel = select_tokens(scores, _selection_config(args))
    plan = SelectionPlan(
        indices=sel.indices,
        windows=sel.windows,
        requested_ratio=sel.requested_ratio,
        effective_ratio=sel.effective_ratio,
    )
    _emit(json.dumps(plan.to_json_dict(), indent=2), args.out)
    return 0


def cmd_prefill(args) -> int:
    model = resolve_model(args.model)
    tok = resolve_tokenizer(model, args.vocab)
    prefix = _prefix_text(args)
    prefix_ids = tok.encode(prefix) if prefix else []
    texts = [_read_text(f) for f in args.chunks]
    chunk_ids = [tok.encode(t) for t in texts]
    query_ids = tok.encode(args.query)

    if args.strategy == "cacheblend":
        cb_ids = [prefix_ids + chunk_ids[0]] + chunk_ids[1:]
        cb_chunks = [prefill_chunk(model, [], ids) for ids in cb_ids]
        outcome = cacheblend_prefill(model, cb_chunks, query_ids, args.ratio)
    else:
        chunks = [prefill_chunk(model, prefix_ids, ids) for ids in chunk_ids]
        if args.strategy == "full":
            outcome = full_attention_prefill(model, reuse_context_ids(chunks, query_ids))
        elif args.strategy == "direct":
            outcome = direct_reuse_prefill(model, chunks, query_ids)
        elif args.strategy == "ape":
            outcome = direct_reuse_prefill(
                model, chunks, query_ids,
                ape=ApeConfig(args.ape_temperature, args.ape_scale),
            )
        else:
            aux_model = resolve_model(args.aux_model)
            aux_tok = resolve_tokenizer(aux_model, args.aux_vocab)
            aux_prefix = aux_tok.encode(prefix) if prefix else []
            aux_chunks = [
                prefill_chunk(aux_model, aux_prefix, aux_tok.encode(t)) for t in texts
            ]
            outcome = cacheclip_prefill(
                model, aux_model, chunks, aux_chunks, args.query,
                _selection_config(args),
                primary_tokenizer=tok, aux_tokenizer=aux_tok,
            )

    next_id = int(np.argmax(outcome.logits))
    order = np.argsort(-outcome.logits, kind="stable")[:5]
    digest = hashlib.sha256(
        np.ascontiguousarray(outcome.logits, dtype=np.float32).tobytes()
    ).hexdigest()
    payload = {
        "strategy": args.strategy,
        "rows": outcome.cache.n_rows,
        "logits_sha256": digest,
        "next_token_id": next_id,
        "next_token_text": tok.token(next_id),
        "top_tokens": [
            {"id": int(i), "text": tok.token(int(i)), "logit": float(outcome.logits[int(i)])}
            for i in order
        ],
        "recomputed_rows": len(getattr(outcome.cache, "recomputed_rows", ())),
        "effective_ratio": None if outcome.plan is None else outcome.plan.effective_ratio,
        "flops": outcome.report.to_dict(),
    }
    _emit(json.dumps(payload, indent=2), args.out)
    return 0


def cmd_bench(args) -> int:
    config = SuiteConfig(
        tasks=tuple(args.task or TASK_KINDS),
        lengths=tuple(args.length or (512,)),
        seeds=tuple(args.seed or (0,)),
        ratios=tuple(args.ratio or (0.0, 0.2, 0.5, 1.0)),
        strategies=tuple(args.strategy or STRATEGIES),
        window_len=args.window_len,
        window_threshold=args.window_threshold,
        expand_full_window=args.expand_window,
        ape_temperature=args.ape_temperature,
        ape_scale=args.ape_scale,
        primary_seed=args.primary_seed,
        aux_seed=args.aux_seed,
        decode_tokens=args.decode_tokens,
        workers=args.workers,
    )
    kwargs = {}
    if args.model:
        model = resolve_model(args.model)
        kwargs["primary_model"] = model
        kwargs["primary_tokenizer"] = resolve_tokenizer(model, args.vocab)
    if args.aux_model:
        aux = resolve_model(args.aux_model)
        kwargs["aux_model"] = aux
        kwargs["aux_tokenizer"] = resolve_tokenizer(aux, args.aux_vocab)
    report = run_suite(config, arc_capable=args.arc, **kwargs)
    _emit(emit_report(report, args.format), args.out)
    return 0


def _synth_corpus(tok: GreedyTokenizer, lengths, count: int, seed: int) -> list[list[int]]:
    corpus = []
    for length in lengths:
        for i in range(count):
            rng = np.random.default_rng((seed, length, i))
            text = _filler(rng, False)
            while len(tok.encode(text)) < length:
                text += " " + _filler(rng, False)
            corpus.append(tok.encode(text)[:length])
    return corpus


def cmd_analyze(args) -> int:
    model_a = resolve_model(args.model_a)
    model_b = resolve_model(args.model_b)
    tok = resolve_tokenizer(model_b, args.vocab)
    if args.corpus_file:
        lines = [l for l in _read_text(args.corpus_file).splitlines() if l.strip()]
        if not lines:
            raise ValueError(f"no sequences in {args.corpus_file}")
        corpus = [tok.encode(l) for l in lines]
    else:
        corpus = _synth_corpus(tok, args.length or (48, 96), args.count, args.seed or 0)
    stats = alignment_study(model_a, model_b, corpus, args.frac, workers=args.workers)
    _emit(emit_alignment(stats, args.format), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cacheclip",
        description="Chunked KV-cache reuse with guided selective recomputation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="build chunk caches from text files")
    p.add_argument("chunks", nargs="+", help="chunk text files (UTF-8)")
    p.add_argument("--model", default="toy:primary")
    p.add_argument("--vocab", help="newline-delimited vocab file")
    p.add_argument("--prefix", help="shared prefix text")
    p.add_argument("--prefix-file", help="file holding the shared prefix text")
    p.add_argument("--cache-dir", help=f"default ${CACHE_DIR_ENV} or .")
    p.add_argument("--out", help="write the summary JSON here instead of stdout")
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("merge", help="merge chunk caches into one context cache")
    p.add_argument("caches", nargs="+", help="chunk cache files")
    p.add_argument("--model", default="toy:primary")
    p.add_argument("--cache-dir", help=f"default ${CACHE_DIR_ENV} or .")
    p.add_argument("--out", required=True, help="merged cache output path")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("select", help="score chunk tokens and emit a selection plan")
    p.add_argument("caches", nargs="+", help="scoring-model chunk cache files")
    p.add_argument("--model", default="toy:aux", help="scoring model spec")
    p.add_argument("--vocab")
    p.add_argument("--query", required=True)
    p.add_argument("--cache-dir", help=f"default ${CACHE_DIR_ENV} or .")
    _add_window_flags(p)
    p.add_argument("--out", help="write the plan JSON here instead of stdout")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("prefill", help="run one strategy over chunk text files")
    p.add_argument("chunks", nargs="+", help="chunk text files (UTF-8)")
    p.add_argument("--strategy", choices=STRATEGIES, default="cacheclip")
    p.add_argument("--model", default="toy:primary")
    p.add_argument("--vocab")
    p.add_argument("--aux-model", default="toy:aux")
    p.add_argument("--aux-vocab")
    p.add_argument("--prefix")
    p.add_argument("--prefix-file")
    p.add_argument("--query", required=True)
    _add_window_flags(p)
    p.add_argument("--ape-temperature", type=float, default=0.9)
    p.add_argument("--ape-scale", type=float, default=0.9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prefill)

    p = sub.add_parser("bench", help="sweep strategies x ratios over generated cases")
    p.add_argument("--task", action="append", choices=TASK_KINDS)
    p.add_argument("--length", action="append", type=int)
    p.add_argument("--seed", action="append", type=int)
    p.add_argument("--ratio", action="append", type=float)
    p.add_argument("--strategy", action="append", choices=STRATEGIES)
    p.add_argument("--window-len", type=int, default=8)
    p.add_argument("--window-threshold", type=int, default=5)
    p.add_argument("--expand-window", action="store_true")
    p.add_argument("--ape-temperature", type=float, default=0.9)
    p.add_argument("--ape-scale", type=float, default=0.9)
    p.add_argument("--model", help="serving model spec (default: built-in)")
    p.add_argument("--vocab")
    p.add_argument("--aux-model", help="scoring model spec (default: built-in)")
    p.add_argument("--aux-vocab")
    p.add_argument("--primary-seed", type=int, default=PRIMARY_MODEL_SEED)
    p.add_argument("--aux-seed", type=int, default=AUX_MODEL_SEED)
    p.add_argument("--decode-tokens", type=int, default=0)
    p.add_argument("--arc", action="store_true",
                   help="greedy-decode and score substring matches (real checkpoints)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="compare attention rows across two models")
    p.add_argument("--model-a", default="toy:primary:99",
                   help="scoring-side model spec")
    p.add_argument("--model-b", default="toy:primary", help="serving-side model spec")
    p.add_argument("--vocab", help="shared vocab file for manifest models")
    p.add_argument("--corpus-file", help="text file, one sequence per line")
    p.add_argument("--length", action="append", type=int,
                   help="synthesized corpus lengths (no --corpus-file)")
    p.add_argument("--count", type=int, default=8, help="sequences per length")
    p.add_argument("--seed", type=int)
    p.add_argument("--frac", type=float, default=0.2)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001  (CLI boundary: report and exit nonzero)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
