"""Needle-in-a-haystack task generation and the strategy sweep runner.

Tasks follow the usual retrieval-benchmark shapes: a filler haystack with
key-value needle sentences planted in it, split into overlapping chunks.
Chunk and overlap sizes scale proportionally from the reference class of
1000-token chunks with 50-token overlaps at 8192 tokens, so desk-length
runs keep the same geometry.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .analysis import arc_score, next_token_kl
from .flops import FlopReport
from .model import Model, decode_step, prefill_chunk
from .pipeline import (
    ApeConfig,
    PrefillOutcome,
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
    aux_preset_tokenizer,
    primary_preset_model,
    primary_preset_tokenizer,
)
from .selector import SelectionConfig
from .tokenizers import GreedyTokenizer

TASK_KINDS = ("single1", "single2", "single3", "multikey1", "multivalue", "multiquery")

REFERENCE_CONTEXT = 8192
REFERENCE_CHUNK = 1000
REFERENCE_OVERLAP = 50

DEFAULT_PREFIX = (
    "Read the documents below and answer the question about the special magic numbers."
)

_ADJECTIVES = (
    "quiet", "bright", "ancient", "gentle", "rusty", "golden", "hollow", "misty",
    "silver", "crimson", "velvet", "frozen", "amber", "shaded", "patient", "crooked",
    "polished", "humble", "distant", "sturdy", "nimble", "woven", "tranquil", "mellow",
)
_NOUNS = (
    "harbor", "meadow", "lantern", "compass", "orchard", "valley", "bridge", "garden",
    "library", "mountain", "river", "castle", "forest", "anchor", "beacon", "cottage",
    "island", "market", "temple", "tunnel", "villa", "windmill", "workshop", "archive",
)
_VERBS = (
    "watched", "crossed", "guarded", "followed", "circled", "painted", "measured",
    "repaired", "sheltered", "explored", "mapped", "restored", "visited", "sketched",
    "studied", "admired",
)
_NOISE_SENTENCES = (
    "The grass is green.",
    "The sky is blue.",
    "The sun is yellow.",
    "Here we go.",
    "There and back again.",
)


@dataclass(frozen=True)
class BenchCase:
    """One generated retrieval case, deterministic in its seed."""

    task_kind: str
    prefix_text: str
    chunk_texts: tuple[str, ...]
    haystack: str
    needles: tuple[tuple[str, str], ...]  # (key phrase, value)
    needle_spans: tuple[tuple[int, int, int], ...]  # (chunk, char start, char end)
    query: str
    references: tuple[str, ...]
    seed: int
    target_tokens: int

    def __post_init__(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        for ref in self.references:
            if ref not in self.haystack:
                raise ValueError(f"reference {ref!r} missing from the haystack")
        for chunk, start, end in self.needle_spans:
            placed = self.chunk_texts[chunk][start:end]
            values = {v for _, v in self.needles}
            if placed not in values:
                raise ValueError(f"recorded span {placed!r} matches no needle value")


def _needle_sentence(key: str, value: str) -> str:
    return f"One of the special magic numbers for {key} is {value}."


def _seven_digit_values(rng: np.random.Generator, count: int) -> list[str]:
    picks = rng.choice(9_000_000, size=count, replace=False)
    return [str(1_000_000 + int(p)) for p in picks]


def _uuid_like(rng: np.random.Generator) -> str:
    digits = "0123456789abcdef"
    raw = "".join(digits[int(i)] for i in rng.integers(0, 16, size=32))
    return f"{raw[:8]}-{raw[8:12]}-{raw[12:16]}-{raw[16:20]}-{raw[20:]}"


def _key_phrases(rng: np.random.Generator, count: int) -> list[str]:
    pair_ids = rng.choice(len(_ADJECTIVES) * len(_NOUNS), size=count, replace=False)
    return [
        f"the {_ADJECTIVES[int(p) // len(_NOUNS)]} {_NOUNS[int(p) % len(_NOUNS)]}"
        for p in pair_ids
    ]


def _filler(rng: np.random.Generator, noise: bool) -> str:
    if noise:
        return _NOISE_SENTENCES[int(rng.integers(0, len(_NOISE_SENTENCES)))]
    a, a2 = (_ADJECTIVES[int(i)] for i in rng.integers(0, len(_ADJECTIVES), size=2))
    n, n2 = (_NOUNS[int(i)] for i in rng.integers(0, len(_NOUNS), size=2))
    v = _VERBS[int(rng.integers(0, len(_VERBS)))]
    return f"The {a} {n} {v} the {a2} {n2}."


def scaled_chunking(length_tokens: int) -> tuple[int, int]:
    """Chunk and overlap token sizes for a target context length."""
    chunk_len = round(REFERENCE_CHUNK * length_tokens / REFERENCE_CONTEXT)
    overlap = round(REFERENCE_OVERLAP * length_tokens / REFERENCE_CONTEXT)
    return chunk_len, overlap


def gen_niah(
    task_kind: str,
    length_tokens: int,
    seed: int,
    *,
    tokenizer: GreedyTokenizer | None = None,
    chunk_len: int | None = None,
    overlap: int | None = None,
    n_chunks: int | None = None,
    n_values: int = 4,
    prefix_text: str = DEFAULT_PREFIX,
) -> BenchCase:
    """Generate one case: filler chunks with needle sentences planted in them.

    Needles are inserted away from each chunk's tail so the overlap copied
    into the next chunk never duplicates a value, which keeps "the value
    lives in exactly this chunk" true for coverage accounting.
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task_kind!r}")
    if length_tokens < 256:
        raise ValueError(
            f"length {length_tokens} cannot fit needles; need at least 256 tokens"
        )
    tok = tokenizer if tokenizer is not None else primary_preset_tokenizer()
    default_chunk, default_overlap = scaled_chunking(length_tokens)
    chunk_len = default_chunk if chunk_len is None else chunk_len
    overlap = default_overlap if overlap is None else overlap
    if not 0 <= overlap < chunk_len:
        raise ValueError(f"overlap {overlap} must be smaller than chunk length {chunk_len}")
    if n_chunks is None:
        n_chunks = max(2, round(length_tokens / chunk_len))
    if n_chunks < 2:
        raise ValueError(f"need at least 2 chunks, got {n_chunks}")

    rng = np.random.default_rng(seed)
    noise = task_kind == "single1"

    if task_kind in ("single1", "single2", "single3"):
        keys = _key_phrases(rng, 1)
        values = [_uuid_like(rng)] if task_kind == "single3" else _seven_digit_values(rng, 1)
        queried = [0]
    elif task_kind == "multikey1":
        keys = _key_phrases(rng, 4)
        values = _seven_digit_values(rng, 4)
        queried = [0]
    elif task_kind == "multivalue":
        keys = [_key_phrases(rng, 1)[0]] * n_values
        values = _seven_digit_values(rng, n_values)
        queried = list(range(n_values))
    else:  # multiquery
        keys = _key_phrases(rng, 3)
        values = _seven_digit_values(rng, 3)
        queried = [0, 1, 2]
    needles = tuple(zip(keys, values))
    if len(needles) > n_chunks:
        raise ValueError(
            f"{len(needles)} needles do not fit in {n_chunks} chunks at length {length_tokens}"
        )
    needle_chunks = sorted(
        int(c) for c in rng.choice(n_chunks, size=len(needles), replace=False)
    )

    chunk_texts: list[str] = []
    spans: list[tuple[int, int, int]] = []
    haystack_parts: list[str] = []
    tail = ""
    for c in range(n_chunks):
        planted = [i for i, chunk_idx in enumerate(needle_chunks) if chunk_idx == c]
        budget = chunk_len - sum(
            len(tok.encode(" " + _needle_sentence(*needles[i]))) for i in planted
        )
        sentences: list[str] = []
        counts: list[int] = []
        used = len(tok.encode(tail)) if tail else 0
        while used < budget:
            s = _filler(rng, noise)
            lead = " " if (tail or sentences) else ""
            n_tok = len(tok.encode(lead + s))
            if sentences and used + n_tok > budget:
                break
            sentences.append(s)
            counts.append(n_tok)
            used += n_tok
        # sentences that reach into the chunk's final `overlap` tokens
        j_tail = len(sentences)
        covered = 0
        while j_tail > 0 and covered < overlap:
            j_tail -= 1
            covered += counts[j_tail]
        for i in planted:
            pos = int(rng.integers(0, max(1, j_tail)))
            sentences.insert(pos, _needle_sentence(*needles[i]))
        content = " ".join(sentences)
        text = f"{tail} {content}" if tail else content
        chunk_texts.append(text)
        haystack_parts.append(content)
        for i, chunk_idx in enumerate(needle_chunks):
            if chunk_idx != c:
                continue
            start = text.index(needles[i][1])
            spans.append((c, start, start + len(needles[i][1])))
        ids = tok.encode(text)
        tail = tok.decode(ids[-overlap:]) if overlap else ""

    if task_kind == "multivalue":
        query = f"What are all the special magic numbers for {keys[0]}?"
    elif task_kind == "multiquery":
        query = (
            f"What are the special magic numbers for {keys[0]}, {keys[1]} and {keys[2]}?"
        )
    else:
        query = f"What is the special magic number for {keys[0]}?"

    return BenchCase(
        task_kind=task_kind,
        prefix_text=prefix_text,
        chunk_texts=tuple(chunk_texts),
        haystack=" ".join(haystack_parts),
        needles=needles,
        needle_spans=tuple(spans),
        query=query,
        references=tuple(values[i] for i in queried),
        seed=seed,
        target_tokens=length_tokens,
    )


@dataclass(frozen=True)
class SuiteConfig:
    tasks: tuple[str, ...] = TASK_KINDS
    lengths: tuple[int, ...] = (512,)
    seeds: tuple[int, ...] = (0,)
    ratios: tuple[float, ...] = (0.0, 0.2, 0.5, 1.0)
    strategies: tuple[str, ...] = STRATEGIES
    window_len: int = 8
    window_threshold: int = 5
    expand_full_window: bool = False
    ape_temperature: float = 0.9
    ape_scale: float = 0.9
    primary_seed: int = PRIMARY_MODEL_SEED
    aux_seed: int = AUX_MODEL_SEED
    decode_tokens: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        for t in self.tasks:
            if t not in TASK_KINDS:
                raise ValueError(f"unknown task kind {t!r}")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}")
        for r in self.ratios:
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"ratio {r} outside [0, 1]")
        if not (self.tasks and self.lengths and self.seeds and self.ratios and self.strategies):
            raise ValueError("tasks, lengths, seeds, ratios and strategies must be non-empty")


@dataclass(frozen=True)
class BenchRow:
    task_kind: str
    length: int
    seed: int
    strategy: str
    ratio: float
    next_token_kl: float
    needle_coverage: float | None
    effective_ratio: float
    arc: float | None
    flops: FlopReport


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]
    diagnostics: dict


def _needle_rows(
    case: BenchCase,
    tokenizer: GreedyTokenizer,
    chunk_token_lens: Sequence[int],
    chunk_row_starts: Sequence[int],
) -> set[int]:
    """Cache-row indices of the tokens that carry a needle value."""
    rows: set[int] = set()
    for chunk, start, end in case.needle_spans:
        spans = tokenizer.encode_with_offsets(case.chunk_texts[chunk])
        assert len(spans) == chunk_token_lens[chunk]
        for i, sp in enumerate(spans):
            if sp.start < end and sp.end > start:
                rows.add(chunk_row_starts[chunk] + i)
    return rows


def _coverage(selected: Sequence[int], needle_rows: set[int]) -> float:
    hit = needle_rows.intersection(selected)
    return len(hit) / len(needle_rows)


def _greedy_decode(
    model: Model, outcome: PrefillOutcome, tokenizer: GreedyTokenizer, n_tokens: int
) -> str:
    logits = outcome.logits
    cache = outcome.cache
    ids: list[int] = []
    for _ in range(n_tokens):
        t = int(np.argmax(logits))
        ids.append(t)
        logits, cache = decode_step(model, cache, t)
    return tokenizer.decode(ids)


def _run_case(
    case: BenchCase,
    config: SuiteConfig,
    primary_model: Model,
    aux_model: Model,
    primary_tokenizer: GreedyTokenizer,
    aux_tokenizer: GreedyTokenizer,
    arc_capable: bool,
) -> tuple[list[BenchRow], dict[float, float]]:
    ptok, atok = primary_tokenizer, aux_tokenizer
    p_prefix = ptok.encode(case.prefix_text)
    a_prefix = atok.encode(case.prefix_text)
    p_chunk_ids = [ptok.encode(t) for t in case.chunk_texts]
    a_chunk_ids = [atok.encode(t) for t in case.chunk_texts]
    query_ids = ptok.encode(case.query)

    chunks = [prefill_chunk(primary_model, p_prefix, ids) for ids in p_chunk_ids]
    aux_chunks = (
        [prefill_chunk(aux_model, a_prefix, ids) for ids in a_chunk_ids]
        if "cacheclip" in config.strategies
        else []
    )
    cb_chunks = []
    if "cacheblend" in config.strategies:
        # the raw-concatenation baseline folds the prefix into its first chunk
        cb_ids = [p_prefix + p_chunk_ids[0]] + p_chunk_ids[1:]
        cb_chunks = [prefill_chunk(primary_model, [], ids) for ids in cb_ids]

    sink = len(p_prefix)
    lens = [len(ids) for ids in p_chunk_ids]
    clip_starts = [sink + sum(lens[:c]) for c in range(len(lens))]
    cb_starts = [len(p_prefix) + sum(lens[:c]) for c in range(len(lens))]
    needle_rows_clip = _needle_rows(case, ptok, lens, clip_starts)
    needle_rows_cb = _needle_rows(case, ptok, lens, cb_starts)

    ape = ApeConfig(config.ape_temperature, config.ape_scale)
    full = full_attention_prefill(primary_model, reuse_context_ids(chunks, query_ids))

    once: dict[str, PrefillOutcome] = {"full": full}
    if "direct" in config.strategies:
        once["direct"] = direct_reuse_prefill(primary_model, chunks, query_ids)
    if "ape" in config.strategies:
        once["ape"] = direct_reuse_prefill(primary_model, chunks, query_ids, ape=ape)

    swept: dict[tuple[str, float], PrefillOutcome] = {}
    for ratio in config.ratios:
        if "cacheclip" in config.strategies:
            swept[("cacheclip", ratio)] = cacheclip_prefill(
                primary_model, aux_model, chunks, aux_chunks, case.query,
                SelectionConfig(
                    ratio, config.window_len, config.window_threshold,
                    config.expand_full_window,
                ),
                primary_tokenizer=ptok, aux_tokenizer=atok,
            )
        if "cacheblend" in config.strategies:
            swept[("cacheblend", ratio)] = cacheblend_prefill(
                primary_model, cb_chunks, query_ids, ratio
            )

    arcs: dict = {}

    def arc_for(key, outcome: PrefillOutcome) -> float | None:
        if not (arc_capable and config.decode_tokens > 0):
            return None
        if key not in arcs:
            arcs[key] = arc_score(
                _greedy_decode(primary_model, outcome, ptok, config.decode_tokens),
                case.references,
            )
        return arcs[key]

    rows: list[BenchRow] = []
    first_window_frac: dict[float, float] = {}
    for strategy in config.strategies:
        for ratio in config.ratios:
            if strategy in once:
                outcome = once[strategy]
                coverage = None
                effective = 1.0 if strategy == "full" else 0.0
                arc_key = strategy
            else:
                outcome = swept[(strategy, ratio)]
                needle_rows = needle_rows_clip if strategy == "cacheclip" else needle_rows_cb
                coverage = _coverage(outcome.cache.recomputed_rows, needle_rows)
                effective = outcome.plan.effective_ratio
                arc_key = (strategy, ratio)
            kl = 0.0 if strategy == "full" else next_token_kl(full.logits, outcome.logits)
            rows.append(
                BenchRow(
                    task_kind=case.task_kind,
                    length=case.target_tokens,
                    seed=case.seed,
                    strategy=strategy,
                    ratio=ratio,
                    next_token_kl=kl,
                    needle_coverage=coverage,
                    effective_ratio=effective,
                    arc=arc_for(arc_key, outcome),
                    flops=outcome.report,
                )
            )
    if "cacheblend" in config.strategies:
        for ratio in config.ratios:
            selected = swept[("cacheblend", ratio)].cache.recomputed_rows
            if selected:
                inside = sum(1 for r in selected if r < config.window_len)
                first_window_frac[ratio] = inside / len(selected)
    return rows, first_window_frac


def run_suite(
    config: SuiteConfig,
    *,
    primary_model: Model | None = None,
    aux_model: Model | None = None,
    primary_tokenizer: GreedyTokenizer | None = None,
    aux_tokenizer: GreedyTokenizer | None = None,
    arc_capable: bool = False,
) -> BenchReport:
    """Sweep strategies x ratios over generated cases.

    Substring-match scoring only makes sense for a model that can actually
    answer, so arc stays None unless arc_capable is set (imported real
    checkpoints). Cases fan out over a worker pool; rows are assembled in
    case order, so the report is byte-stable for a given config.
    """
    primary_model = primary_model if primary_model is not None else primary_preset_model(config.primary_seed)
    aux_model = aux_model if aux_model is not None else aux_preset_model(config.aux_seed)
    ptok = primary_tokenizer if primary_tokenizer is not None else primary_preset_tokenizer()
    atok = aux_tokenizer if aux_tokenizer is not None else aux_preset_tokenizer()
    if primary_model.config.tokenizer_id != ptok.tokenizer_id:
        raise ValueError("serving model and tokenizer disagree")
    if aux_model.config.tokenizer_id != atok.tokenizer_id:
        raise ValueError("scoring model and tokenizer disagree")

    cases = [
        gen_niah(task, length, seed, tokenizer=ptok)
        for task in config.tasks
        for length in config.lengths
        for seed in config.seeds
    ]

    def work(case: BenchCase):
        return _run_case(case, config, primary_model, aux_model, ptok, atok, arc_capable)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(work, cases))
    else:
        results = [work(c) for c in cases]

    rows: list[BenchRow] = []
    frac_by_ratio: dict[float, list[float]] = {}
    for case_rows, fracs in results:
        rows.extend(case_rows)
        for ratio, frac in fracs.items():
            frac_by_ratio.setdefault(ratio, []).append(frac)
    diagnostics = {
        "window_len": config.window_len,
        "cacheblend_first_window_fraction": {
            f"{ratio:g}": sum(v) / len(v) for ratio, v in sorted(frac_by_ratio.items())
        },
    }
    return BenchReport(rows=tuple(rows), diagnostics=diagnostics)


def _r6(x) -> float | None:
    return None if x is None else float(f"{float(x):.6g}")


def _row_dict(row: BenchRow) -> dict:
    flops = {k: (_r6(v) if isinstance(v, float) else v) for k, v in row.flops.to_dict().items()}
    return {
        "task_kind": row.task_kind,
        "length": row.length,
        "seed": row.seed,
        "strategy": row.strategy,
        "ratio": _r6(row.ratio),
        "next_token_kl": _r6(row.next_token_kl),
        "needle_coverage": _r6(row.needle_coverage),
        "effective_ratio": _r6(row.effective_ratio),
        "arc": _r6(row.arc),
        "flops": flops,
    }


_CSV_COLUMNS = (
    "task_kind", "length", "seed", "strategy", "ratio",
    "next_token_kl", "needle_coverage", "effective_ratio", "arc",
    "chunk_precompute_macs", "selection_macs", "recompute_macs",
    "merge_overhead_macs", "decode_macs", "request_total_macs",
    "full_prefill_macs", "ratio_vs_full",
)


def emit_report(report: BenchReport, fmt: str, path=None) -> str:
    """Render the sweep as JSON (round-trip stable) or CSV (one row per combo)."""
    if fmt == "json":
        payload = {
            "diagnostics": report.diagnostics,
            "rows": [_row_dict(r) for r in report.rows],
        }
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        for r in report.rows:
            f = r.flops
            writer.writerow(
                [
                    r.task_kind, r.length, r.seed, r.strategy, f"{r.ratio:.6g}",
                    f"{r.next_token_kl:.6g}",
                    "" if r.needle_coverage is None else f"{r.needle_coverage:.6g}",
                    f"{r.effective_ratio:.6g}",
                    "" if r.arc is None else f"{r.arc:.6g}",
                    f.chunk_precompute, f.selection, f.recompute,
                    f.merge_overhead, f.decode, f.request_total,
                    f.full_prefill_reference, f"{f.ratio_vs_full:.6g}",
                ]
            )
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
