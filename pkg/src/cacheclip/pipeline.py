"""End-to-end prefill strategies over precomputed chunk caches.

Every entry point returns a PrefillOutcome carrying the final cache, the
final-position logits, and a cost report whose reference is the matched
from-scratch prefill. Chunk precompute cost is charged when the caches are
built (prefill_chunk) and amortizes across requests, so it never appears in
these per-request reports.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import model as model_mod
from .flops import FlopReport, PipelineTrace, count_flops, full_prefill_macs
from .kv_store import ChunkCache, MergedCache, merge_caches
from .model import Model, extend_cache, prefill_full, selective_forward
from .selector import (
    SelectionConfig,
    SelectionPlan,
    aux_score_tokens,
    cacheblend_select,
    map_selection,
    select_tokens,
)
from .tokenizers import GreedyTokenizer, TokenSpan

STRATEGIES = ("full", "direct", "ape", "cacheclip", "cacheblend")


@dataclass(frozen=True)
class ApeConfig:
    """Query-side attention reshaping: logits scaled, then softmax tempered.

    Applied only to rows appended after the merge; cached chunk entries are
    never touched. temperature == scale leaves the weights unchanged, since
    both enter the logits as the single factor scale / temperature.
    """

    temperature: float = 0.9
    scale: float = 0.9

    def __post_init__(self) -> None:
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.scale <= 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def knobs(self) -> tuple[float, float]:
        return (self.temperature, self.scale)


@dataclass
class PrefillOutcome:
    cache: object
    logits: np.ndarray
    report: FlopReport
    plan: SelectionPlan | None = None


def reuse_context_ids(chunks: Sequence[ChunkCache], query_ids: Sequence[int]) -> list[int]:
    """Token ids a from-scratch prefill would see: prefix + chunks + query."""
    if not chunks:
        raise ValueError("need at least one chunk")
    ids = list(chunks[0].token_ids[: chunks[0].prefix_len])
    for chunk in chunks:
        ids.extend(chunk.chunk_ids)
    ids.extend(int(t) for t in query_ids)
    return ids


def full_attention_prefill(
    model: Model, token_ids: Sequence[int], *, trace: PipelineTrace | None = None
) -> PrefillOutcome:
    """From-scratch causal prefill; the quality and cost reference."""
    trace = trace if trace is not None else PipelineTrace()
    result = prefill_full(model, token_ids, trace=trace, stage="decode")
    trace.full_prefill_reference = full_prefill_macs(model.config, len(token_ids))
    return PrefillOutcome(result.cache, result.logits, count_flops(trace))


def direct_reuse_prefill(
    model: Model,
    chunks: Sequence[ChunkCache],
    query_ids: Sequence[int],
    *,
    ape: ApeConfig | None = None,
    trace: PipelineTrace | None = None,
) -> PrefillOutcome:
    """Merge cached chunks as-is and run the query; no recomputation."""
    trace = trace if trace is not None else PipelineTrace()
    merged = merge_caches(chunks, model.config.rope, trace=trace)
    logits, _ = extend_cache(
        model, merged, query_ids,
        knobs=ape.knobs if ape else None, trace=trace, stage="decode",
    )
    trace.full_prefill_reference = full_prefill_macs(model.config, merged.n_rows)
    return PrefillOutcome(merged, logits, count_flops(trace))


def ape_prefill(
    model: Model,
    chunks: Sequence[ChunkCache],
    query_ids: Sequence[int],
    *,
    ape: ApeConfig = ApeConfig(),
    trace: PipelineTrace | None = None,
) -> PrefillOutcome:
    """Direct reuse with the query's attention reshaped, nothing recomputed."""
    return direct_reuse_prefill(model, chunks, query_ids, ape=ape, trace=trace)


def _chunk_text_and_spans(
    chunks: Sequence[ChunkCache],
    aux_chunks: Sequence[ChunkCache],
    primary_tokenizer: GreedyTokenizer,
    aux_tokenizer: GreedyTokenizer,
) -> tuple[list[TokenSpan], list[TokenSpan]]:
    """Spans of both tokenizations over the concatenated chunk text.

    Each chunk was tokenized on its own, so per-chunk spans shifted by the
    running character offset tile the concatenation exactly. Re-encoding
    must reproduce the cached ids; chunk boundaries sit on token boundaries
    of both tokenizers by construction, which keeps that check honest.
    """
    primary_spans: list[TokenSpan] = []
    aux_spans: list[TokenSpan] = []
    offset = 0
    for i, (chunk, aux_chunk) in enumerate(zip(chunks, aux_chunks)):
        text = primary_tokenizer.decode(chunk.chunk_ids)
        if aux_tokenizer.decode(aux_chunk.chunk_ids) != text:
            raise ValueError(f"chunk {i}: cached texts differ between the two models")
        p_spans = primary_tokenizer.encode_with_offsets(text)
        a_spans = aux_tokenizer.encode_with_offsets(text)
        if [s.token_id for s in p_spans] != list(chunk.chunk_ids):
            raise ValueError(f"chunk {i} text does not re-encode to its cached tokens")
        if [s.token_id for s in a_spans] != list(aux_chunk.chunk_ids):
            raise ValueError(
                f"chunk {i} text does not re-encode to its cached tokens (scoring side)"
            )
        primary_spans.extend(
            TokenSpan(s.token_id, s.start + offset, s.end + offset) for s in p_spans
        )
        aux_spans.extend(
            TokenSpan(s.token_id, s.start + offset, s.end + offset) for s in a_spans
        )
        offset += len(text)
    return primary_spans, aux_spans


def cacheclip_prefill(
    primary_model: Model,
    aux_model: Model,
    chunks: Sequence[ChunkCache],
    aux_chunks: Sequence[ChunkCache],
    query_text: str,
    config: SelectionConfig,
    *,
    primary_tokenizer: GreedyTokenizer,
    aux_tokenizer: GreedyTokenizer,
    ape: ApeConfig | None = None,
    trace: PipelineTrace | None = None,
    workers: int = 2,
) -> PrefillOutcome:
    """Merge cached chunks, recompute the tokens the scoring model flags.

    The merge and the scoring pass are independent, so they run on separate
    workers and join before the recompute step. Traces are absorbed in a
    fixed order (merge, then scoring), keeping reports identical whatever
    the worker count.
    """
    if len(chunks) != len(aux_chunks):
        raise ValueError(
            f"{len(chunks)} cached chunks but {len(aux_chunks)} scoring chunks"
        )
    if not chunks:
        raise ValueError("need at least one chunk")
    trace = trace if trace is not None else PipelineTrace()
    primary_spans, aux_spans = _chunk_text_and_spans(
        chunks, aux_chunks, primary_tokenizer, aux_tokenizer
    )
    query_primary = primary_tokenizer.encode(query_text)
    query_aux = aux_tokenizer.encode(query_text)
    if not query_primary or not query_aux:
        raise ValueError("query must be non-empty")

    merge_trace = PipelineTrace()
    score_trace = PipelineTrace()

    def do_merge() -> MergedCache:
        return merge_caches(chunks, primary_model.config.rope, trace=merge_trace)

    def do_score():
        scores = aux_score_tokens(
            aux_model, aux_chunks, query_aux, trace=score_trace, workers=1
        )
        return select_tokens(scores, config)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            merge_future = pool.submit(do_merge)
            score_future = pool.submit(do_score)
            merged = merge_future.result()
            aux_selection = score_future.result()
    else:
        merged = do_merge()
        aux_selection = do_score()
    trace.absorb(merge_trace)
    trace.absorb(score_trace)

    plan = map_selection(
        aux_selection, aux_spans, primary_spans,
        index_offset=merged.layout.sink_len,
    )
    selective_forward(primary_model, merged, plan, trace=trace, stage="recompute")
    logits, _ = extend_cache(
        primary_model, merged, query_primary,
        knobs=ape.knobs if ape else None, trace=trace, stage="decode",
    )
    trace.full_prefill_reference = full_prefill_macs(primary_model.config, merged.n_rows)
    return PrefillOutcome(merged, logits, count_flops(trace), plan)


def cacheblend_prefill(
    model: Model,
    chunks: Sequence[ChunkCache],
    query_ids: Sequence[int],
    ratio: float,
    *,
    trace: PipelineTrace | None = None,
) -> PrefillOutcome:
    """Discrepancy-guided recompute baseline, no scoring model involved.

    Expects prefix-less chunk caches (nothing is deduplicated at the seam)
    and selects by second-layer value drift after a full first-layer pass,
    with no window filtering. At ratio 0 this degrades to a plain
    concatenation of the cached chunks.
    """
    for i, chunk in enumerate(chunks):
        if chunk.prefix_len != 0:
            raise ValueError(
                f"chunk {i} carries a shared prefix; this baseline concatenates raw chunks"
            )
    trace = trace if trace is not None else PipelineTrace()
    merged = merge_caches(chunks, model.config.rope, trace=trace)
    plan = cacheblend_select(model, merged, ratio, trace=trace)
    selective_forward(model, merged, plan, trace=trace, stage="recompute")
    logits, _ = extend_cache(model, merged, query_ids, trace=trace, stage="decode")
    trace.full_prefill_reference = full_prefill_macs(model.config, merged.n_rows)
    return PrefillOutcome(merged, logits, count_flops(trace), plan)
