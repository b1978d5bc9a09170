"""Token-importance scoring and recompute-set selection.

The auxiliary model scores every chunk token by how much last-layer
attention the query spends on it. The budgeted top scores become
candidates; candidates then pass a windowed coherence filter: chunk tokens
group into fixed windows of window_len, and a full window keeps its
candidates only when it holds at least window_threshold of them. A trailing
group shorter than window_len is bookkept (flagged partial) but exempt from
the drop rule; that exemption is what makes ratio 1.0 select everything
regardless of chunk length. With expand_full_window on, kept windows
contribute all their tokens instead of only the candidates.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import model as model_mod
from .flops import PipelineTrace
from .kv_store import ChunkCache, MergedCache
from .tokenizers import TokenSpan, align_spans


@dataclass(frozen=True)
class SelectionConfig:
    recomp_ratio: float
    window_len: int = 8
    window_threshold: int = 5
    expand_full_window: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.recomp_ratio <= 1.0:
            raise ValueError(f"recomp_ratio must be in [0, 1], got {self.recomp_ratio}")
        if self.window_len < 1:
            raise ValueError(f"window_len must be >= 1, got {self.window_len}")
        if not 0 <= self.window_threshold <= self.window_len:
            raise ValueError(
                f"window_threshold must be in 0..window_len, got {self.window_threshold}"
            )


@dataclass
class ImportanceScores:
    """Concatenated per-token scores with the chunk lengths that segment them."""

    scores: np.ndarray
    chunk_lens: tuple[int, ...]

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 1 or self.scores.size != sum(self.chunk_lens):
            raise ValueError(
                f"{self.scores.size} scores for chunk lengths {self.chunk_lens}"
            )


@dataclass(frozen=True)
class WindowRecord:
    window_id: int
    chunk: int
    start: int  # token index, concatenated chunk space
    end: int
    selected: int  # candidate count inside the window
    kept: bool
    partial: bool  # shorter than window_len, exempt from the drop rule


@dataclass(frozen=True)
class AuxSelection:
    indices: tuple[int, ...]
    windows: tuple[WindowRecord, ...]
    n_tokens: int
    requested_ratio: float

    @property
    def effective_ratio(self) -> float:
        return len(self.indices) / self.n_tokens if self.n_tokens else 0.0


@dataclass(frozen=True)
class SelectionPlan:
    """Recompute plan in primary-token space (merged-cache row indices)."""

    indices: tuple[int, ...]
    windows: tuple[WindowRecord, ...]
    requested_ratio: float
    effective_ratio: float

    def to_json_dict(self) -> dict:
        return {
            "indices": list(self.indices),
            "windows": [asdict(w) for w in self.windows],
            "requested_ratio": self.requested_ratio,
            "effective_ratio": self.effective_ratio,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SelectionPlan":
        return cls(
            indices=tuple(int(i) for i in data["indices"]),
            windows=tuple(WindowRecord(**w) for w in data["windows"]),
            requested_ratio=float(data["requested_ratio"]),
            effective_ratio=float(data["effective_ratio"]),
        )


def selection_budget(ratio: float, n_tokens: int) -> int:
    """ceil(ratio * n) on the ratio as written, immune to float dust.

    0.2 * 125 evaluates to 25.000000000000004 in binary floating point;
    taking the ceiling of that would hand out one token too many, so the
    product is formed exactly from the ratio's decimal rendering.
    """
    if n_tokens < 0:
        raise ValueError("token count must be non-negative")
    budget = math.ceil(Fraction(str(float(ratio))) * n_tokens)
    return max(0, min(n_tokens, budget))


def top_candidates(scores: np.ndarray, budget: int) -> np.ndarray:
    """Indices of the budget highest scores, ties broken by lower index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return np.sort(order[:budget])


def aux_score_tokens(
    aux_model,
    aux_chunk_caches: Sequence[ChunkCache],
    query_ids: Sequence[int],
    *,
    trace: PipelineTrace | None = None,
    workers: int = 1,
) -> ImportanceScores:
    """Score chunk tokens by last-layer query attention, per chunk.

    Each chunk cache is extended (without mutation) by the query tokens;
    the last layer's attention weights are restricted to the query-to-chunk
    columns, excluding the shared prefix and the query tokens themselves,
    then averaged over heads and over the query rows. Scores are raw
    attention mass, deliberately not renormalized, so they stay comparable
    across chunks.
    """
    if not aux_chunk_caches:
        raise ValueError("no chunk caches to score")
    if not query_ids:
        raise ValueError("query must be non-empty")
    for i, cache in enumerate(aux_chunk_caches):
        if cache.model_fingerprint != aux_model.fingerprint:
            raise ValueError(f"aux chunk {i} was built by a different model")

    def score_one(cache: ChunkCache) -> tuple[np.ndarray, PipelineTrace]:
        local = PipelineTrace()
        _, maps = model_mod.peek_forward(
            aux_model, cache, query_ids,
            capture_maps=True, trace=local, stage="selection",
        )
        last = maps.layers[-1]  # (heads, n_query, n_cache + n_query)
        cols = slice(cache.prefix_len, cache.n_rows)
        return last[:, :, cols].mean(axis=0).mean(axis=0), local

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score_one, aux_chunk_caches))
    else:
        results = [score_one(c) for c in aux_chunk_caches]

    if trace is not None:
        for _, local in results:
            trace.absorb(local)
    return ImportanceScores(
        scores=np.concatenate([r[0] for r in results]).astype(np.float32),
        chunk_lens=tuple(c.chunk_len for c in aux_chunk_caches),
    )


def select_tokens(scores: ImportanceScores, config: SelectionConfig) -> AuxSelection:
    """Budgeted top-k filtered by the window rule, in aux-token space."""
    n = int(scores.scores.size)
    budget = selection_budget(config.recomp_ratio, n)
    candidate = np.zeros(n, dtype=bool)
    if budget:
        candidate[top_candidates(scores.scores, budget)] = True

    selected: list[int] = []
    windows: list[WindowRecord] = []
    wid = 0
    base = 0
    for chunk, clen in enumerate(scores.chunk_lens):
        for ws in range(0, clen, config.window_len):
            we = min(ws + config.window_len, clen)
            gs, ge = base + ws, base + we
            count = int(candidate[gs:ge].sum())
            partial = (we - ws) < config.window_len
            kept = count > 0 and (partial or count >= config.window_threshold)
            if kept:
                if config.expand_full_window:
                    selected.extend(range(gs, ge))
                else:
                    selected.extend(int(i) for i in np.flatnonzero(candidate[gs:ge]) + gs)
            windows.append(WindowRecord(wid, chunk, gs, ge, count, kept, partial))
            wid += 1
        base += clen
    return AuxSelection(
        indices=tuple(selected),
        windows=tuple(windows),
        n_tokens=n,
        requested_ratio=config.recomp_ratio,
    )


def map_selection(
    aux_selection: AuxSelection,
    aux_spans: Sequence[TokenSpan],
    primary_spans: Sequence[TokenSpan],
    *,
    index_offset: int = 0,
) -> SelectionPlan:
    """Project an aux-space selection into primary-token space.

    Both span lists must cover the identical chunk text. A selected aux
    token pulls in every primary token its characters overlap; the union is
    sorted and deduplicated. Spans cover only chunk text (never the shared
    prefix), and index_offset then shifts the result to merged-cache rows,
    so prefix rows are structurally unreachable. The effective ratio is
    recomputed in primary space and can exceed the aux-space ratio when one
    aux token overlaps several primary tokens.
    """
    if len(aux_spans) != aux_selection.n_tokens:
        raise ValueError(
            f"{len(aux_spans)} aux spans for a selection over {aux_selection.n_tokens} tokens"
        )
    alignment = align_spans(aux_spans, primary_spans)
    primary = alignment.project(aux_selection.indices)
    return SelectionPlan(
        indices=tuple(p + index_offset for p in primary),
        windows=aux_selection.windows,
        requested_ratio=aux_selection.requested_ratio,
        effective_ratio=len(primary) / len(primary_spans) if primary_spans else 0.0,
    )


def cacheblend_select(
    primary_model,
    merged: MergedCache,
    ratio: float,
    *,
    trace: PipelineTrace | None = None,
    return_scores: bool = False,
):
    """Discrepancy-based selection in the CacheBlend style.

    The first layer is recomputed for every merged token with global
    context; the second layer's value projection of those states is
    compared (L2, per token) against the chunk-local cached values. The
    top-ceil(ratio * N) discrepancies are selected with no windowing. Needs
    at least two layers.
    """
    cfg = primary_model.config
    if cfg.n_layers < 2:
        raise ValueError("discrepancy selection needs at least two layers")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    sink = merged.layout.sink_len
    total = merged.layout.total
    n = total - sink
    positions = np.arange(total, dtype=np.int64)
    h = model_mod._embed(primary_model, merged.token_ids[:total])
    h1, _, _, _, _ = model_mod.layer_forward(
        primary_model, 0, h, positions, None, trace=trace, stage="selection"
    )
    v_global = model_mod.value_projection(primary_model, 1, h1, trace, "selection")
    diff = v_global[sink:] - merged.values[1][sink:total]
    discrepancy = np.sqrt(np.sum(np.square(diff.reshape(n, -1)), axis=1))

    budget = selection_budget(ratio, n)
    chosen = top_candidates(discrepancy, budget)
    plan = SelectionPlan(
        indices=tuple(int(i) + sink for i in chosen),
        windows=(),
        requested_ratio=float(ratio),
        effective_ratio=len(chosen) / n if n else 0.0,
    )
    if return_scores:
        return plan, discrepancy
    return plan


def random_select(
    n_tokens: int,
    ratio: float,
    seed: int,
    *,
    index_offset: int = 0,
) -> SelectionPlan:
    """Seeded uniform sample without replacement; the ablation control."""
    if n_tokens < 0:
        raise ValueError("token count must be non-negative")
    budget = selection_budget(ratio, n_tokens)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n_tokens, size=budget, replace=False))
    return SelectionPlan(
        indices=tuple(int(i) + index_offset for i in chosen),
        windows=(),
        requested_ratio=float(ratio),
        effective_ratio=budget / n_tokens if n_tokens else 0.0,
    )
