"""Multiply-accumulate bookkeeping for every prefill strategy.

Counting convention: one MAC is one multiply feeding an accumulator. Counted
work: matrix products (projections, MLP, output head), attention score and
mix products, and rotary rotation multiplies (2 * head_dim MACs per rotated
vector). Not counted: softmax, normalization, residual adds, bias adds.
The closed-form reference below shares the convention, so trace totals and
closed-form totals must agree exactly, not approximately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

STAGES = ("chunk_precompute", "selection", "recompute", "merge_overhead", "decode")

ROPE_MACS_PER_PAIR = 4  # 2-D rotation: two products per output component


def event_macs(kind: str, dims: tuple[int, ...]) -> int:
    if kind == "matmul":
        m, k, n = dims
        return m * k * n
    if kind in ("attn_scores", "attn_mix"):
        pairs, width = dims
        return pairs * width
    if kind == "rope":
        vectors, head_dim = dims
        return vectors * (ROPE_MACS_PER_PAIR * (head_dim // 2))
    raise ValueError(f"unknown trace event kind: {kind}")


class PipelineTrace:
    """Append-only log of dimension events; totals are derived afterward.

    Totals are sums over events, so they are invariant to the order events
    arrive in. Concurrent stages record into their own trace and are folded
    in with :meth:`absorb` at the join point.
    """

    def __init__(self) -> None:
        self.events: list[tuple[str, str, tuple[int, ...]]] = []
        self.full_prefill_reference: int = 0

    def _record(self, stage: str, kind: str, dims: tuple[int, ...]) -> None:
        if stage not in STAGES:
            raise ValueError(f"unknown stage: {stage}")
        self.events.append((stage, kind, dims))

    def matmul(self, stage: str, m: int, k: int, n: int) -> None:
        self._record(stage, "matmul", (m, k, n))

    def attention(self, stage: str, pairs: int, d_head: int, d_value: int) -> None:
        self._record(stage, "attn_scores", (pairs, d_head))
        self._record(stage, "attn_mix", (pairs, d_value))

    def rope(self, stage: str, vectors: int, head_dim: int) -> None:
        self._record(stage, "rope", (vectors, head_dim))

    def absorb(self, other: "PipelineTrace") -> None:
        self.events.extend(other.events)
        self.full_prefill_reference = max(
            self.full_prefill_reference, other.full_prefill_reference
        )

    def total(self, stage: str | None = None, kind: str | None = None) -> int:
        return sum(
            event_macs(k, dims)
            for s, k, dims in self.events
            if (stage is None or s == stage) and (kind is None or k == kind)
        )


@dataclass
class FlopReport:
    """Per-stage MAC totals for one prefill request.

    chunk_precompute is the offline, amortized cost and stays out of
    request_total; the request-time stages are selection, recompute,
    merge_overhead, and decode (the forward pass over tokens processed at
    request time, which for the full-attention strategy is the whole
    prompt).
    """

    chunk_precompute: int = 0
    selection: int = 0
    recompute: int = 0
    merge_overhead: int = 0
    decode: int = 0
    full_prefill_reference: int = 0

    def __post_init__(self) -> None:
        for name in STAGES:
            if getattr(self, name) < 0:
                raise ValueError(f"negative MAC count for stage {name}")

    @property
    def request_total(self) -> int:
        return self.selection + self.recompute + self.merge_overhead + self.decode

    @property
    def ratio_vs_full(self) -> float:
        if self.full_prefill_reference <= 0:
            return float("nan")
        return self.request_total / self.full_prefill_reference

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in STAGES}
        out["request_total"] = self.request_total
        out["full_prefill_reference"] = self.full_prefill_reference
        out["ratio_vs_full"] = self.ratio_vs_full
        return out


def count_flops(trace: PipelineTrace) -> FlopReport:
    """Aggregate a trace into per-stage totals, exactly."""
    totals = dict.fromkeys(STAGES, 0)
    for stage, kind, dims in trace.events:
        totals[stage] += event_macs(kind, dims)
    return FlopReport(full_prefill_reference=trace.full_prefill_reference, **totals)


def full_prefill_macs(config, n_tokens: int, logits_rows: int = 1) -> int:
    """Closed-form MAC count of a full causal prefill over n_tokens.

    Mirrors exactly what the engine records: per layer, the q/k/v/out
    projections, rotation of q and k, the causal score/mix products
    (sum over rows i of i+1 visible keys, times d_head, per head), and the
    MLP; then the output head on logits_rows rows.
    """
    L = n_tokens
    dm = config.d_model
    h = config.n_heads
    dh = config.d_head
    width = h * dh
    tri = L * (L + 1) // 2
    per_layer = (
        3 * L * dm * width  # q, k, v projections
        + L * width * dm  # output projection
        + event_macs("rope", (2 * L * h, dh))  # rotate q and k
        + 2 * h * tri * dh  # attention scores + mix
        + (3 if config.mlp_gated else 2) * L * dm * config.d_ff
    )
    return config.n_layers * per_layer + logits_rows * dm * config.vocab_size


def extend_macs(
    config,
    n_new: int,
    n_past: int,
    logits_rows: int = 1,
    rotate_past: bool = False,
) -> int:
    """Closed-form MAC count of appending n_new rows onto n_past cached rows.

    rotate_past covers caches that store keys position-free: their key bank
    is rotated into place on every forward, and that rotation is traced.
    Merged caches store keys already rotated, so they skip it.
    """
    dm = config.d_model
    h = config.n_heads
    dh = config.d_head
    width = h * dh
    pairs = n_new * n_past + n_new * (n_new + 1) // 2
    per_layer = (
        3 * n_new * dm * width
        + n_new * width * dm
        + event_macs("rope", (2 * n_new * h, dh))
        + (event_macs("rope", (n_past * h, dh)) if rotate_past else 0)
        + 2 * h * pairs * dh
        + (3 if config.mlp_gated else 2) * n_new * dm * config.d_ff
    )
    return config.n_layers * per_layer + logits_rows * dm * config.vocab_size
