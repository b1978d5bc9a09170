"""Distribution metrics and the cross-model attention comparison study."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Model, prefill_full
from .selector import selection_budget


def kl_divergence(p, q, epsilon: float = 1e-10) -> float:
    """KL(p ‖ q) with only q smoothed, clamped at zero.

    Smoothing keeps zero entries in q finite; it nudges the self-comparison
    a hair negative, so the result is clamped to honor Gibbs' inequality.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(f"need two equal-length distributions, got {p.shape} and {q.shape}")
    if p.min() < 0.0 or q.min() < 0.0:
        raise ValueError("distributions must be non-negative")
    q = q + epsilon
    mask = p > 0.0
    total = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    return max(0.0, total)


def topk_indices(scores, k: int) -> set[int]:
    """Index set of the k largest entries, ties broken by lower index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return {int(i) for i in order[:k]}


def jaccard_topk(p, q, frac: float) -> float:
    """Jaccard overlap of the top-ceil(frac*n) index sets of two score rows.

    Symmetric in p and q. Both empty top sets (frac rounding to zero) count
    as perfect agreement.
    """
    p = np.asarray(p)
    q = np.asarray(q)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"need two equal-length score rows, got {p.shape} and {q.shape}")
    if not 0.0 < frac <= 1.0:
        raise ValueError(f"frac must be in (0, 1], got {frac}")
    k = selection_budget(frac, int(p.size))
    a, b = topk_indices(p, k), topk_indices(q, k)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _softmax64(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def next_token_kl(logits_p, logits_q) -> float:
    """KL between the next-token distributions implied by two logit rows."""
    p = np.asarray(logits_p, dtype=np.float64)
    q = np.asarray(logits_q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(f"need two equal-length logit rows, got {p.shape} and {q.shape}")
    return kl_divergence(_softmax64(p), _softmax64(q))


def arc_score(prediction: str, references: Sequence[str]) -> float:
    """Fraction of reference strings appearing verbatim in the prediction."""
    if not references:
        raise ValueError("need at least one reference")
    return sum(1 for r in references if r in prediction) / len(references)


@dataclass(frozen=True)
class AlignmentRow:
    """Aggregates for one input length.

    kl_a_last_b_last compares model A's last-layer row against model B's;
    kl_b_first_b_last compares model B's own first layer against its last.
    a_last_closer reports which of the two sits nearer B's last layer; it
    is an observation, not a guarantee.
    """

    length: int
    count: int
    kl_a_last_b_last: float
    kl_b_first_b_last: float
    jaccard_a_last_b_last: float
    jaccard_b_first_b_last: float
    a_last_closer: bool


@dataclass(frozen=True)
class AlignmentStats:
    frac: float
    rows: tuple[AlignmentRow, ...]

    def to_json_dict(self) -> dict:
        return {
            "frac": self.frac,
            "rows": [
                {
                    "length": r.length,
                    "count": r.count,
                    "kl_a_last_b_last": _round6(r.kl_a_last_b_last),
                    "kl_b_first_b_last": _round6(r.kl_b_first_b_last),
                    "jaccard_a_last_b_last": _round6(r.jaccard_a_last_b_last),
                    "jaccard_b_first_b_last": _round6(r.jaccard_b_first_b_last),
                    "a_last_closer": r.a_last_closer,
                }
                for r in self.rows
            ],
        }


def _round6(x: float) -> float:
    return float(f"{float(x):.6g}")


def alignment_study(
    model_a: Model,
    model_b: Model,
    corpus: Sequence[Sequence[int]],
    frac: float = 0.2,
    *,
    workers: int = 1,
) -> AlignmentStats:
    """Compare final-row attention across two models sharing a tokenizer.

    For each sequence, both models run a full prefill with captured maps;
    the final position's head-averaged attention row is taken at A's last
    layer, B's last layer, and B's first layer. Two tracks are aggregated
    per input length: (A last vs B last) and (B first vs B last), each as
    mean KL and mean top-frac Jaccard. Sequences fan out across workers;
    aggregation is a mean, so worker count cannot change the result.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    ta, tb = model_a.config.tokenizer_id, model_b.config.tokenizer_id
    if not ta or ta != tb:
        raise ValueError(
            f"models must share a tokenizer, got {ta!r} and {tb!r}"
        )

    def measure(seq: Sequence[int]) -> tuple[int, float, float, float, float]:
        ra = prefill_full(model_a, seq, capture_maps=True)
        rb = prefill_full(model_b, seq, capture_maps=True)
        a_last = ra.maps.last_row(-1)
        b_last = rb.maps.last_row(-1)
        b_first = rb.maps.last_row(0)
        return (
            len(seq),
            kl_divergence(a_last, b_last),
            kl_divergence(b_first, b_last),
            jaccard_topk(a_last, b_last, frac),
            jaccard_topk(b_first, b_last, frac),
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(measure, corpus))
    else:
        samples = [measure(seq) for seq in corpus]

    by_length: dict[int, list[tuple[float, float, float, float]]] = {}
    for length, *vals in samples:
        by_length.setdefault(length, []).append(tuple(vals))
    rows = []
    for length in sorted(by_length):
        group = np.array(by_length[length], dtype=np.float64)
        means = group.mean(axis=0)
        rows.append(
            AlignmentRow(
                length=length,
                count=len(by_length[length]),
                kl_a_last_b_last=float(means[0]),
                kl_b_first_b_last=float(means[1]),
                jaccard_a_last_b_last=float(means[2]),
                jaccard_b_first_b_last=float(means[3]),
                a_last_closer=bool(means[0] < means[1]),
            )
        )
    return AlignmentStats(frac=frac, rows=tuple(rows))


def emit_alignment(stats: AlignmentStats, fmt: str, path=None) -> str:
    """Render the study as JSON or CSV (one row per input length)."""
    if fmt == "json":
        text = json.dumps(stats.to_json_dict(), indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            [
                "length", "count",
                "kl_a_last_b_last", "kl_b_first_b_last",
                "jaccard_a_last_b_last", "jaccard_b_first_b_last",
                "a_last_closer",
            ]
        )
        for r in stats.rows:
            writer.writerow(
                [
                    r.length, r.count,
                    f"{r.kl_a_last_b_last:.6g}", f"{r.kl_b_first_b_last:.6g}",
                    f"{r.jaccard_a_last_b_last:.6g}", f"{r.jaccard_b_first_b_last:.6g}",
                    r.a_last_closer,
                ]
            )
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
