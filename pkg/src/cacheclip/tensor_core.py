"""Dense float32 kernels shared by every attention path.

The full prefill, the cache-append forward, and the hybrid selective
recompute all funnel into :func:`causal_attention`. Keeping one code path is
what makes the strategy-equivalence guarantees checkable down to the bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Array = np.ndarray


class DimensionError(ValueError):
    """Raised when operand shapes cannot be attended over."""


@dataclass(frozen=True)
class RopeParams:
    """Rotary embedding geometry.

    Angle for feature pair i at position p is p * base**(-2i / head_dim).
    head_dim must be even: features rotate in adjacent pairs.
    """

    head_dim: int
    base: float = 10000.0

    def __post_init__(self) -> None:
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise DimensionError(
                f"rotary head_dim must be positive and even, got {self.head_dim}"
            )
        if self.base <= 1.0:
            raise ValueError(f"rotary base must exceed 1, got {self.base}")

    def angles(self, positions) -> tuple[Array, Array]:
        """Return (cos, sin) tables of shape positions.shape + (head_dim/2,).

        Angles are formed in float64 and the tables cast to float32, so the
        same (position, pair) always yields the same table no matter which
        call site asks.
        """
        pos = np.asarray(positions, dtype=np.float64)
        exponent = -np.arange(0, self.head_dim, 2, dtype=np.float64) / self.head_dim
        theta = pos[..., None] * (self.base ** exponent)
        return np.cos(theta).astype(np.float32), np.sin(theta).astype(np.float32)


def rope_apply(x: Array, positions, params: RopeParams) -> Array:
    """Rotate adjacent feature pairs (x[..., 2i], x[..., 2i+1]) by position.

    ``positions`` aligns with x's leading axes: a scalar rotates every row
    identically, shape (n,) against x of shape (n, d) rotates row-wise, and
    shape (n,) against (n, h, d) rotates each head of a row alike. Rotation
    preserves norms; position 0 is an exact identity; rotating by -p undoes
    rotating by p up to float32 rounding.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim < 1 or x.shape[-1] != params.head_dim:
        raise DimensionError(
            f"expected trailing dim {params.head_dim}, got shape {x.shape}"
        )
    pos = np.asarray(positions)
    if pos.ndim > x.ndim - 1 or pos.shape != x.shape[: pos.ndim]:
        raise DimensionError(
            f"positions shape {pos.shape} does not align with value shape {x.shape}"
        )
    cos, sin = params.angles(pos)
    # Insert axes so the angle tables broadcast across any extra middle axes
    # (for (n, h, d) values the tables become (n, 1, d/2)).
    lift = x.ndim - 1 - pos.ndim
    shape = pos.shape + (1,) * lift + (params.head_dim // 2,)
    cos = cos.reshape(shape)
    sin = sin.reshape(shape)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def softmax_rows(x: Array) -> Array:
    """Softmax along the last axis, max-subtracted, float32 in and out.

    Rows may contain -inf entries (masked positions) but not only -inf.
    """
    x = np.asarray(x, dtype=np.float32)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def rms_norm(x: Array, gain: Array, eps: float = 1e-5) -> Array:
    """Root-mean-square normalization over the last axis with learned gain."""
    x = np.asarray(x, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    if gain.shape != x.shape[-1:]:
        raise DimensionError(f"gain shape {gain.shape} does not match features {x.shape[-1]}")
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(eps)) * gain


def causal_attention(
    q: Array,
    k: Array,
    v: Array,
    *,
    temperature: float = 1.0,
    scale: float = 1.0,
    mask_offset: int = 0,
    row_limits=None,
) -> tuple[Array, Array]:
    """Scaled dot-product attention under a causal mask.

    q is (m, d) or (h, m, d); k is (n, d) or (h, n, d); v matches k's rows
    with its own trailing width. Score logits are
    scale * q @ k.T / (sqrt(d) * temperature). Query row i admits key
    columns j <= i + mask_offset, so appending m rows onto a cache of
    n - m keys uses mask_offset = n - m. ``row_limits`` overrides the offset
    rule with an explicit visible-key count per row; the hybrid recompute
    path needs that because its query rows sit at arbitrary global offsets.

    Returns (context, weights). Each weights row is a distribution over the
    visible keys (sums to 1 within float32 rounding).
    """
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(k, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if q.ndim not in (2, 3) or k.ndim != q.ndim or v.ndim != q.ndim:
        raise DimensionError(
            f"rank mismatch: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key rows {k.shape[-2]} != value rows {v.shape[-2]}")
    if q.ndim == 3 and not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise DimensionError(
            f"head count mismatch: q {q.shape[0]}, k {k.shape[0]}, v {v.shape[0]}"
        )
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")

    m = q.shape[-2]
    n = k.shape[-2]
    d = q.shape[-1]
    if row_limits is None:
        limits = np.minimum(np.arange(m, dtype=np.int64) + 1 + int(mask_offset), n)
    else:
        limits = np.asarray(row_limits, dtype=np.int64)
        if limits.shape != (m,):
            raise DimensionError(f"row_limits shape {limits.shape}, expected ({m},)")
        limits = np.minimum(limits, n)
    if np.any(limits < 1):
        raise ValueError("attention row with no visible keys")

    factor = np.float32(scale / (math.sqrt(d) * temperature))
    logits = (q @ np.swapaxes(k, -1, -2)) * factor
    visible = np.arange(n, dtype=np.int64)[None, :] < limits[:, None]
    logits = np.where(visible, logits, np.float32(-np.inf))
    weights = softmax_rows(logits)
    return weights @ v, weights


def visible_pairs(n_new: int, n_past: int = 0) -> int:
    """Count of (query, key) pairs a causal append of n_new rows attends.

    Row i of the new block sees n_past + i + 1 keys. With n_past = 0 this is
    the classic n(n+1)/2 lower-triangle count.
    """
    return n_new * n_past + n_new * (n_new + 1) // 2
