"""Deterministic float32 decoder-only transformer with rotary attention.

Pre-norm blocks: RMSNorm, multi-head attention, residual; RMSNorm, MLP,
residual; final RMSNorm and an untied output head. Keys enter every cache
position-free and are rotated where attention consumes them, which is what
lets chunk caches merge under new positions without a rotate-and-unrotate
round trip.

Weight manifest format (documented in docs/weight_manifest.md): a directory
holding manifest.json plus raw little-endian float32 tensor blobs. The
manifest carries the config block, a tensor table (name, shape, dtype,
file, offset), and optionally a source digest. Projection weights are
stored input-major, i.e. activations multiply as x @ W.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .flops import PipelineTrace
from .kv_store import ChunkCache, MergedCache
from .tensor_core import (
    Array,
    DimensionError,
    RopeParams,
    causal_attention,
    rms_norm,
    rope_apply,
    visible_pairs,
)

MANIFEST_VERSION = 1
MANIFEST_FILENAME = "manifest.json"


class WeightFormatError(ValueError):
    """Manifest or tensor data violates the weight format contract."""


class ManifestVersionError(WeightFormatError):
    pass


class MissingTensorError(WeightFormatError):
    pass


class TensorShapeError(WeightFormatError):
    pass


_ACTIVATIONS = ("gelu", "silu")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_ff: int
    vocab_size: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    activation: str = "gelu"
    mlp_gated: bool = False
    attn_bias: bool = False
    mlp_bias: bool = False
    tokenizer_id: str = ""

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_ff", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        self.rope  # validates even d_head and base range

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.d_head, self.rope_base)

    @property
    def attn_width(self) -> int:
        return self.n_heads * self.d_head

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise WeightFormatError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise WeightFormatError(f"bad config block: {exc}") from exc


def expected_tensors(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every tensor the forward pass needs, with its required shape."""
    dm, w, ff = config.d_model, config.attn_width, config.d_ff
    out: list[tuple[str, tuple[int, ...]]] = [("embed.weight", (config.vocab_size, dm))]
    for i in range(config.n_layers):
        p = f"layers.{i}"
        out.append((f"{p}.attn_norm.gain", (dm,)))
        out.extend(
            (f"{p}.attn.{name}.weight", shape)
            for name, shape in (("wq", (dm, w)), ("wk", (dm, w)), ("wv", (dm, w)), ("wo", (w, dm)))
        )
        if config.attn_bias:
            out.extend(
                (f"{p}.attn.{name}.bias", shape)
                for name, shape in (("wq", (w,)), ("wk", (w,)), ("wv", (w,)), ("wo", (dm,)))
            )
        out.append((f"{p}.mlp_norm.gain", (dm,)))
        if config.mlp_gated:
            out.append((f"{p}.mlp.w_gate.weight", (dm, ff)))
        out.append((f"{p}.mlp.w_in.weight", (dm, ff)))
        out.append((f"{p}.mlp.w_out.weight", (ff, dm)))
        if config.mlp_bias:
            if config.mlp_gated:
                out.append((f"{p}.mlp.w_gate.bias", (ff,)))
            out.append((f"{p}.mlp.w_in.bias", (ff,)))
            out.append((f"{p}.mlp.w_out.bias", (dm,)))
    out.append(("final_norm.gain", (dm,)))
    out.append(("lm_head.weight", (config.vocab_size, dm)))
    return out


def fingerprint_weights(config: ModelConfig, params: dict[str, Array]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(config.to_dict(), sort_keys=True).encode("utf-8"))
    for name in sorted(params):
        arr = params[name]
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Array]
    fingerprint: str = ""

    def __post_init__(self) -> None:
        expected = dict(expected_tensors(self.config))
        for name, shape in expected.items():
            if name not in self.params:
                raise MissingTensorError(f"missing tensor: {name}")
            got = self.params[name].shape
            if tuple(got) != shape:
                raise TensorShapeError(f"{name}: shape {got}, expected {shape}")
            if self.params[name].dtype != np.float32:
                raise TensorShapeError(f"{name}: dtype {self.params[name].dtype}, expected float32")
        extra = set(self.params) - set(expected)
        if extra:
            raise WeightFormatError(f"unexpected tensors: {sorted(extra)}")
        if not self.fingerprint:
            self.fingerprint = fingerprint_weights(self.config, self.params)


def param_count(model: Model) -> int:
    return sum(arr.size for arr in model.params.values())


def init_model(config: ModelConfig, seed: int) -> Model:
    """Seeded Gaussian initialization, deterministic for a given seed.

    Weights draw N(0, 1/fan_in); the embedding draws N(0, 1); norm gains
    start at 1 and biases at 0. Tensors are generated in expected_tensors
    order, so the same seed always produces the same model.
    """
    rng = np.random.default_rng(seed)
    dm, w, ff = config.d_model, config.attn_width, config.d_ff
    scales = {"wq": dm, "wk": dm, "wv": dm, "wo": w, "w_gate": dm, "w_in": dm, "w_out": ff}
    params: dict[str, Array] = {}
    for name, shape in expected_tensors(config):
        leaf = name.split(".")[-2] if name.count(".") >= 2 else name.split(".")[0]
        if name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name == "embed.weight":
            params[name] = rng.normal(0.0, 1.0, shape).astype(np.float32)
        elif name == "lm_head.weight":
            params[name] = rng.normal(0.0, dm**-0.5, shape).astype(np.float32)
        else:
            params[name] = rng.normal(0.0, scales[leaf] ** -0.5, shape).astype(np.float32)
    return Model(config=config, params=params)


def save_weights(model: Model, out_dir) -> Path:
    """Write a weight manifest directory; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    table = []
    for name, shape in expected_tensors(model.config):
        raw = np.ascontiguousarray(model.params[name], dtype="<f4").tobytes()
        table.append(
            {
                "name": name,
                "shape": list(shape),
                "dtype": "f32",
                "file": "weights.bin",
                "offset": len(blob),
                "size": len(raw),
            }
        )
        blob += raw
    (out / "weights.bin").write_bytes(bytes(blob))
    manifest = {
        "format_version": MANIFEST_VERSION,
        "config": model.config.to_dict(),
        "tensors": table,
        "source_digest": model.fingerprint,
    }
    path = out / MANIFEST_FILENAME
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_weights(manifest_path) -> Model:
    """Load a manifest directory (or a manifest.json path) into a Model."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_FILENAME
    if not path.exists():
        raise MissingTensorError(f"no manifest at {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise WeightFormatError(f"unreadable manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != MANIFEST_VERSION:
        raise ManifestVersionError(
            f"manifest format_version {version}, expected {MANIFEST_VERSION}"
        )
    config = ModelConfig.from_dict(manifest.get("config", {}))
    table = {entry["name"]: entry for entry in manifest.get("tensors", [])}

    blobs: dict[str, bytes] = {}
    params: dict[str, Array] = {}
    for name, shape in expected_tensors(config):
        entry = table.pop(name, None)
        if entry is None:
            raise MissingTensorError(f"missing tensor: {name}")
        if tuple(entry["shape"]) != shape:
            raise TensorShapeError(
                f"{name}: manifest shape {tuple(entry['shape'])}, expected {shape}"
            )
        if entry.get("dtype") != "f32":
            raise TensorShapeError(f"{name}: dtype {entry.get('dtype')!r}, expected 'f32'")
        fname = entry["file"]
        if fname not in blobs:
            fpath = path.parent / fname
            if not fpath.exists():
                raise MissingTensorError(f"tensor file missing: {fpath}")
            blobs[fname] = fpath.read_bytes()
        size = int(np.prod(shape)) * 4
        if entry["size"] != size:
            raise TensorShapeError(f"{name}: size {entry['size']} bytes, expected {size}")
        start = entry["offset"]
        raw = blobs[fname][start : start + size]
        if len(raw) != size:
            raise WeightFormatError(f"{name}: tensor file truncated")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if table:
        raise WeightFormatError(f"unexpected tensors in manifest: {sorted(table)}")
    return Model(config=config, params=params)


# --- forward machinery ------------------------------------------------------


@dataclass
class LayerCache:
    """Plain forward cache: keys position-free, one bank per layer."""

    keys: list[Array]
    values: list[Array]
    token_ids: list[int]

    KEYS_ROTATED = False

    @property
    def n_rows(self) -> int:
        return self.keys[0].shape[0]

    def attention_banks(
        self, rope: RopeParams, trace: PipelineTrace | None = None, stage: str = "decode"
    ) -> list[tuple[Array, Array]]:
        pos = np.arange(self.n_rows, dtype=np.int64)
        banks = []
        for k, v in zip(self.keys, self.values):
            banks.append((rope_apply(k, pos, rope), v))
            if trace is not None:
                trace.rope(stage, self.n_rows * k.shape[1], k.shape[2])
        return banks


@dataclass
class AttentionMaps:
    """Captured per-layer attention weights, each (heads, queries, keys)."""

    layers: list[Array]

    def last_row(self, layer: int) -> Array:
        """Head-averaged attention distribution of the final query row."""
        return self.layers[layer].mean(axis=0)[-1]


@dataclass
class PrefillResult:
    cache: LayerCache
    logits: Array
    maps: AttentionMaps | None = None


def _activation(config: ModelConfig, x: Array) -> Array:
    if config.activation == "silu":
        return x / (np.float32(1.0) + np.exp(-x))
    # tanh-form gelu
    c = np.float32(math.sqrt(2.0 / math.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def attention_qkv(
    model: Model,
    layer: int,
    h: Array,
    trace: PipelineTrace | None = None,
    stage: str = "decode",
) -> tuple[Array, Array, Array]:
    """Normed q/k/v projections for one layer, each (rows, heads, d_head).

    Exposed as a building block so baseline selectors can recompute exactly
    the projections the prefill produced, bit for bit.
    """
    cfg = model.config
    p = model.params
    m = h.shape[0]
    x = rms_norm(h, p[f"layers.{layer}.attn_norm.gain"], cfg.norm_eps)
    out = []
    for name in ("wq", "wk", "wv"):
        y = x @ p[f"layers.{layer}.attn.{name}.weight"]
        if cfg.attn_bias:
            y = y + p[f"layers.{layer}.attn.{name}.bias"]
        if trace is not None:
            trace.matmul(stage, m, cfg.d_model, cfg.attn_width)
        out.append(y.reshape(m, cfg.n_heads, cfg.d_head))
    return out[0], out[1], out[2]


def value_projection(
    model: Model,
    layer: int,
    h: Array,
    trace: PipelineTrace | None = None,
    stage: str = "decode",
) -> Array:
    """Just the normed value projection of one layer, (rows, heads, d_head).

    Runs the identical operations attention_qkv runs for its value output,
    so the result matches a prefill's cached values bit for bit given the
    same hidden states.
    """
    cfg = model.config
    p = model.params
    m = h.shape[0]
    x = rms_norm(h, p[f"layers.{layer}.attn_norm.gain"], cfg.norm_eps)
    v = x @ p[f"layers.{layer}.attn.wv.weight"]
    if cfg.attn_bias:
        v = v + p[f"layers.{layer}.attn.wv.bias"]
    if trace is not None:
        trace.matmul(stage, m, cfg.d_model, cfg.attn_width)
    return v.reshape(m, cfg.n_heads, cfg.d_head)


def _attn_project_out(
    model: Model, layer: int, ctx: Array, trace: PipelineTrace | None, stage: str
) -> Array:
    cfg = model.config
    p = model.params
    m = ctx.shape[0]
    y = ctx.reshape(m, cfg.attn_width) @ p[f"layers.{layer}.attn.wo.weight"]
    if cfg.attn_bias:
        y = y + p[f"layers.{layer}.attn.wo.bias"]
    if trace is not None:
        trace.matmul(stage, m, cfg.attn_width, cfg.d_model)
    return y


def _mlp(
    model: Model, layer: int, h: Array, trace: PipelineTrace | None, stage: str
) -> Array:
    cfg = model.config
    p = model.params
    m = h.shape[0]
    x = rms_norm(h, p[f"layers.{layer}.mlp_norm.gain"], cfg.norm_eps)
    up = x @ p[f"layers.{layer}.mlp.w_in.weight"]
    if cfg.mlp_bias:
        up = up + p[f"layers.{layer}.mlp.w_in.bias"]
    if trace is not None:
        trace.matmul(stage, m, cfg.d_model, cfg.d_ff)
    if cfg.mlp_gated:
        gate = x @ p[f"layers.{layer}.mlp.w_gate.weight"]
        if cfg.mlp_bias:
            gate = gate + p[f"layers.{layer}.mlp.w_gate.bias"]
        if trace is not None:
            trace.matmul(stage, m, cfg.d_model, cfg.d_ff)
        hidden = _activation(cfg, gate) * up
    else:
        hidden = _activation(cfg, up)
    y = hidden @ p[f"layers.{layer}.mlp.w_out.weight"]
    if cfg.mlp_bias:
        y = y + p[f"layers.{layer}.mlp.w_out.bias"]
    if trace is not None:
        trace.matmul(stage, m, cfg.d_ff, cfg.d_model)
    return y


def layer_forward(
    model: Model,
    layer: int,
    h: Array,
    positions: Array,
    past: tuple[Array, Array] | None = None,
    *,
    knobs: tuple[float, float] | None = None,
    capture: bool = False,
    trace: PipelineTrace | None = None,
    stage: str = "decode",
) -> tuple[Array, Array, Array, Array, Array | None]:
    """One transformer block over m new rows against an optional past bank.

    past, when given, is (rotated keys, values) of shape (n_past, heads,
    d_head) each. knobs is a (temperature, scale) pair applied to this
    block's attention; None means neutral. Returns the new hidden states,
    the position-free keys, the rotated keys, the values, and the captured
    attention weights (or None).
    """
    cfg = model.config
    m = h.shape[0]
    q, k, v = attention_qkv(model, layer, h, trace, stage)
    q_rot = rope_apply(q, positions, cfg.rope)
    k_rot = rope_apply(k, positions, cfg.rope)
    if trace is not None:
        trace.rope(stage, 2 * m * cfg.n_heads, cfg.d_head)
    if past is not None:
        bank_k = np.concatenate([past[0], k_rot], axis=0)
        bank_v = np.concatenate([past[1], v], axis=0)
    else:
        bank_k, bank_v = k_rot, v
    n_past = bank_k.shape[0] - m
    temperature, scale = knobs if knobs is not None else (1.0, 1.0)
    ctx, weights = causal_attention(
        q_rot.transpose(1, 0, 2),
        bank_k.transpose(1, 0, 2),
        bank_v.transpose(1, 0, 2),
        temperature=temperature,
        scale=scale,
        mask_offset=n_past,
    )
    if trace is not None:
        trace.attention(stage, cfg.n_heads * visible_pairs(m, n_past), cfg.d_head, cfg.d_head)
    h = h + _attn_project_out(model, layer, ctx.transpose(1, 0, 2), trace, stage)
    h = h + _mlp(model, layer, h, trace, stage)
    return h, k, k_rot, v, (weights if capture else None)


def _embed(model: Model, token_ids: Sequence[int]) -> Array:
    ids = np.asarray(list(token_ids), dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise ValueError(
            f"token id outside vocab of size {model.config.vocab_size}"
        )
    return model.params["embed.weight"][ids]


def _final_logits(
    model: Model, h: Array, trace: PipelineTrace | None, stage: str
) -> Array:
    cfg = model.config
    x = rms_norm(h[-1:], model.params["final_norm.gain"], cfg.norm_eps)
    logits = (x @ model.params["lm_head.weight"].T)[0]
    if trace is not None:
        trace.matmul(stage, 1, cfg.d_model, cfg.vocab_size)
    return logits


def prefill_full(
    model: Model,
    token_ids: Sequence[int],
    *,
    capture_maps: bool = False,
    trace: PipelineTrace | None = None,
    stage: str = "decode",
) -> PrefillResult:
    """Causal forward over the whole sequence at positions 0..n-1.

    Returns the final-position logits, a position-free layer cache, and the
    per-layer attention maps when capture_maps is set.
    """
    h = _embed(model, token_ids)
    positions = np.arange(h.shape[0], dtype=np.int64)
    keys: list[Array] = []
    values: list[Array] = []
    maps: list[Array] = []
    for layer in range(model.config.n_layers):
        h, k, _, v, w = layer_forward(
            model, layer, h, positions, None,
            capture=capture_maps, trace=trace, stage=stage,
        )
        keys.append(k)
        values.append(v)
        if capture_maps:
            maps.append(w)
    logits = _final_logits(model, h, trace, stage)
    cache = LayerCache(keys=keys, values=values, token_ids=list(token_ids))
    return PrefillResult(cache, logits, AttentionMaps(maps) if capture_maps else None)


def prefill_chunk(
    model: Model,
    prefix_ids: Sequence[int],
    chunk_ids: Sequence[int],
    *,
    trace: PipelineTrace | None = None,
) -> ChunkCache:
    """Precompute one chunk behind the shared prefix, at local positions.

    The cache stores position-free keys, the prefix length (the dedup
    boundary for the merge), and enough identity to check consistency
    later: token ids, tokenizer id, model fingerprint.
    """
    prefix_ids = list(prefix_ids)
    chunk_ids = list(chunk_ids)
    if not chunk_ids:
        raise ValueError("chunk must contain at least one token")
    result = prefill_full(
        model, prefix_ids + chunk_ids, trace=trace, stage="chunk_precompute"
    )
    return ChunkCache(
        keys=result.cache.keys,
        values=result.cache.values,
        token_ids=prefix_ids + chunk_ids,
        prefix_len=len(prefix_ids),
        tokenizer_id=model.config.tokenizer_id,
        model_fingerprint=model.fingerprint,
    )


def _forward_against_cache(
    model: Model,
    cache,
    token_ids: Sequence[int],
    *,
    append: bool,
    knobs: tuple[float, float] | None,
    capture_maps: bool,
    trace: PipelineTrace | None,
    stage: str,
) -> tuple[Array, AttentionMaps | None]:
    if getattr(cache, "model_fingerprint", model.fingerprint) != model.fingerprint:
        raise ValueError("cache was built by a different model")
    banks = cache.attention_banks(model.config.rope, trace=trace, stage=stage)
    if len(banks) != model.config.n_layers:
        raise DimensionError(
            f"cache has {len(banks)} layers, model has {model.config.n_layers}"
        )
    n_past = cache.n_rows
    h = _embed(model, token_ids)
    positions = np.arange(n_past, n_past + h.shape[0], dtype=np.int64)
    maps: list[Array] = []
    for layer in range(model.config.n_layers):
        h, k, k_rot, v, w = layer_forward(
            model, layer, h, positions, banks[layer],
            knobs=knobs, capture=capture_maps, trace=trace, stage=stage,
        )
        if capture_maps:
            maps.append(w)
        if append:
            cache.keys[layer] = np.concatenate(
                [cache.keys[layer], k_rot if cache.KEYS_ROTATED else k], axis=0
            )
            cache.values[layer] = np.concatenate([cache.values[layer], v], axis=0)
    if append:
        cache.token_ids.extend(int(t) for t in token_ids)
        if isinstance(cache, MergedCache):
            cache.source.extend((-1, n_past + i) for i in range(len(token_ids)))
    logits = _final_logits(model, h, trace, stage)
    return logits, AttentionMaps(maps) if capture_maps else None


def extend_cache(
    model: Model,
    cache,
    token_ids: Sequence[int],
    *,
    knobs: tuple[float, float] | None = None,
    capture_maps: bool = False,
    trace: PipelineTrace | None = None,
    stage: str = "decode",
) -> tuple[Array, AttentionMaps | None]:
    """Append token rows to a cache and return the final-position logits.

    Rows land at the positions continuing the cache (positions are always
    contiguous 0..L-1). knobs sharpens or flattens the appended rows'
    attention; the cached rows are untouched.
    """
    return _forward_against_cache(
        model, cache, token_ids,
        append=True, knobs=knobs, capture_maps=capture_maps, trace=trace, stage=stage,
    )


def peek_forward(
    model: Model,
    cache,
    token_ids: Sequence[int],
    *,
    knobs: tuple[float, float] | None = None,
    capture_maps: bool = False,
    trace: PipelineTrace | None = None,
    stage: str = "decode",
) -> tuple[Array, AttentionMaps | None]:
    """Like extend_cache but leaves the cache untouched."""
    return _forward_against_cache(
        model, cache, token_ids,
        append=False, knobs=knobs, capture_maps=capture_maps, trace=trace, stage=stage,
    )


def decode_step(
    model: Model,
    cache,
    token_id: int,
    position: int | None = None,
) -> tuple[Array, object]:
    """Process one token against the cache; returns (logits, same cache).

    Positions are contiguous by construction, so the only admissible
    position is the current cache length; passing anything else raises.
    """
    expected = cache.n_rows
    if position is not None and position != expected:
        raise ValueError(
            f"non-contiguous position {position}; cache continues at {expected}"
        )
    logits, _ = extend_cache(model, cache, [token_id])
    return logits, cache


def selective_forward(
    model: Model,
    cache: MergedCache,
    selection,
    *,
    trace: PipelineTrace | None = None,
    stage: str = "recompute",
) -> MergedCache:
    """Recompute the selected rows' K/V with merged (global) context.

    selection is a SelectionPlan or any object with an ``indices``
    attribute, or a bare index sequence. Per layer, the selected rows'
    fresh keys and values are written into the cache bank first and the
    batched attention then reads that hybrid bank with per-row causal
    limits, so selected rows see fresh state for everything at or before
    their own position and cached state beyond it. Unselected rows are
    never touched; with every chunk row selected this reproduces full
    attention. The empty selection is a no-op.
    """
    indices = getattr(selection, "indices", selection)
    idx = np.asarray(sorted(int(i) for i in indices), dtype=np.int64)
    if idx.size == 0:
        return cache
    if len(np.unique(idx)) != idx.size:
        raise ValueError("selection contains duplicate indices")
    sink = cache.layout.sink_len
    total = cache.layout.total
    if idx[0] < sink:
        raise ValueError(
            f"selection index {idx[0]} inside the retained shared prefix (< {sink})"
        )
    if idx[-1] >= total:
        raise ValueError(f"selection index {int(idx[-1])} out of range (>= {total})")

    cfg = model.config
    h = _embed(model, [cache.token_ids[i] for i in idx])
    positions = idx
    m = idx.size
    for layer in range(cfg.n_layers):
        q, k, v = attention_qkv(model, layer, h, trace, stage)
        q_rot = rope_apply(q, positions, cfg.rope)
        k_rot = rope_apply(k, positions, cfg.rope)
        if trace is not None:
            trace.rope(stage, 2 * m * cfg.n_heads, cfg.d_head)
        cache.keys[layer][idx] = k_rot
        cache.values[layer][idx] = v
        ctx, _ = causal_attention(
            q_rot.transpose(1, 0, 2),
            cache.keys[layer].transpose(1, 0, 2),
            cache.values[layer].transpose(1, 0, 2),
            row_limits=idx + 1,
        )
        if trace is not None:
            trace.attention(
                stage, cfg.n_heads * int(np.sum(idx + 1)), cfg.d_head, cfg.d_head
            )
        h = h + _attn_project_out(model, layer, ctx.transpose(1, 0, 2), trace, stage)
        h = h + _mlp(model, layer, h, trace, stage)
    cache.recomputed_rows = tuple(int(i) for i in idx)
    return cache
