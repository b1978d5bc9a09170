"""Read and validate HF-format decoder checkpoints ahead of conversion.

A source checkpoint is a directory holding config.json plus safetensors
weights (single model.safetensors or a sharded set behind
model.safetensors.index.json), optionally with a tokenizer.json. Config
validation runs before any tensor bytes are touched, so unsupported
architectures fail fast with a diagnostic naming the offending component.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file

CONFIG_FILENAME = "config.json"
TOKENIZER_FILENAME = "tokenizer.json"
SUPPORTED_ARCHITECTURES = ("LlamaForCausalLM",)

# engine activation names, keyed by HF hidden_act; the engine's gelu is the
# tanh form, so erf-form "gelu" is rejected rather than silently approximated
_ACT_MAP = {"silu": "silu", "gelu_pytorch_tanh": "gelu"}

_DTYPE_NAMES = {
    torch.float32: "f32",
    torch.bfloat16: "bf16",
    torch.float16: "f16",
    torch.float64: "f64",
}


class UnsupportedCheckpointError(ValueError):
    """Checkpoint uses a feature the converter does not handle."""


@dataclass(frozen=True)
class SourceConfig:
    """Normalized view of config.json in engine vocabulary."""

    architecture: str
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_ff: int
    vocab_size: int
    rope_base: float
    norm_eps: float
    activation: str
    attn_bias: bool
    mlp_bias: bool
    tied_lm_head: bool


@dataclass
class SourceCheckpoint:
    path: Path
    config: SourceConfig
    tensors: dict[str, np.ndarray]
    source_dtypes: dict[str, int]
    digest: str
    tokenizer_file: Path | None


def _require(raw: dict, key: str):
    if key not in raw:
        raise UnsupportedCheckpointError(f"config.json missing required field {key!r}")
    return raw[key]


def read_config(src_path) -> SourceConfig:
    """Parse and validate config.json; raises before any tensor is read."""
    src = Path(src_path)
    cfg_path = src / CONFIG_FILENAME
    if not cfg_path.exists():
        raise UnsupportedCheckpointError(f"no {CONFIG_FILENAME} in {src}")
    try:
        raw = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UnsupportedCheckpointError(f"unreadable {CONFIG_FILENAME}: {exc}") from exc

    archs = raw.get("architectures") or []
    arch = archs[0] if archs else raw.get("model_type", "<unknown>")
    if arch not in SUPPORTED_ARCHITECTURES:
        raise UnsupportedCheckpointError(
            f"unsupported architecture {arch!r}; converter handles {SUPPORTED_ARCHITECTURES}"
        )

    n_heads = int(_require(raw, "num_attention_heads"))
    kv_heads = int(raw.get("num_key_value_heads") or n_heads)
    if kv_heads != n_heads:
        raise UnsupportedCheckpointError(
            f"grouped-query attention unsupported: "
            f"num_key_value_heads={kv_heads} != num_attention_heads={n_heads}"
        )
    if raw.get("rope_scaling") is not None:
        raise UnsupportedCheckpointError(
            f"rope_scaling unsupported: {raw['rope_scaling']!r}"
        )
    act = raw.get("hidden_act", "silu")
    if act not in _ACT_MAP:
        raise UnsupportedCheckpointError(
            f"hidden_act {act!r} unsupported; converter handles {sorted(_ACT_MAP)}"
        )

    d_model = int(_require(raw, "hidden_size"))
    head_dim = raw.get("head_dim")
    if head_dim is None:
        if d_model % n_heads != 0:
            raise UnsupportedCheckpointError(
                f"head_dim absent and hidden_size {d_model} not divisible "
                f"by num_attention_heads {n_heads}"
            )
        head_dim = d_model // n_heads
    head_dim = int(head_dim)
    if head_dim % 2 != 0:
        raise UnsupportedCheckpointError(
            f"head_dim {head_dim} is odd; rotary features rotate in pairs"
        )

    return SourceConfig(
        architecture=arch,
        n_layers=int(_require(raw, "num_hidden_layers")),
        n_heads=n_heads,
        d_model=d_model,
        d_head=head_dim,
        d_ff=int(_require(raw, "intermediate_size")),
        vocab_size=int(_require(raw, "vocab_size")),
        rope_base=float(raw.get("rope_theta", 10000.0)),
        norm_eps=float(raw.get("rms_norm_eps", 1e-6)),
        activation=_ACT_MAP[act],
        attn_bias=bool(raw.get("attention_bias", False)),
        mlp_bias=bool(raw.get("mlp_bias", False)),
        tied_lm_head=bool(raw.get("tie_word_embeddings", False)),
    )


def _weight_files(src: Path) -> list[Path]:
    index = src / "model.safetensors.index.json"
    if index.exists():
        weight_map = json.loads(index.read_text(encoding="utf-8"))["weight_map"]
        return [src / name for name in sorted(set(weight_map.values()))]
    single = src / "model.safetensors"
    if single.exists():
        return [single]
    raise UnsupportedCheckpointError(
        f"no model.safetensors or model.safetensors.index.json in {src}"
    )


def checkpoint_digest(src_path) -> str:
    """sha256 over config.json and every weight file; any byte change shows."""
    src = Path(src_path)
    h = hashlib.sha256()
    h.update((src / CONFIG_FILENAME).read_bytes())
    for f in _weight_files(src):
        h.update(f.name.encode("utf-8"))
        h.update(f.read_bytes())
    return h.hexdigest()


def tokenizer_file(src_path) -> Path | None:
    path = Path(src_path) / TOKENIZER_FILENAME
    return path if path.exists() else None


def read_checkpoint(src_path) -> SourceCheckpoint:
    """Load config, all weight tensors (upcast to float32), and the digest."""
    src = Path(src_path)
    config = read_config(src)
    tensors: dict[str, np.ndarray] = {}
    dtype_counts: dict[str, int] = {}
    for f in _weight_files(src):
        for name, t in load_file(str(f)).items():
            dname = _DTYPE_NAMES.get(t.dtype, str(t.dtype))
            dtype_counts[dname] = dtype_counts.get(dname, 0) + 1
            tensors[name] = t.to(torch.float32).numpy()
    return SourceCheckpoint(
        path=src,
        config=config,
        tensors=tensors,
        source_dtypes=dtype_counts,
        digest=checkpoint_digest(src),
        tokenizer_file=tokenizer_file(src),
    )
