"""Map HF llama-style checkpoints onto the engine weight-manifest format.

The output directory holds manifest.json plus a raw float32 blob, laid out
exactly as docs/weight_manifest.md in the engine repo documents: projection
weights input-major (activations multiply as x @ W), rotary features in
adjacent pairs. HF stores projections output-major and splits each head's
rotary features into halves, so weights transpose and the q/k output
channels are permuted so that engine channel 2i carries source channel i
and 2i+1 carries i + d_head/2 of the same head. The permutation is applied
to both q and k (and their biases), which leaves attention scores unchanged
while converting half-split rotation into adjacent-pair rotation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .reader import SourceCheckpoint, UnsupportedCheckpointError, read_checkpoint

MANIFEST_VERSION = 1
MANIFEST_FILENAME = "manifest.json"
WEIGHTS_FILENAME = "weights.bin"
VOCAB_FILENAME = "vocab.txt"

# tokens with no usable standalone surface form (empty decode, embedded
# newline, or a collision) get a private-use sentinel so the vocab file
# keeps line = id while staying loadable
_SENTINEL = ""


@dataclass(frozen=True)
class Manifest:
    """What convert_checkpoint wrote: the manifest body plus file locations."""

    path: Path
    config: dict
    tensors: tuple[dict, ...]
    source_digest: str
    conversion: dict
    vocab_path: Path | None


def _rope_permutation(n_heads: int, d_head: int) -> np.ndarray:
    half = d_head // 2
    perm = np.empty(n_heads * d_head, dtype=np.int64)
    for h in range(n_heads):
        base = h * d_head
        for i in range(half):
            perm[base + 2 * i] = base + i
            perm[base + 2 * i + 1] = base + half + i
    return perm


def _tensor_plan(ckpt: SourceCheckpoint) -> list[tuple[str, str, tuple[int, ...], str]]:
    """(engine name, source name, source shape, transform) for every tensor."""
    c = ckpt.config
    w = c.n_heads * c.d_head
    dm, ff, v = c.d_model, c.d_ff, c.vocab_size
    plan: list[tuple[str, str, tuple[int, ...], str]] = [
        ("embed.weight", "model.embed_tokens.weight", (v, dm), "copy")
    ]
    for i in range(c.n_layers):
        src = f"model.layers.{i}"
        dst = f"layers.{i}"
        plan.append((f"{dst}.attn_norm.gain", f"{src}.input_layernorm.weight", (dm,), "copy"))
        plan.append((f"{dst}.attn.wq.weight", f"{src}.self_attn.q_proj.weight", (w, dm), "perm_t"))
        plan.append((f"{dst}.attn.wk.weight", f"{src}.self_attn.k_proj.weight", (w, dm), "perm_t"))
        plan.append((f"{dst}.attn.wv.weight", f"{src}.self_attn.v_proj.weight", (w, dm), "t"))
        plan.append((f"{dst}.attn.wo.weight", f"{src}.self_attn.o_proj.weight", (dm, w), "t"))
        if c.attn_bias:
            plan.append((f"{dst}.attn.wq.bias", f"{src}.self_attn.q_proj.bias", (w,), "perm"))
            plan.append((f"{dst}.attn.wk.bias", f"{src}.self_attn.k_proj.bias", (w,), "perm"))
            plan.append((f"{dst}.attn.wv.bias", f"{src}.self_attn.v_proj.bias", (w,), "copy"))
            plan.append((f"{dst}.attn.wo.bias", f"{src}.self_attn.o_proj.bias", (dm,), "copy"))
        plan.append((f"{dst}.mlp_norm.gain", f"{src}.post_attention_layernorm.weight", (dm,), "copy"))
        plan.append((f"{dst}.mlp.w_gate.weight", f"{src}.mlp.gate_proj.weight", (ff, dm), "t"))
        plan.append((f"{dst}.mlp.w_in.weight", f"{src}.mlp.up_proj.weight", (ff, dm), "t"))
        plan.append((f"{dst}.mlp.w_out.weight", f"{src}.mlp.down_proj.weight", (dm, ff), "t"))
        if c.mlp_bias:
            plan.append((f"{dst}.mlp.w_gate.bias", f"{src}.mlp.gate_proj.bias", (ff,), "copy"))
            plan.append((f"{dst}.mlp.w_in.bias", f"{src}.mlp.up_proj.bias", (ff,), "copy"))
            plan.append((f"{dst}.mlp.w_out.bias", f"{src}.mlp.down_proj.bias", (dm,), "copy"))
    plan.append(("final_norm.gain", "model.norm.weight", (dm,), "copy"))
    lm_src = "model.embed_tokens.weight" if c.tied_lm_head else "lm_head.weight"
    plan.append(("lm_head.weight", lm_src, (v, dm), "copy"))
    return plan


def _mapped_tensor(
    ckpt: SourceCheckpoint, source: str, shape: tuple[int, ...], transform: str, perm: np.ndarray
) -> np.ndarray:
    if source not in ckpt.tensors:
        raise UnsupportedCheckpointError(f"checkpoint is missing tensor {source}")
    arr = ckpt.tensors[source]
    if tuple(arr.shape) != shape:
        raise UnsupportedCheckpointError(
            f"{source}: shape {tuple(arr.shape)}, expected {shape}"
        )
    if transform == "perm_t":
        arr = arr[perm, :].T
    elif transform == "t":
        arr = arr.T
    elif transform == "perm":
        arr = arr[perm]
    return np.ascontiguousarray(arr, dtype="<f4")


def _tokenizer_id(tokenizer_file: Path | None) -> str:
    if tokenizer_file is None:
        return ""
    return "hf-" + hashlib.sha256(tokenizer_file.read_bytes()).hexdigest()[:12]


def export_vocab(tokenizer_json_path, out_path) -> int:
    """Write the tokenizer's per-id surface strings, one per line, line = id.

    Greedy matching over these entries approximates the source tokenizer on
    plain text; fixture token ids stay the authority for numerics. Entries
    that decode empty, contain a newline, or collide with an earlier line
    are replaced by a sentinel unique to their id.
    """
    from tokenizers import Tokenizer

    tok = Tokenizer.from_file(str(tokenizer_json_path))
    n = tok.get_vocab_size(with_added_tokens=True)
    seen: set[str] = set()
    lines: list[str] = []
    for i in range(n):
        s = tok.decode([i], skip_special_tokens=False)
        if not s or "\n" in s or s in seen:
            s = _SENTINEL + format(i, "x")
        seen.add(s)
        lines.append(s)
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")
    return n


def convert_checkpoint(src_path, out_dir, *, export_tokenizer_vocab: bool = True) -> Manifest:
    """Convert one checkpoint directory into a weight-manifest directory.

    Lossless for float32 sources; lower-precision sources upcast to float32
    with the original dtype mix recorded in the manifest's conversion block.
    """
    ckpt = read_checkpoint(src_path)
    c = ckpt.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    perm = _rope_permutation(c.n_heads, c.d_head)
    plan = _tensor_plan(ckpt)
    consumed = {source for _, source, _, _ in plan}

    blob = bytearray()
    table: list[dict] = []
    for name, source, shape, transform in plan:
        arr = _mapped_tensor(ckpt, source, shape, transform, perm)
        raw = arr.tobytes()
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "file": WEIGHTS_FILENAME,
                "offset": len(blob),
                "size": len(raw),
            }
        )
        blob += raw
    (out / WEIGHTS_FILENAME).write_bytes(bytes(blob))

    vocab_path: Path | None = None
    if export_tokenizer_vocab and ckpt.tokenizer_file is not None:
        vocab_path = out / VOCAB_FILENAME
        export_vocab(ckpt.tokenizer_file, vocab_path)

    config = {
        "n_layers": c.n_layers,
        "n_heads": c.n_heads,
        "d_model": c.d_model,
        "d_head": c.d_head,
        "d_ff": c.d_ff,
        "vocab_size": c.vocab_size,
        "rope_base": c.rope_base,
        "norm_eps": c.norm_eps,
        "activation": c.activation,
        "mlp_gated": True,
        "attn_bias": c.attn_bias,
        "mlp_bias": c.mlp_bias,
        "tokenizer_id": _tokenizer_id(ckpt.tokenizer_file),
    }
    conversion = {
        "tool": "model-import",
        "source_architecture": c.architecture,
        "source_dtypes": dict(sorted(ckpt.source_dtypes.items())),
        "rope": "half-split channels permuted to adjacent pairs",
        "tied_lm_head": c.tied_lm_head,
        "ignored_tensors": sorted(set(ckpt.tensors) - consumed),
        "vocab_file": vocab_path.name if vocab_path else None,
    }
    manifest = {
        "format_version": MANIFEST_VERSION,
        "config": config,
        "tensors": table,
        "source_digest": ckpt.digest,
        "conversion": conversion,
    }
    path = out / MANIFEST_FILENAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Manifest(
        path=path,
        config=config,
        tensors=tuple(table),
        source_digest=ckpt.digest,
        conversion=conversion,
        vocab_path=vocab_path,
    )
