"""Synthesized HF-format checkpoints; the torch side is the reference."""

import json
from pathlib import Path

import pytest
import torch
from safetensors.torch import save_file
from tokenizers import Tokenizer, decoders, models, pre_tokenizers

import transformers

transformers.utils.logging.set_verbosity_error()
transformers.utils.logging.disable_progress_bar()

PROMPTS = [
    "Hello, world!",
    "The grass is green.",
    "One of the special magic numbers is 7612058.",
    "A quiet harbor watched the bright meadow.",
    "What is the capital of France?",
    "import numpy as np",
    "2 + 2 = 4, obviously.",
    "The quick brown fox jumps over the lazy dog",
    "never odd or even",
    "Rain fell on the tin roof all night.",
    "SELECT * FROM users WHERE id = 7;",
    "to be or not to be",
    "Der Zug kommt um sieben.",
    "pi is roughly 3.14159",
    "The library closes at nine on weekdays.",
    "x = f(g(h(y)))",
    "Seven ships sailed at dawn.",
    "error: file not found",
    "The answer is hidden in document three.",
    "abcdefghijklmnopqrstuvwxyz",
    "Once upon a time, in a small village,",
    "10 9 8 7 6 5 4 3 2 1 liftoff",
    "Every key fits exactly one lock.",
    "Good night, moon.",
]


def write_tokenizer(out_dir: Path) -> None:
    # byte-level BPE with the 256-byte alphabet and no merges: encodes
    # anything, deterministic file bytes
    alphabet = sorted(pre_tokenizers.ByteLevel.alphabet())
    vocab = {ch: i for i, ch in enumerate(alphabet)}
    tok = Tokenizer(models.BPE(vocab=vocab, merges=[]))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False, use_regex=True)
    tok.decoder = decoders.ByteLevel()
    tok.save(str(out_dir / "tokenizer.json"))


def write_checkpoint(
    out_dir: Path,
    *,
    n_layers: int,
    n_heads: int,
    head_dim: int,
    d_model: int,
    d_ff: int,
    vocab_size: int = 256,
    seed: int = 0,
    dtype=torch.float32,
    tie: bool = False,
    attn_bias: bool = False,
    mlp_bias: bool = False,
    hidden_act: str = "silu",
    with_tokenizer: bool = True,
    drop: tuple[str, ...] = (),
    config_overrides: dict | None = None,
) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {
        "architectures": ["LlamaForCausalLM"],
        "model_type": "llama",
        "hidden_size": d_model,
        "intermediate_size": d_ff,
        "num_hidden_layers": n_layers,
        "num_attention_heads": n_heads,
        "num_key_value_heads": n_heads,
        "head_dim": head_dim,
        "vocab_size": vocab_size,
        "max_position_embeddings": 2048,
        "rms_norm_eps": 1e-5,
        "rope_theta": 10000.0,
        "hidden_act": hidden_act,
        "tie_word_embeddings": tie,
        "attention_bias": attn_bias,
        "mlp_bias": mlp_bias,
        "torch_dtype": "bfloat16" if dtype == torch.bfloat16 else "float32",
    }
    config.update(config_overrides or {})
    (out_dir / "config.json").write_text(json.dumps(config, indent=2) + "\n")

    g = torch.Generator().manual_seed(seed)
    w = n_heads * head_dim

    def t(rows, cols, scale):
        return torch.randn(rows, cols, generator=g) * scale

    def gain(n):
        return torch.ones(n) + 0.1 * torch.randn(n, generator=g)

    def bias(n):
        return 0.05 * torch.randn(n, generator=g)

    sd = {"model.embed_tokens.weight": torch.randn(vocab_size, d_model, generator=g)}
    for i in range(n_layers):
        p = f"model.layers.{i}"
        sd[f"{p}.input_layernorm.weight"] = gain(d_model)
        sd[f"{p}.self_attn.q_proj.weight"] = t(w, d_model, d_model**-0.5)
        sd[f"{p}.self_attn.k_proj.weight"] = t(w, d_model, d_model**-0.5)
        sd[f"{p}.self_attn.v_proj.weight"] = t(w, d_model, d_model**-0.5)
        sd[f"{p}.self_attn.o_proj.weight"] = t(d_model, w, w**-0.5)
        if attn_bias:
            sd[f"{p}.self_attn.q_proj.bias"] = bias(w)
            sd[f"{p}.self_attn.k_proj.bias"] = bias(w)
            sd[f"{p}.self_attn.v_proj.bias"] = bias(w)
            sd[f"{p}.self_attn.o_proj.bias"] = bias(d_model)
        sd[f"{p}.post_attention_layernorm.weight"] = gain(d_model)
        sd[f"{p}.mlp.gate_proj.weight"] = t(d_ff, d_model, d_model**-0.5)
        sd[f"{p}.mlp.up_proj.weight"] = t(d_ff, d_model, d_model**-0.5)
        sd[f"{p}.mlp.down_proj.weight"] = t(d_model, d_ff, d_ff**-0.5)
        if mlp_bias:
            sd[f"{p}.mlp.gate_proj.bias"] = bias(d_ff)
            sd[f"{p}.mlp.up_proj.bias"] = bias(d_ff)
            sd[f"{p}.mlp.down_proj.bias"] = bias(d_model)
    sd["model.norm.weight"] = gain(d_model)
    if not tie:
        sd["lm_head.weight"] = t(vocab_size, d_model, d_model**-0.5)
    for name in drop:
        sd.pop(name, None)
    sd = {k: v.to(dtype) for k, v in sd.items()}
    save_file(sd, str(out_dir / "model.safetensors"), metadata={"format": "pt"})

    if with_tokenizer:
        write_tokenizer(out_dir)
    return out_dir


@pytest.fixture(scope="session")
def primary_ckpt(tmp_path_factory) -> Path:
    return write_checkpoint(
        tmp_path_factory.mktemp("ckpt-primary"),
        n_layers=3, n_heads=4, head_dim=12, d_model=48, d_ff=96, seed=5,
    )


@pytest.fixture(scope="session")
def aux_ckpt(tmp_path_factory) -> Path:
    return write_checkpoint(
        tmp_path_factory.mktemp("ckpt-aux"),
        n_layers=2, n_heads=2, head_dim=8, d_model=16, d_ff=32, seed=7,
    )


@pytest.fixture(scope="session")
def prompts() -> list[str]:
    return list(PROMPTS)


@pytest.fixture(scope="session")
def primary_fixtures(primary_ckpt, prompts) -> dict:
    from model_import import export_fixtures

    return export_fixtures(primary_ckpt, prompts)


@pytest.fixture()
def roundtrip_max_abs(tmp_path):
    """Convert src, run the engine on fixture ids, return worst |dlogits|."""

    def run(src_dir: Path, payload: dict) -> float:
        import numpy as np
        from cacheclip import load_weights, prefill_full
        from model_import import convert_checkpoint

        manifest = convert_checkpoint(src_dir, tmp_path / "converted")
        model = load_weights(manifest.path.parent)
        worst = 0.0
        for row in payload["prompts"]:
            res = prefill_full(model, row["token_ids"])
            diff = float(np.abs(res.logits - np.asarray(row["logits"], dtype=np.float32)).max())
            worst = max(worst, diff)
        return worst

    return run
