"""Independent numerical fixtures for cross-validating converted weights.

The reference forward is the transformers eager implementation running the
unconverted checkpoint in float32, so fixture numbers never pass through
the conversion path they are meant to check. Per prompt the fixture records
the token ids, the final-position logits, the last layer's final-row
attention distribution per head, and a greedy continuation. Everything is
deterministic for a fixed checkpoint and prompt list, and the JSON is
written with sorted keys so repeated exports are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .reader import checkpoint_digest, read_config, tokenizer_file

FIXTURE_VERSION = 1
DEFAULT_GREEDY_LEN = 8


def _load_oracle(src_path):
    from tokenizers import Tokenizer
    from transformers import AutoModelForCausalLM

    tok_file = tokenizer_file(src_path)
    if tok_file is None:
        raise ValueError(f"no tokenizer.json in {src_path}; cannot encode prompts")
    tok = Tokenizer.from_file(str(tok_file))
    model = AutoModelForCausalLM.from_pretrained(
        str(src_path), dtype=torch.float32, attn_implementation="eager"
    )
    model.eval()
    return tok, model


def _greedy_ids(model, ids: list[int], steps: int) -> list[int]:
    out: list[int] = []
    current = list(ids)
    for _ in range(steps):
        logits = model(torch.tensor([current])).logits[0, -1]
        nxt = int(torch.argmax(logits))
        out.append(nxt)
        current.append(nxt)
    return out


def export_fixtures(src_path, prompts, *, greedy_len: int = DEFAULT_GREEDY_LEN) -> dict:
    """Run the reference forward over prompts; returns the fixture payload."""
    prompts = list(prompts)
    if not prompts:
        raise ValueError("no prompts")
    config = read_config(src_path)
    tok, model = _load_oracle(src_path)

    rows = []
    with torch.no_grad():
        for text in prompts:
            ids = tok.encode(text).ids
            if not ids:
                raise ValueError(f"tokenization produced no tokens for prompt {text!r}")
            out = model(torch.tensor([ids]), output_attentions=True)
            logits = out.logits[0, -1]
            # (heads, keys) distribution of the final query row, last layer
            attn = out.attentions[-1][0, :, -1, :]
            rows.append(
                {
                    "text": text,
                    "token_ids": [int(i) for i in ids],
                    "logits": [float(x) for x in logits],
                    "attention": [[float(x) for x in head] for head in attn],
                    "greedy_ids": _greedy_ids(model, list(ids), greedy_len),
                }
            )
    return {
        "format_version": FIXTURE_VERSION,
        "source_digest": checkpoint_digest(src_path),
        "model": {
            "n_layers": config.n_layers,
            "n_heads": config.n_heads,
            "vocab_size": config.vocab_size,
        },
        "greedy_len": greedy_len,
        "prompts": rows,
    }


def fixture_bytes(payload: dict) -> bytes:
    return (json.dumps(payload, indent=1, sort_keys=True) + "\n").encode("utf-8")


def write_fixtures(payload: dict, path) -> Path:
    p = Path(path)
    p.write_bytes(fixture_bytes(payload))
    return p


def read_prompts_file(path) -> list[str]:
    """One prompt per non-blank line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    prompts = [line for line in lines if line.strip()]
    if not prompts:
        raise ValueError(f"no prompts in {path}")
    return prompts
