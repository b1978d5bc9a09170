"""Ready-made desk-scale models paired with the builtin tokenizers.

The serving model is deliberately wider and deeper than the scoring model;
the scoring model only has to produce usable last-layer attention, so it
stays small enough to make the recompute savings visible in the reports.
"""

from __future__ import annotations

from .model import Model, ModelConfig, init_model
from .tokenizers import (
    AUX_TOKENIZER_ID,
    PRIMARY_TOKENIZER_ID,
    GreedyTokenizer,
    aux_toy_vocab,
    builtin_tokenizer,
    primary_toy_vocab,
)

PRIMARY_MODEL_SEED = 11
AUX_MODEL_SEED = 7


def primary_preset_config() -> ModelConfig:
    return ModelConfig(
        n_layers=3,
        n_heads=4,
        d_model=48,
        d_head=12,
        d_ff=96,
        vocab_size=len(primary_toy_vocab()),
        tokenizer_id=PRIMARY_TOKENIZER_ID,
    )


def aux_preset_config() -> ModelConfig:
    return ModelConfig(
        n_layers=2,
        n_heads=2,
        d_model=16,
        d_head=8,
        d_ff=32,
        vocab_size=len(aux_toy_vocab()),
        tokenizer_id=AUX_TOKENIZER_ID,
    )


def primary_preset_model(seed: int = PRIMARY_MODEL_SEED) -> Model:
    return init_model(primary_preset_config(), seed)


def aux_preset_model(seed: int = AUX_MODEL_SEED) -> Model:
    return init_model(aux_preset_config(), seed)


def primary_preset_tokenizer() -> GreedyTokenizer:
    return builtin_tokenizer(PRIMARY_TOKENIZER_ID)


def aux_preset_tokenizer() -> GreedyTokenizer:
    return builtin_tokenizer(AUX_TOKENIZER_ID)
