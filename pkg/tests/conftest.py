import numpy as np
import pytest

from cacheclip import (
    aux_preset_model,
    aux_preset_tokenizer,
    prefill_chunk,
    primary_preset_model,
    primary_preset_tokenizer,
)

SMALL_PREFIX = "Answer the question using the documents."
SMALL_TEXTS = (
    "The grass is green. The sky is blue. The quiet harbor watched the bright meadow.",
    "One of the special magic numbers for the quiet harbor is 7612058. The sun is yellow.",
    "The golden temple guarded the misty orchard. Here we go. There and back again.",
)
SMALL_QUERY = "What is the special magic number for the quiet harbor?"


@pytest.fixture(scope="session")
def primary_model():
    return primary_preset_model()


@pytest.fixture(scope="session")
def aux_model():
    return aux_preset_model()


@pytest.fixture(scope="session")
def ptok():
    return primary_preset_tokenizer()


@pytest.fixture(scope="session")
def atok():
    return aux_preset_tokenizer()


class SmallContext:
    """Shared three-chunk scenario; chunk caches are treated as read-only."""

    def __init__(self, primary_model, aux_model, ptok, atok):
        self.prefix = SMALL_PREFIX
        self.texts = SMALL_TEXTS
        self.query = SMALL_QUERY
        self.prefix_ids = ptok.encode(SMALL_PREFIX)
        self.chunk_ids = [ptok.encode(t) for t in SMALL_TEXTS]
        self.query_ids = ptok.encode(SMALL_QUERY)
        self.chunks = [
            prefill_chunk(primary_model, self.prefix_ids, ids) for ids in self.chunk_ids
        ]
        aux_prefix = atok.encode(SMALL_PREFIX)
        self.aux_chunks = [
            prefill_chunk(aux_model, aux_prefix, atok.encode(t)) for t in SMALL_TEXTS
        ]
        cb_ids = [self.prefix_ids + self.chunk_ids[0]] + self.chunk_ids[1:]
        self.cb_chunks = [prefill_chunk(primary_model, [], ids) for ids in cb_ids]
        self.full_ids = self.prefix_ids + [t for ids in self.chunk_ids for t in ids]
        self.full_ids = self.full_ids + self.query_ids


@pytest.fixture(scope="session")
def small_ctx(primary_model, aux_model, ptok, atok):
    return SmallContext(primary_model, aux_model, ptok, atok)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
