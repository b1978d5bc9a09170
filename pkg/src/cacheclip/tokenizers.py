"""Greedy longest-match tokenizers with character offsets, plus alignment.

Vocab file format: newline-delimited UTF-8, one token string per line, token
id = zero-based line index. Tokens are non-empty and may not contain a
newline. Encoding walks the text left to right, always taking the longest
vocab entry that matches at the cursor, so every covered character belongs
to exactly one token and the spans tile the text. A useful consequence:
slicing a token sequence at token boundaries and re-encoding the decoded
slices reproduces the same tokens, which is what makes chunked text stable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence


class UnknownCharacterError(ValueError):
    """Text contains a character no vocab entry can cover."""


class VocabFormatError(ValueError):
    """Vocab list or file violates the format contract."""


class SpanCoverageError(ValueError):
    """Two span lists do not cover identical text extents."""


@dataclass(frozen=True)
class TokenSpan:
    token_id: int
    start: int
    end: int  # exclusive


class GreedyTokenizer:
    def __init__(self, vocab: Sequence[str], tokenizer_id: str = "") -> None:
        if not vocab:
            raise VocabFormatError("empty vocabulary")
        ids: dict[str, int] = {}
        for i, tok in enumerate(vocab):
            if not tok:
                raise VocabFormatError(f"empty token at index {i}")
            if "\n" in tok:
                raise VocabFormatError(f"token at index {i} contains a newline")
            if tok in ids:
                raise VocabFormatError(f"duplicate token {tok!r} at index {i}")
            ids[tok] = i
        self._vocab = list(vocab)
        self._ids = ids
        self._max_len = max(len(t) for t in vocab)
        self.tokenizer_id = tokenizer_id

    @property
    def vocab_size(self) -> int:
        return len(self._vocab)

    @property
    def vocab(self) -> list[str]:
        return list(self._vocab)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._vocab):
            raise ValueError(f"token id {token_id} out of range")
        return self._vocab[token_id]

    def encode_with_offsets(self, text: str) -> list[TokenSpan]:
        """Tokenize and return contiguous character spans.

        Spans start at 0, are adjacent (each starts where the previous
        ended), and end at len(text).
        """
        spans: list[TokenSpan] = []
        i = 0
        n = len(text)
        while i < n:
            for length in range(min(self._max_len, n - i), 0, -1):
                tid = self._ids.get(text[i : i + length])
                if tid is not None:
                    spans.append(TokenSpan(tid, i, i + length))
                    i += length
                    break
            else:
                raise UnknownCharacterError(
                    f"no vocab entry matches at offset {i}: {text[i]!r}"
                )
        return spans

    def encode(self, text: str) -> list[int]:
        return [s.token_id for s in self.encode_with_offsets(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.token(i) for i in ids)


def save_vocab(vocab: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        for tok in vocab:
            if not tok or "\n" in tok:
                raise VocabFormatError(f"token {tok!r} not representable in vocab file")
            f.write(tok + "\n")


def load_vocab(path) -> list[str]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        data = f.read()
    if not data:
        raise VocabFormatError(f"empty vocab file: {path}")
    if not data.endswith("\n"):
        raise VocabFormatError(f"vocab file missing trailing newline: {path}")
    lines = data.split("\n")[:-1]
    if any(not line for line in lines):
        raise VocabFormatError(f"vocab file has an empty line: {path}")
    return lines


def from_vocab_file(path, tokenizer_id: str | None = None) -> GreedyTokenizer:
    if tokenizer_id is None:
        tokenizer_id = os.path.splitext(os.path.basename(str(path)))[0]
    return GreedyTokenizer(load_vocab(path), tokenizer_id)


@dataclass(frozen=True)
class AlignmentMap:
    """For each source token, the destination tokens its characters touch."""

    images: tuple[tuple[int, ...], ...]

    def image(self, src_index: int) -> tuple[int, ...]:
        return self.images[src_index]

    def project(self, src_indices: Iterable[int]) -> list[int]:
        """Union of images, sorted and deduplicated."""
        out: set[int] = set()
        for i in src_indices:
            out.update(self.images[i])
        return sorted(out)


def _check_tiling(spans: Sequence[TokenSpan], label: str) -> int:
    cursor = 0
    for s in spans:
        if s.start != cursor or s.end <= s.start:
            raise SpanCoverageError(f"{label} spans do not tile the text at offset {cursor}")
        cursor = s.end
    return cursor


def align_spans(src: Sequence[TokenSpan], dst: Sequence[TokenSpan]) -> AlignmentMap:
    """Map source tokens to destination tokens by character-interval overlap.

    Both span lists must tile the same text extent. A source token maps to
    every destination token whose interval intersects its own, so one short
    token can map to a longer one and vice versa. Images are monotone:
    later source tokens never map to earlier destinations than earlier
    source tokens do.
    """
    src_total = _check_tiling(src, "source")
    dst_total = _check_tiling(dst, "destination")
    if src_total != dst_total:
        raise SpanCoverageError(
            f"covered lengths differ: source {src_total}, destination {dst_total}"
        )
    images: list[tuple[int, ...]] = []
    j = 0
    for s in src:
        while j < len(dst) and dst[j].end <= s.start:
            j += 1
        t = j
        img: list[int] = []
        while t < len(dst) and dst[t].start < s.end:
            img.append(t)
            t += 1
        images.append(tuple(img))
    return AlignmentMap(tuple(images))


# Built-in toy vocabularies. The primary one merges digit pairs and common
# word fragments; the auxiliary one keeps digits as single characters and
# merges a different fragment set, so the two segment the same text
# differently and the alignment step has real work to do.

_SINGLES = (
    [chr(c) for c in range(ord("a"), ord("z") + 1)]
    + [chr(c) for c in range(ord("A"), ord("Z") + 1)]
    + [str(d) for d in range(10)]
    + [" ", ".", ",", ":", ";", "?", "!", "'", '"', "(", ")", "-"]
)

_PRIMARY_MERGES = (
    [f"{a}{b}" for a in "0123456789" for b in "0123456789"]
    + [
        "th", "he", "in", "er", "an", "re", "on", "at", "en", "nd",
        "ti", "es", "or", "te", "of", "ed", "is", "it", "al", "ar",
        "st", "to", "nt", "ng", "se", "ha", "as", "ou", "io", "le",
        "ve", "co", "me", "de", "hi", "ri", "ro", "ic",
    ]
    + [
        "the", "ing", "and", "ion", "ent", "for", "her", "ter", "hat",
        "tha", "ere", "ate", "his", "con", "res", "ver", "all",
    ]
    + [
        " the", " and", " for", " are", " but", " not", " was", " one",
        " all", " out", " who", " get", " her", " his", " how", " its",
        " new", " now", " old", " see", " two", " way", " she", " use",
        " magic", " number", " numbers", " special", " grass", " green",
        " sky", " blue", " sun", " yellow", " here", " there", " back",
        " again", " what", " is", " of", " to", " in", " on", " at",
    ]
)

_AUX_MERGES = [
    "ea", "ai", "oo", "ee", "ou", "ie", "ue", "ui", "oa", "au",
    " t", " a", " s", " w", " m", " b", " c", " d", " f", " g",
    " h", " l", " n", " p", " r", " o", " e", " i", " u", " v",
    "ch", "sh", "wh", "ck", "ll", "ss", "ff", "gg", "tt", "pp",
]

PRIMARY_TOKENIZER_ID = "toy-primary-v1"
AUX_TOKENIZER_ID = "toy-aux-v1"


def primary_toy_vocab() -> list[str]:
    return list(_SINGLES) + list(_PRIMARY_MERGES)


def aux_toy_vocab() -> list[str]:
    return list(_SINGLES) + list(_AUX_MERGES)


_BUILTIN_VOCABS = {
    PRIMARY_TOKENIZER_ID: primary_toy_vocab,
    AUX_TOKENIZER_ID: aux_toy_vocab,
}


def builtin_tokenizer(tokenizer_id: str) -> GreedyTokenizer:
    try:
        factory = _BUILTIN_VOCABS[tokenizer_id]
    except KeyError:
        raise VocabFormatError(
            f"unknown built-in tokenizer {tokenizer_id!r}; "
            f"known: {sorted(_BUILTIN_VOCABS)}"
        ) from None
    return GreedyTokenizer(factory(), tokenizer_id)
