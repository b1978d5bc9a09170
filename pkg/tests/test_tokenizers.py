import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacheclip import (
    AUX_TOKENIZER_ID,
    PRIMARY_TOKENIZER_ID,
    AlignmentMap,
    GreedyTokenizer,
    SpanCoverageError,
    TokenSpan,
    UnknownCharacterError,
    VocabFormatError,
    align_spans,
    aux_toy_vocab,
    builtin_tokenizer,
    from_vocab_file,
    load_vocab,
    primary_toy_vocab,
    save_vocab,
)

# Characters every toy vocabulary covers as single-character fallbacks.
SAFE_TEXT = st.text(
    alphabet=string.ascii_letters + string.digits + " .,:;?!'\"()-", max_size=60
)


def test_greedy_prefers_longest_match(ptok):
    ids = ptok.encode("the")
    assert len(ids) == 1 and ptok.token(ids[0]) == "the"


def test_digit_pairs_tokenize_greedily(ptok):
    assert [ptok.token(i) for i in ptok.encode("566362")] == ["56", "63", "62"]
    assert [ptok.token(i) for i in ptok.encode("5663623")] == ["56", "63", "62", "3"]


def test_aux_vocab_has_no_digit_pairs(atok):
    assert [atok.token(i) for i in atok.encode("56")] == ["5", "6"]


@given(text=SAFE_TEXT)
@settings(max_examples=60, deadline=None)
def test_encode_decode_round_trip(text):
    for tok_id in (PRIMARY_TOKENIZER_ID, AUX_TOKENIZER_ID):
        tok = builtin_tokenizer(tok_id)
        assert tok.decode(tok.encode(text)) == text


@given(text=SAFE_TEXT)
@settings(max_examples=60, deadline=None)
def test_offsets_tile_the_text(text):
    tok = builtin_tokenizer(PRIMARY_TOKENIZER_ID)
    spans = tok.encode_with_offsets(text)
    cursor = 0
    for s in spans:
        assert s.start == cursor and s.end > s.start
        assert text[s.start : s.end] == tok.token(s.token_id)
        cursor = s.end
    assert cursor == len(text)


@given(text=SAFE_TEXT, seed=st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_boundary_slices_are_reencode_stable(text, seed):
    # Splitting at any token boundary and re-encoding the halves reproduces
    # the original token lists; chunk slicing in the cache layer relies on it.
    tok = builtin_tokenizer(PRIMARY_TOKENIZER_ID)
    spans = tok.encode_with_offsets(text)
    if not spans:
        return
    cut = spans[seed % len(spans)].end
    head, tail = text[:cut], text[cut:]
    assert tok.encode(head) + tok.encode(tail) == [s.token_id for s in spans]


def test_unknown_character_raises(ptok):
    with pytest.raises(UnknownCharacterError):
        ptok.encode("hello @ world")


def test_token_id_out_of_range(ptok):
    with pytest.raises(ValueError):
        ptok.token(ptok.vocab_size)


def test_vocab_rejects_duplicates_and_empties():
    with pytest.raises(VocabFormatError):
        GreedyTokenizer(["a", "a"])
    with pytest.raises(VocabFormatError):
        GreedyTokenizer(["a", ""])
    with pytest.raises(VocabFormatError):
        GreedyTokenizer([])
    with pytest.raises(VocabFormatError):
        GreedyTokenizer(["a\nb"])


def test_vocab_file_round_trip(tmp_path):
    path = tmp_path / "toy.vocab"
    save_vocab(primary_toy_vocab(), path)
    assert load_vocab(path) == primary_toy_vocab()
    tok = from_vocab_file(path)
    assert tok.tokenizer_id == "toy"
    assert tok.encode("the grass") == builtin_tokenizer(PRIMARY_TOKENIZER_ID).encode(
        "the grass"
    )


def test_vocab_file_is_newline_delimited_utf8(tmp_path):
    path = tmp_path / "v.vocab"
    save_vocab(["a", "b", "ab"], path)
    assert path.read_bytes() == b"a\nb\nab\n"


def test_load_vocab_rejects_malformed_files(tmp_path):
    missing_newline = tmp_path / "a.vocab"
    missing_newline.write_bytes(b"a\nb")
    with pytest.raises(VocabFormatError):
        load_vocab(missing_newline)
    empty_line = tmp_path / "b.vocab"
    empty_line.write_bytes(b"a\n\nb\n")
    with pytest.raises(VocabFormatError):
        load_vocab(empty_line)
    empty = tmp_path / "c.vocab"
    empty.write_bytes(b"")
    with pytest.raises(VocabFormatError):
        load_vocab(empty)


def test_builtin_tokenizer_ids():
    assert builtin_tokenizer(PRIMARY_TOKENIZER_ID).tokenizer_id == PRIMARY_TOKENIZER_ID
    assert builtin_tokenizer(AUX_TOKENIZER_ID).vocab == aux_toy_vocab()
    with pytest.raises(ValueError):
        builtin_tokenizer("nope")


def test_alignment_map_images_by_interval_overlap():
    src = [TokenSpan(0, 0, 2), TokenSpan(1, 2, 5)]
    dst = [TokenSpan(0, 0, 1), TokenSpan(1, 1, 3), TokenSpan(2, 3, 5)]
    mapping = align_spans(src, dst)
    assert mapping.image(0) == (0, 1)
    assert mapping.image(1) == (1, 2)
    assert mapping.project([0, 1]) == [0, 1, 2]
    assert mapping.project([1]) == [1, 2]


def test_align_spans_cross_tokenizer(ptok, atok):
    text = "the grass is green here"
    src = atok.encode_with_offsets(text)
    dst = ptok.encode_with_offsets(text)
    mapping = align_spans(src, dst)
    assert len(mapping.images) == len(src)
    # Every aux token hits at least one primary token, monotonically.
    previous_last = 0
    for image in mapping.images:
        assert image
        assert image[0] >= previous_last - 1
        previous_last = image[-1]
    assert mapping.project(range(len(src))) == list(range(len(dst)))


def test_align_spans_rejects_length_mismatch():
    src = [TokenSpan(0, 0, 2)]
    dst = [TokenSpan(0, 0, 3)]
    with pytest.raises(SpanCoverageError):
        align_spans(src, dst)


def test_align_spans_rejects_gaps():
    src = [TokenSpan(0, 0, 1), TokenSpan(1, 2, 3)]
    dst = [TokenSpan(0, 0, 3)]
    with pytest.raises(SpanCoverageError):
        align_spans(src, dst)


def test_alignment_map_is_plain_data():
    mapping = AlignmentMap(images=((0,), (0, 1)))
    assert mapping.project([0, 1]) == [0, 1]
