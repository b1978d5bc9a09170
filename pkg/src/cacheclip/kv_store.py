"""Chunk and merged KV caches, the sink-deduplicating merge, persistence.

Chunk caches hold keys position-free (exactly as projected, before any
rotary rotation) so the merge can rotate each surviving row once, directly
into its final merged position. Merged caches therefore hold keys already
rotated; values are never position-dependent. Positions are implicit in
both cases: row r of any cache lives at position r.

Binary cache format (documented in docs/cache_format.md):

    bytes 0..3    magic "CCLP"
    bytes 4..7    format version, u32 little-endian
    bytes 8..11   metadata length M, u32 little-endian
    bytes 12..    metadata, UTF-8 JSON of M bytes
    payload       per layer: key block then value block, raw float32
                  little-endian, row-major (rows, heads, head_dim)
    last 4 bytes  CRC32 of everything before it, u32 little-endian
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .flops import PipelineTrace
from .tensor_core import Array, RopeParams, rope_apply

CACHE_MAGIC = b"CCLP"
CACHE_VERSION = 1


class CacheFormatError(ValueError):
    """Persisted cache bytes violate the format contract."""


class BadMagicError(CacheFormatError):
    pass


class VersionMismatchError(CacheFormatError):
    pass


class ChecksumError(CacheFormatError):
    pass


class CacheConsistencyError(ValueError):
    """Caches that cannot be merged or extended together."""


def _check_layers(keys: list[Array], values: list[Array]) -> tuple[int, int, int]:
    if not keys or len(keys) != len(values):
        raise CacheConsistencyError("cache needs matching per-layer key/value lists")
    rows, heads, d_head = keys[0].shape
    for arr in (*keys, *values):
        if arr.shape != (rows, heads, d_head):
            raise CacheConsistencyError(
                f"layer shape {arr.shape} != {(rows, heads, d_head)}"
            )
        if arr.dtype != np.float32:
            raise CacheConsistencyError(f"cache tensors must be float32, got {arr.dtype}")
    return rows, heads, d_head


@dataclass
class ChunkCache:
    """One chunk processed against the shared prefix, keys position-free."""

    keys: list[Array]
    values: list[Array]
    token_ids: list[int]
    prefix_len: int
    tokenizer_id: str
    model_fingerprint: str

    KEYS_ROTATED = False

    def __post_init__(self) -> None:
        rows, _, _ = _check_layers(self.keys, self.values)
        if rows != len(self.token_ids):
            raise CacheConsistencyError(
                f"{rows} cache rows but {len(self.token_ids)} token ids"
            )
        if not 0 <= self.prefix_len <= rows:
            raise CacheConsistencyError(
                f"prefix_len {self.prefix_len} outside 0..{rows}"
            )

    @property
    def n_rows(self) -> int:
        return self.keys[0].shape[0]

    @property
    def chunk_ids(self) -> list[int]:
        return self.token_ids[self.prefix_len :]

    @property
    def chunk_len(self) -> int:
        return self.n_rows - self.prefix_len

    def attention_banks(
        self, rope: RopeParams, trace: PipelineTrace | None = None, stage: str = "decode"
    ) -> list[tuple[Array, Array]]:
        """Rotated key/value banks at local positions 0..n-1."""
        pos = np.arange(self.n_rows, dtype=np.int64)
        banks = []
        for k, v in zip(self.keys, self.values):
            banks.append((rope_apply(k, pos, rope), v))
            if trace is not None:
                trace.rope(stage, self.n_rows * k.shape[1], k.shape[2])
        return banks


@dataclass(frozen=True)
class MergeLayout:
    sink_len: int
    chunk_lens: tuple[int, ...]

    @property
    def total(self) -> int:
        return self.sink_len + sum(self.chunk_lens)

    def chunk_start(self, chunk: int) -> int:
        """Merged row index where a chunk's non-prefix tokens begin."""
        return self.sink_len + sum(self.chunk_lens[:chunk])


@dataclass
class MergedCache:
    """Concatenated chunk rows at contiguous positions, keys rotated.

    source records where every row came from: (chunk index, row within that
    chunk cache) for merged rows, (-1, i) for rows appended afterward by a
    decode-style forward. recomputed_rows is provenance left by the hybrid
    recompute pass so downstream reporting can see which rows were
    refreshed.
    """

    keys: list[Array]
    values: list[Array]
    token_ids: list[int]
    layout: MergeLayout
    source: list[tuple[int, int]]
    tokenizer_id: str
    model_fingerprint: str
    recomputed_rows: tuple[int, ...] = ()

    KEYS_ROTATED = True

    def __post_init__(self) -> None:
        rows, _, _ = _check_layers(self.keys, self.values)
        if rows != len(self.token_ids) or rows != len(self.source):
            raise CacheConsistencyError("rows, token ids, and source map disagree")

    @property
    def n_rows(self) -> int:
        return self.keys[0].shape[0]

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.n_rows, dtype=np.int64)

    def attention_banks(
        self, rope: RopeParams | None = None, trace: PipelineTrace | None = None, stage: str = "decode"
    ) -> list[tuple[Array, Array]]:
        return list(zip(self.keys, self.values))

    def copy(self) -> "MergedCache":
        return MergedCache(
            keys=[k.copy() for k in self.keys],
            values=[v.copy() for v in self.values],
            token_ids=list(self.token_ids),
            layout=self.layout,
            source=list(self.source),
            tokenizer_id=self.tokenizer_id,
            model_fingerprint=self.model_fingerprint,
            recomputed_rows=self.recomputed_rows,
        )


def compute_positions(chunk_lens: Sequence[int], prefix_len: int) -> np.ndarray:
    """Positions for a merged layout: contiguous 0..L-1, L = prefix + chunks."""
    if prefix_len < 0 or any(c < 0 for c in chunk_lens):
        raise ValueError("lengths must be non-negative")
    return np.arange(prefix_len + sum(chunk_lens), dtype=np.int64)


def merge_caches(
    chunks: Sequence[ChunkCache],
    rope: RopeParams,
    trace: PipelineTrace | None = None,
) -> MergedCache:
    """Concatenate chunk caches, keeping only the first copy of the prefix.

    Chunk 1 contributes its prefix rows (the deduplicated attention sink)
    and every chunk contributes its non-prefix rows in order. Keys are
    rotated into the final contiguous positions; values pass through
    untouched. All chunks must agree on prefix content, tokenizer, and
    model fingerprint.
    """
    if not chunks:
        raise CacheConsistencyError("nothing to merge")
    first = chunks[0]
    sink = first.prefix_len
    prefix_ids = first.token_ids[:sink]
    n_layers = len(first.keys)
    heads, d_head = first.keys[0].shape[1:]
    for i, c in enumerate(chunks):
        if c.prefix_len != sink:
            raise CacheConsistencyError(
                f"chunk {i} prefix_len {c.prefix_len} != {sink}"
            )
        if c.token_ids[:sink] != prefix_ids:
            raise CacheConsistencyError(f"chunk {i} has different prefix tokens")
        if c.model_fingerprint != first.model_fingerprint:
            raise CacheConsistencyError(f"chunk {i} built with a different model")
        if c.tokenizer_id != first.tokenizer_id:
            raise CacheConsistencyError(f"chunk {i} built with a different tokenizer")
        if len(c.keys) != n_layers or c.keys[0].shape[1:] != (heads, d_head):
            raise CacheConsistencyError(f"chunk {i} has mismatched tensor geometry")

    chunk_lens = tuple(c.chunk_len for c in chunks)
    positions = compute_positions(chunk_lens, sink)
    token_ids = list(prefix_ids)
    source: list[tuple[int, int]] = [(0, r) for r in range(sink)]
    for ci, c in enumerate(chunks):
        token_ids.extend(c.chunk_ids)
        source.extend((ci, sink + j) for j in range(c.chunk_len))

    keys: list[Array] = []
    values: list[Array] = []
    for layer in range(n_layers):
        k_rows = np.concatenate(
            [first.keys[layer][:sink]] + [c.keys[layer][sink:] for c in chunks], axis=0
        )
        v_rows = np.concatenate(
            [first.values[layer][:sink]] + [c.values[layer][sink:] for c in chunks],
            axis=0,
        )
        keys.append(rope_apply(k_rows, positions, rope))
        values.append(np.ascontiguousarray(v_rows))
        if trace is not None:
            trace.rope("merge_overhead", len(positions) * heads, d_head)

    return MergedCache(
        keys=keys,
        values=values,
        token_ids=token_ids,
        layout=MergeLayout(sink, chunk_lens),
        source=source,
        tokenizer_id=first.tokenizer_id,
        model_fingerprint=first.model_fingerprint,
    )


def _pack_u32(value: int) -> bytes:
    return int(value).to_bytes(4, "little")


def save_cache(cache: ChunkCache | MergedCache, path) -> None:
    rows, heads, d_head = _check_layers(cache.keys, cache.values)
    meta: dict = {
        "n_layers": len(cache.keys),
        "rows": rows,
        "heads": heads,
        "d_head": d_head,
        "token_ids": list(cache.token_ids),
        "tokenizer_id": cache.tokenizer_id,
        "model_fingerprint": cache.model_fingerprint,
    }
    if isinstance(cache, ChunkCache):
        meta["kind"] = "chunk"
        meta["prefix_len"] = cache.prefix_len
    elif isinstance(cache, MergedCache):
        meta["kind"] = "merged"
        meta["sink_len"] = cache.layout.sink_len
        meta["chunk_lens"] = list(cache.layout.chunk_lens)
        meta["source"] = [list(s) for s in cache.source]
        meta["recomputed_rows"] = list(cache.recomputed_rows)
    else:
        raise TypeError(f"cannot persist {type(cache).__name__}")

    blob = bytearray()
    blob += CACHE_MAGIC
    blob += _pack_u32(CACHE_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob += _pack_u32(len(meta_bytes))
    blob += meta_bytes
    for layer in range(len(cache.keys)):
        blob += np.ascontiguousarray(cache.keys[layer], dtype="<f4").tobytes()
        blob += np.ascontiguousarray(cache.values[layer], dtype="<f4").tobytes()
    blob += _pack_u32(zlib.crc32(bytes(blob)))
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_cache(path) -> ChunkCache | MergedCache:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise CacheFormatError(f"cache file truncated: {len(blob)} bytes")
    if blob[:4] != CACHE_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {CACHE_MAGIC!r}")
    version = int.from_bytes(blob[4:8], "little")
    if version != CACHE_VERSION:
        raise VersionMismatchError(f"cache version {version}, expected {CACHE_VERSION}")
    stored_crc = int.from_bytes(blob[-4:], "little")
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise ChecksumError("cache checksum mismatch")
    meta_len = int.from_bytes(blob[8:12], "little")
    meta_end = 12 + meta_len
    if meta_end + 4 > len(blob):
        raise CacheFormatError("metadata length exceeds file size")
    try:
        meta = json.loads(blob[12:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheFormatError(f"unreadable cache metadata: {exc}") from exc

    n_layers = meta["n_layers"]
    rows, heads, d_head = meta["rows"], meta["heads"], meta["d_head"]
    block = rows * heads * d_head * 4
    expected = meta_end + 2 * n_layers * block + 4
    if len(blob) != expected:
        raise CacheFormatError(
            f"payload size mismatch: file {len(blob)} bytes, expected {expected}"
        )
    keys: list[Array] = []
    values: list[Array] = []
    offset = meta_end
    for _ in range(n_layers):
        k = np.frombuffer(blob, dtype="<f4", count=rows * heads * d_head, offset=offset)
        offset += block
        v = np.frombuffer(blob, dtype="<f4", count=rows * heads * d_head, offset=offset)
        offset += block
        keys.append(k.reshape(rows, heads, d_head).copy())
        values.append(v.reshape(rows, heads, d_head).copy())

    common = dict(
        keys=keys,
        values=values,
        token_ids=list(meta["token_ids"]),
        tokenizer_id=meta["tokenizer_id"],
        model_fingerprint=meta["model_fingerprint"],
    )
    if meta["kind"] == "chunk":
        return ChunkCache(prefix_len=meta["prefix_len"], **common)
    if meta["kind"] == "merged":
        return MergedCache(
            layout=MergeLayout(meta["sink_len"], tuple(meta["chunk_lens"])),
            source=[tuple(s) for s in meta["source"]],
            recomputed_rows=tuple(meta.get("recomputed_rows", ())),
            **common,
        )
    raise CacheFormatError(f"unknown cache kind {meta['kind']!r}")
