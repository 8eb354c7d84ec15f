"""Exact inverted index over sparse vocabulary embeddings."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .projection import SparseEmbedding
from .vocab import Vocabulary, build_mask, tokenize

INDEX_MAGIC = b"LXIX"
INDEX_VERSION = 1


@dataclass
class PostingList:
    token_id: int
    doc_ids: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return int(self.doc_ids.size)


@dataclass
class SearchResult:
    ranked: list[tuple[int, float]]
    k_requested: int

    @property
    def doc_ids(self) -> list[int]:
        return [d for d, _ in self.ranked]


@dataclass
class InvertedIndex:
    lists: dict[int, PostingList]
    doc_ids: np.ndarray
    doc_norms: np.ndarray
    touches: int = field(default=0, compare=False)

    @property
    def doc_count(self) -> int:
        return int(self.doc_ids.size)

    def norm_of(self, doc_id: int) -> float:
        i = int(np.searchsorted(self.doc_ids, doc_id))
        if i == self.doc_ids.size or self.doc_ids[i] != doc_id:
            raise KeyError(doc_id)
        return float(self.doc_norms[i])

    def reconstruct(self, doc_id: int) -> SparseEmbedding:
        pairs = []
        for tok, pl in self.lists.items():
            j = int(np.searchsorted(pl.doc_ids, doc_id))
            if j < len(pl) and pl.doc_ids[j] == doc_id:
                pairs.append((tok, float(pl.weights[j])))
        return SparseEmbedding.from_pairs(pairs)


def build(corpus: Iterable[tuple[int, SparseEmbedding]]) -> InvertedIndex:
    """Index documents; empty embeddings get norm 0 and never score."""
    docs = sorted(((int(d), e) for d, e in corpus), key=lambda x: x[0])
    ids = np.array([d for d, _ in docs], dtype=np.int64)
    if ids.size and np.any(np.diff(ids) == 0):
        dup = int(ids[np.flatnonzero(np.diff(ids) == 0)[0]])
        raise ValueError(f"duplicate doc_id {dup}")
    if ids.size and ids[0] < 0:
        raise ValueError("doc ids must be non-negative")
    cols: dict[int, tuple[list[int], list[float]]] = {}
    norms = np.empty(len(docs))
    for i, (d, emb) in enumerate(docs):
        norms[i] = emb.norm()
        for t, w in zip(emb.ids.tolist(), emb.weights.tolist()):
            dl, wl = cols.setdefault(t, ([], []))
            dl.append(d)
            wl.append(w)
    lists = {
        t: PostingList(t, np.array(dl, dtype=np.int64), np.array(wl, dtype=np.float64))
        for t, (dl, wl) in sorted(cols.items())
    }
    return InvertedIndex(lists, ids, norms)


def _top_k(doc_ids: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    order = np.lexsort((doc_ids, -scores))[:k]
    return [(int(doc_ids[i]), float(scores[i])) for i in order]


def search(ix: InvertedIndex, query: SparseEmbedding, k: int = 10, normalize: bool = True) -> SearchResult:
    """Exact top-k by term-at-a-time accumulation over the query's postings.

    Ranking is by descending score, ties by ascending doc id. Only documents
    sharing at least one token with the query are returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(query) == 0 or ix.doc_count == 0:
        return SearchResult([], k)
    scores = np.zeros(ix.doc_count)
    hit = np.zeros(ix.doc_count, dtype=bool)
    for t, qw in zip(query.ids.tolist(), query.weights.tolist()):
        pl = ix.lists.get(t)
        if pl is None:
            continue
        pos = np.searchsorted(ix.doc_ids, pl.doc_ids)
        scores[pos] += qw * pl.weights
        hit[pos] = True
        ix.touches += len(pl)
    if not hit.any():
        return SearchResult([], k)
    cand = np.flatnonzero(hit)
    s = scores[cand]
    if normalize:
        s = s / (ix.doc_norms[cand] * query.norm())
    return SearchResult(_top_k(ix.doc_ids[cand], s, k), k)


def mask_query(vocab: Vocabulary, text: str, max_len: int = 10_000) -> SparseEmbedding:
    """Binary query: weight 1.0 on every content token of ``text``."""
    active = sorted(build_mask(vocab, tokenize(vocab, text, max_len)))
    return SparseEmbedding(active, np.ones(len(active)))


def mask_search(ix: InvertedIndex, vocab: Vocabulary, text: str, k: int = 10) -> SearchResult:
    """Text-encoder-free search: raw dot product against the token mask."""
    return search(ix, mask_query(vocab, text), k, normalize=False)


def brute_force_search(
    corpus: Iterable[tuple[int, SparseEmbedding]],
    query: SparseEmbedding,
    k: int,
    normalize: bool = True,
    vocab_size: int | None = None,
) -> SearchResult:
    """Reference ranking by full dense dot products."""
    docs = list(corpus)
    if not docs or len(query) == 0:
        return SearchResult([], k)
    v = vocab_size or 1 + max([int(query.ids.max())] + [int(e.ids.max()) for _, e in docs if len(e)])
    q = query.to_dense(v)
    ids = np.array([d for d, _ in docs], dtype=np.int64)
    dense = np.stack([e.to_dense(v) for _, e in docs])
    support = (dense[:, q > 0] > 0).any(axis=1)
    scores = dense @ q
    if normalize:
        norms = np.linalg.norm(dense, axis=1)
        scores = np.divide(scores, norms * np.linalg.norm(q), out=np.zeros_like(scores), where=support)
    return SearchResult(_top_k(ids[support], scores[support], k), k)


# -- persistence -----------------------------------------------------------


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varints(buf: bytes, count: int) -> list[int]:
    vals, cur, shift = [], 0, 0
    for b in buf:
        cur |= (b & 0x7F) << shift
        if b & 0x80:
            shift += 7
        else:
            vals.append(cur)
            cur, shift = 0, 0
    if len(vals) != count or shift:
        raise ValueError("corrupt doc-id block")
    return vals


def to_bytes(ix: InvertedIndex) -> bytes:
    """Serialized layout (little-endian):

    ``magic[4] version:u32 n_lists:u32 n_docs:u32``; per list in ascending
    token order ``token_id:u32 count:u32 nbytes:u32`` + LEB128 varint doc-id
    deltas (first delta from 0) + ``count`` float64 weights; then ``n_docs``
    doc ids as u64 and ``n_docs`` float64 norms.
    """
    parts = [INDEX_MAGIC, struct.pack("<III", INDEX_VERSION, len(ix.lists), ix.doc_count)]
    for t in sorted(ix.lists):
        pl = ix.lists[t]
        deltas = np.diff(pl.doc_ids, prepend=0)
        enc = b"".join(_varint(int(x)) for x in deltas)
        parts.append(struct.pack("<III", t, len(pl), len(enc)))
        parts.append(enc)
        parts.append(pl.weights.astype("<f8").tobytes())
    parts.append(ix.doc_ids.astype("<u8").tobytes())
    parts.append(ix.doc_norms.astype("<f8").tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes) -> InvertedIndex:
    if raw[:4] != INDEX_MAGIC:
        raise ValueError("not an index file (bad magic)")
    if len(raw) < 16:
        raise ValueError("truncated index header")
    version, n_lists, n_docs = struct.unpack_from("<III", raw, 4)
    if version != INDEX_VERSION:
        raise ValueError(f"unsupported index version {version}")
    off = 16
    lists = {}
    try:
        for _ in range(n_lists):
            t, count, nbytes = struct.unpack_from("<III", raw, off)
            off += 12
            if off + nbytes + 8 * count > len(raw):
                raise ValueError("truncated posting block")
            deltas = _read_varints(raw[off : off + nbytes], count)
            off += nbytes
            weights = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
            off += 8 * count
            lists[t] = PostingList(t, np.cumsum(np.array(deltas, dtype=np.int64)), weights)
        if off + 16 * n_docs != len(raw):
            raise ValueError("index size does not match header")
        ids = np.frombuffer(raw, dtype="<u8", count=n_docs, offset=off).astype(np.int64)
        norms = np.frombuffer(raw, dtype="<f8", count=n_docs, offset=off + 8 * n_docs).astype(np.float64)
    except struct.error as exc:
        raise ValueError(f"truncated index: {exc}") from exc
    return InvertedIndex(lists, ids, norms)


def save(ix: InvertedIndex, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ix))


def load(path: str | Path) -> InvertedIndex:
    return from_bytes(Path(path).read_bytes())
