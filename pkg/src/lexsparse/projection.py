"""Token projection head: vocabulary logits per position, sparse pooling, heatmaps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import numerics as nx
from .encoder import (
    Model,
    PatchGrid,
    encode_image,
    encode_image_batch,
    encode_text,
    encode_text_batch,
    pad_batch,
)
from .numerics import Tensor
from .vocab import Vocabulary, build_mask, tokenize


class SparseEmbedding:
    """Vector over the vocabulary stored as ascending ids with positive weights."""

    __slots__ = ("ids", "weights")

    def __init__(self, ids=(), weights=()):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if ids.shape != weights.shape:
            raise ValueError("ids and weights differ in length")
        if ids.size and np.any(np.diff(ids) <= 0):
            raise ValueError("token ids must be strictly increasing")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and positive")
        self.ids = ids
        self.weights = weights

    @classmethod
    def from_dense(cls, vec) -> "SparseEmbedding":
        vec = np.asarray(vec, dtype=np.float64)
        nz = np.flatnonzero(vec > 0)
        return cls(nz, vec[nz])

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "SparseEmbedding":
        pairs = sorted((int(t), float(w)) for t, w in pairs if w > 0)
        return cls([t for t, _ in pairs], [w for _, w in pairs])

    def to_dense(self, vocab_size: int) -> np.ndarray:
        out = np.zeros(vocab_size)
        out[self.ids] = self.weights
        return out

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.weights, self.weights)))

    def items(self) -> list[tuple[int, float]]:
        return list(zip(self.ids.tolist(), self.weights.tolist()))

    def __len__(self) -> int:
        return int(self.ids.size)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SparseEmbedding)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.weights, other.weights)
        )

    def __repr__(self) -> str:
        return f"SparseEmbedding({self.items()})"


def format_sparse(item_id: str, emb: SparseEmbedding) -> str:
    """One text record: ``<id>\\t<tok>:<weight> ...`` with repr-exact floats."""
    body = " ".join(f"{t}:{w!r}" for t, w in emb.items())
    return f"{item_id}\t{body}"


def parse_sparse(line: str) -> tuple[str, SparseEmbedding]:
    item_id, _, body = line.rstrip("\n").partition("\t")
    pairs = []
    for tok in body.split():
        t, _, w = tok.partition(":")
        pairs.append((int(t), float(w)))
    return item_id, SparseEmbedding([t for t, _ in pairs], [w for _, w in pairs])


@dataclass
class Heatmap:
    values: np.ndarray
    query_tokens: list[int]


def transform(model: Model, feats: Tensor) -> Tensor:
    p = model.params
    h = nx.gelu(feats @ p["head.transform_fc"] + p["head.transform_bias"])
    return nx.layer_norm(h, p["head.ln_gain"], p["head.ln_bias"], model.config.ln_eps)


def project_positions(model: Model, feats: Tensor) -> Tensor:
    """Per-position vocabulary logits ``e . transform(h) + b``."""
    if feats.shape[-1] != model.config.d:
        raise ValueError(f"feature width {feats.shape[-1]} != model width {model.config.d}")
    t = transform(model, feats)
    return t @ nx.swap_last(model.tied_embedding) + model.params["head.logit_bias"]


def pool_dense(logits: Tensor, valid) -> Tensor:
    """``log(1 + relu(max over valid positions))``; positions on axis -2."""
    valid = np.asarray(valid, dtype=bool)
    return nx.log1p(nx.relu(nx.masked_max(logits, valid[..., None], axis=-2)))


def pool_sparse(logits, valid=None) -> SparseEmbedding:
    """Pool an ``[n, |V|]`` logit matrix into a sparse embedding."""
    logits = nx.as_tensor(logits)
    if valid is None:
        valid = np.ones(logits.shape[0], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("pool_sparse needs at least one valid position")
    return SparseEmbedding.from_dense(pool_dense(logits, valid).data)


def embed_text(model: Model, seq) -> SparseEmbedding:
    return pool_sparse(project_positions(model, encode_text(model, seq)))


def embed_image(model: Model, img: PatchGrid) -> SparseEmbedding:
    return pool_sparse(project_positions(model, encode_image(model, img)))


def text_enc_batch(model: Model, seqs, pad_id: int) -> Tensor:
    """Dense pooled text embeddings ``[B, |V|]``; padding never reaches the max."""
    ids, valid = pad_batch(seqs, pad_id)
    logits = project_positions(model, encode_text_batch(model, ids, valid))
    return pool_dense(logits, valid)


def image_enc_batch(model: Model, grids: np.ndarray) -> Tensor:
    logits = project_positions(model, encode_image_batch(model, grids))
    return pool_dense(logits, np.ones(logits.shape[:2], dtype=bool))


def dense_text_batch(model: Model, seqs, pad_id: int) -> Tensor:
    """Dense baseline: mean over valid positions of the head transform."""
    ids, valid = pad_batch(seqs, pad_id)
    t = transform(model, encode_text_batch(model, ids, valid))
    w = valid / valid.sum(axis=1, keepdims=True)
    return nx.sum(t * w[..., None], axis=1)


def dense_image_batch(model: Model, grids: np.ndarray) -> Tensor:
    return nx.mean(transform(model, encode_image_batch(model, grids)), axis=1)


def embed_texts(model: Model, seqs, pad_id: int, chunk: int = 256) -> list[SparseEmbedding]:
    out = []
    for i in range(0, len(seqs), chunk):
        enc = text_enc_batch(model, seqs[i : i + chunk], pad_id).data
        out.extend(SparseEmbedding.from_dense(row) for row in enc)
    return out


def embed_images(model: Model, grids: np.ndarray, chunk: int = 256) -> list[SparseEmbedding]:
    out = []
    for i in range(0, len(grids), chunk):
        enc = image_enc_batch(model, grids[i : i + chunk]).data
        out.extend(SparseEmbedding.from_dense(row) for row in enc)
    return out


def heatmap(model: Model, vocab: Vocabulary, img: PatchGrid, query: str) -> Heatmap:
    """Mean activation of the query's content tokens at each grid cell.

    Runs only the image tower; the query is tokenized, never encoded.
    """
    tokens = sorted(build_mask(vocab, tokenize(vocab, query, max_len=10_000)))
    if not tokens:
        raise ValueError(f"query {query!r} has no content tokens")
    logits = project_positions(model, encode_image(model, img)).data
    values = logits[:, tokens].mean(axis=1)
    return Heatmap(values.reshape(img.height, img.width), tokens)
