"""Contrastive and FLOPs losses.

Two views of the same math: float functions over :class:`SparseEmbedding`
lists for evaluation, and tape-differentiable functions over dense pooled
batches ``[N, |V|]`` for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .projection import SparseEmbedding


@dataclass
class LossConfig:
    lambda_image: float = 1e-3
    lambda_text: float = 1e-3
    log_temperature: float = math.log(0.07)
    temperature_floor: float = 0.01

    def __post_init__(self):
        if self.lambda_image < 0 or self.lambda_text < 0:
            raise ValueError("FLOPs weights must be non-negative")
        if not 0 < self.temperature_floor <= math.exp(self.log_temperature):
            raise ValueError("temperature below its floor")

    @property
    def temperature(self) -> float:
        return math.exp(self.log_temperature)


@dataclass
class BatchEmbeddings:
    image_embs: list[SparseEmbedding]
    text_embs: list[SparseEmbedding]

    def __post_init__(self):
        if len(self.image_embs) != len(self.text_embs) or not self.image_embs:
            raise ValueError("batch needs N >= 1 aligned image/text pairs")

    def __len__(self) -> int:
        return len(self.image_embs)


def cosine_sim(a: SparseEmbedding, b: SparseEmbedding) -> float:
    if not len(a) or not len(b):
        return 0.0
    _, ia, ib = np.intersect1d(a.ids, b.ids, assume_unique=True, return_indices=True)
    dot = float(np.dot(a.weights[ia], b.weights[ib]))
    return dot / (a.norm() * b.norm())


def similarity_matrix(image_embs: Sequence[SparseEmbedding], text_embs: Sequence[SparseEmbedding]) -> np.ndarray:
    return np.array([[cosine_sim(x, y) for y in text_embs] for x in image_embs])


def _row_xent(logits: np.ndarray) -> float:
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - np.diag(logits)))


def contrastive_from_sims(sims: np.ndarray, temperature: float) -> float:
    logits = sims / temperature
    return 0.5 * (_row_xent(logits) + _row_xent(logits.T))


def contrastive_loss(batch: BatchEmbeddings, cfg: LossConfig) -> float:
    """Symmetric in-batch contrastive loss; rows are images, columns texts."""
    sims = similarity_matrix(batch.image_embs, batch.text_embs)
    return contrastive_from_sims(sims, cfg.temperature)


def flops_loss(embs: Sequence[SparseEmbedding], vocab_size: int) -> float:
    """Sum over tokens of the squared batch-mean weight, streamed over entries."""
    if not embs:
        raise ValueError("flops_loss needs at least one embedding")
    totals: dict[int, float] = {}
    for e in embs:
        for t, w in zip(e.ids.tolist(), e.weights.tolist()):
            if t >= vocab_size:
                raise ValueError(f"token id {t} outside vocabulary of size {vocab_size}")
            totals[t] = totals.get(t, 0.0) + w
    n = len(embs)
    return math.fsum((s / n) ** 2 for s in totals.values())


def total_loss(batch: BatchEmbeddings, cfg: LossConfig, vocab_size: int) -> float:
    con = contrastive_loss(batch, cfg)
    return (
        con
        + cfg.lambda_image * flops_loss(batch.image_embs, vocab_size)
        + cfg.lambda_text * flops_loss(batch.text_embs, vocab_size)
    )


def dense_baseline_loss(image_vecs: np.ndarray, text_vecs: np.ndarray, cfg: LossConfig) -> float:
    """Same contrastive form over dense vectors, no FLOPs term."""
    a = np.asarray(image_vecs, dtype=np.float64)
    b = np.asarray(text_vecs, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    a = a / np.where(na > 0, na, 1.0)
    b = b / np.where(nb > 0, nb, 1.0)
    return contrastive_from_sims(a @ b.T, cfg.temperature)


# -- differentiable versions ------------------------------------------------


@dataclass
class LossParts:
    total: Tensor
    contrastive: Tensor
    flops_image: Tensor
    flops_text: Tensor


def contrastive_tensor(image_enc: Tensor, text_enc: Tensor, log_temperature: Tensor) -> Tensor:
    n = image_enc.shape[0]
    sims = nx.l2_normalize_rows(image_enc) @ nx.swap_last(nx.l2_normalize_rows(text_enc))
    logits = sims * nx.exp(-log_temperature)
    targets = np.arange(n)
    return (nx.cross_entropy_rows(logits, targets) + nx.cross_entropy_rows(nx.swap_last(logits), targets)) * 0.5


def flops_tensor(enc: Tensor) -> Tensor:
    m = nx.mean(enc, axis=0)
    return nx.sum(m * m)


def total_loss_tensor(
    image_enc: Tensor,
    text_enc: Tensor,
    log_temperature: Tensor,
    lambda_image: float,
    lambda_text: float,
) -> LossParts:
    con = contrastive_tensor(image_enc, text_enc, log_temperature)
    fi = flops_tensor(image_enc)
    ft = flops_tensor(text_enc)
    total = con + fi * lambda_image + ft * lambda_text
    return LossParts(total, con, fi, ft)
