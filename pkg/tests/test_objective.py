import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lexsparse import numerics as nx
from lexsparse.numerics import Tensor
from lexsparse.objective import (
    BatchEmbeddings,
    LossConfig,
    contrastive_loss,
    cosine_sim,
    dense_baseline_loss,
    flops_loss,
    flops_tensor,
    total_loss,
    total_loss_tensor,
)
from lexsparse.projection import SparseEmbedding


def rand_emb(rng, v=12, p=0.4):
    dense = np.where(rng.random(v) < p, rng.random(v) * 2, 0.0)
    return SparseEmbedding.from_dense(dense)


def naive_contrastive(imgs, txts, t):
    """Double loop over the similarity definition, both directions."""
    n = len(imgs)

    def cos(a, b):
        da, db = dict(a.items()), dict(b.items())
        dot = sum(w * db.get(k, 0.0) for k, w in da.items())
        na = math.sqrt(sum(w * w for w in da.values()))
        nb = math.sqrt(sum(w * w for w in db.values()))
        return 0.0 if na == 0 or nb == 0 else dot / (na * nb)

    s = [[cos(imgs[i], txts[j]) for j in range(n)] for i in range(n)]
    i2t = -sum(math.log(math.exp(s[i][i] / t) / sum(math.exp(s[i][j] / t) for j in range(n))) for i in range(n)) / n
    t2i = -sum(math.log(math.exp(s[i][i] / t) / sum(math.exp(s[j][i] / t) for j in range(n))) for i in range(n)) / n
    return 0.5 * (i2t + t2i)


def test_cosine_examples():
    a = SparseEmbedding([1, 4], [3.0, 4.0])
    b = SparseEmbedding([1, 2], [4.0, 3.0])
    assert abs(cosine_sim(a, a) - 1.0) < 1e-15
    assert cosine_sim(a, SparseEmbedding([0, 2], [1.0, 1.0])) == 0.0
    assert abs(cosine_sim(a, b) - 0.48) < 1e-15
    assert cosine_sim(a, SparseEmbedding()) == 0.0


def test_contrastive_single_pair_is_zero():
    rng = np.random.default_rng(0)
    batch = BatchEmbeddings([rand_emb(rng)], [rand_emb(rng)])
    assert contrastive_loss(batch, LossConfig()) == 0.0


def test_contrastive_identity_similarity():
    e0, e1 = SparseEmbedding([0], [1.0]), SparseEmbedding([1], [1.0])
    cfg = LossConfig(log_temperature=0.0)
    got = contrastive_loss(BatchEmbeddings([e0, e1], [e0, e1]), cfg)
    assert abs(got - math.log(1 + math.exp(-1))) < 1e-15
    assert abs(got - 0.31326168751822286) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_contrastive_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    imgs = [rand_emb(rng) for _ in range(5)]
    txts = [rand_emb(rng) for _ in range(5)]
    cfg = LossConfig(log_temperature=math.log(0.2))
    assert abs(contrastive_loss(BatchEmbeddings(imgs, txts), cfg) - naive_contrastive(imgs, txts, 0.2)) < 1e-12


def test_flops_examples():
    assert flops_loss([SparseEmbedding(), SparseEmbedding()], 5) == 0.0
    e1, e2 = SparseEmbedding.from_dense([1.0, 0.0]), SparseEmbedding.from_dense([1.0, 2.0])
    assert flops_loss([e1, e2], 2) == 2.0
    assert flops_loss([e2, e1], 2) == 2.0


def test_flops_rejects_out_of_vocab():
    with pytest.raises(ValueError):
        flops_loss([SparseEmbedding([5], [1.0])], 3)


def test_flops_strictly_increases_with_weight():
    rng = np.random.default_rng(1)
    embs = [rand_emb(rng) for _ in range(4)]
    base = flops_loss(embs, 12)
    e = embs[2]
    bumped = SparseEmbedding(e.ids, e.weights + np.eye(len(e))[0] * 0.1) if len(e) else SparseEmbedding([0], [0.1])
    assert flops_loss(embs[:2] + [bumped] + embs[3:], 12) > base


def test_scaling_invariance_of_contrastive_but_not_flops():
    rng = np.random.default_rng(2)
    imgs = [rand_emb(rng) for _ in range(4)]
    txts = [rand_emb(rng) for _ in range(4)]
    scale = lambda es: [SparseEmbedding(e.ids, e.weights * 3.0) for e in es]
    cfg = LossConfig()
    a = contrastive_loss(BatchEmbeddings(imgs, txts), cfg)
    b = contrastive_loss(BatchEmbeddings(scale(imgs), scale(txts)), cfg)
    assert abs(a - b) < 1e-12
    assert abs(flops_loss(scale(imgs), 12) - 9 * flops_loss(imgs, 12)) < 1e-12
    assert flops_loss(scale(imgs), 12) > flops_loss(imgs, 12)


def test_contrastive_decreases_with_diagonal():
    sims_batch = [SparseEmbedding([0, 1], [1.0, 0.5]), SparseEmbedding([1, 2], [1.0, 0.5])]
    cfg = LossConfig()
    base = contrastive_loss(BatchEmbeddings(sims_batch, sims_batch[::-1]), cfg)
    better = contrastive_loss(BatchEmbeddings(sims_batch, sims_batch), cfg)
    assert better < base and better >= 0


def test_total_with_zero_lambdas_equals_contrastive():
    rng = np.random.default_rng(3)
    batch = BatchEmbeddings([rand_emb(rng) for _ in range(3)], [rand_emb(rng) for _ in range(3)])
    cfg = LossConfig(0.0, 0.0)
    assert total_loss(batch, cfg, 12) == contrastive_loss(batch, cfg)


def test_total_linear_combination():
    rng = np.random.default_rng(4)
    batch = BatchEmbeddings([rand_emb(rng) for _ in range(3)], [rand_emb(rng) for _ in range(3)])
    cfg = LossConfig(0.3, 0.7)
    fused = total_loss(batch, cfg, 12)
    parts = contrastive_loss(batch, cfg) + 0.3 * flops_loss(batch.image_embs, 12) + 0.7 * flops_loss(batch.text_embs, 12)
    assert abs(fused - parts) < 1e-12


def test_tensor_and_sparse_views_agree():
    rng = np.random.default_rng(5)
    imgs = [rand_emb(rng) for _ in range(4)]
    txts = [rand_emb(rng) for _ in range(4)]
    I = Tensor(np.stack([e.to_dense(12) for e in imgs]))
    T = Tensor(np.stack([e.to_dense(12) for e in txts]))
    cfg = LossConfig(0.2, 0.1, log_temperature=math.log(0.1))
    parts = total_loss_tensor(I, T, Tensor(cfg.log_temperature), 0.2, 0.1)
    assert abs(parts.total.item() - total_loss(BatchEmbeddings(imgs, txts), cfg, 12)) < 1e-12
    assert abs(flops_tensor(I).item() - flops_loss(imgs, 12)) < 1e-12


def test_zero_lambda_tensor_total_is_bitwise_contrastive():
    rng = np.random.default_rng(6)
    I, T = Tensor(rng.random((3, 5))), Tensor(rng.random((3, 5)))
    parts = total_loss_tensor(I, T, Tensor(math.log(0.07)), 0.0, 0.0)
    assert parts.total.data.tobytes() == parts.contrastive.data.tobytes()


def test_log_temperature_gradient():
    rng = np.random.default_rng(7)
    I, T = Tensor(rng.random((3, 6))), Tensor(rng.random((3, 6)))
    lt = Tensor(math.log(0.3))
    r = nx.grad_check(lambda: total_loss_tensor(I, T, lt, 1e-2, 1e-2).total, [lt, I, T], h=1e-5)
    assert r.max_rel_error < 1e-4


def test_dense_baseline():
    rng = np.random.default_rng(8)
    cfg = LossConfig(log_temperature=math.log(0.5))
    assert dense_baseline_loss(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), cfg) == 0.0
    imgs = [rand_emb(rng) for _ in range(4)]
    txts = [rand_emb(rng) for _ in range(4)]
    di = np.stack([e.to_dense(12) for e in imgs])
    dt = np.stack([e.to_dense(12) for e in txts])
    assert abs(dense_baseline_loss(di, dt, cfg) - contrastive_loss(BatchEmbeddings(imgs, txts), cfg)) < 1e-12
    assert abs(dense_baseline_loss(di, dt, cfg) - naive_contrastive(imgs, txts, 0.5)) < 1e-12


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_image=-1.0)
    with pytest.raises(ValueError):
        LossConfig(log_temperature=math.log(0.005), temperature_floor=0.01)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_contrastive_nonnegative(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    batch = BatchEmbeddings([rand_emb(rng) for _ in range(n)], [rand_emb(rng) for _ in range(n)])
    assert contrastive_loss(batch, LossConfig()) >= 0
