import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lexsparse import numerics as nx
from lexsparse.encoder import ModelConfig, PatchGrid, encode_image, encode_text, init_model
from lexsparse.numerics import Tape, Tensor
from lexsparse.projection import (
    SparseEmbedding,
    embed_image,
    embed_text,
    format_sparse,
    heatmap,
    parse_sparse,
    pool_sparse,
    project_positions,
    text_enc_batch,
)

from .conftest import golden


def eq5(logits, valid):
    """Direct per-token evaluation: log(1 + relu(max over valid rows))."""
    rows = [r for r, ok in zip(logits.tolist(), valid) if ok]
    out = []
    for k in range(len(rows[0])):
        m = max(r[k] for r in rows)
        out.append(math.log1p(max(0.0, m)))
    return np.array(out)


def test_sparse_embedding_invariants():
    with pytest.raises(ValueError):
        SparseEmbedding([3, 1], [1.0, 2.0])
    with pytest.raises(ValueError):
        SparseEmbedding([1, 3], [1.0, 0.0])
    e = SparseEmbedding.from_dense([0.0, 2.0, 0.0, 0.5])
    assert e.items() == [(1, 2.0), (3, 0.5)]
    np.testing.assert_array_equal(e.to_dense(4), [0.0, 2.0, 0.0, 0.5])


def test_sparse_text_format_roundtrip():
    e = SparseEmbedding([2, 9], [0.1 + 0.2, 1 / 3])
    item, back = parse_sparse(format_sparse("img-7", e))
    assert item == "img-7" and back == e


def test_pool_all_nonpositive_is_empty():
    assert len(pool_sparse(-np.abs(np.random.default_rng(0).normal(size=(3, 5))))) == 0


def test_pool_hand_values():
    e = pool_sparse(np.array([[0.5], [-1.0], [2.0]]))
    assert e.items() == [(0, math.log(3.0))]
    e = pool_sparse(np.array([[math.e - 1.0], [0.0]]))
    assert abs(e.weights[0] - 1.0) < 1e-15


def test_pool_excludes_invalid_and_requires_one():
    logits = np.array([[5.0, -1.0], [0.5, 0.2]])
    got = pool_sparse(logits, [False, True])
    assert got.ids.tolist() == [0, 1]
    np.testing.assert_allclose(got.weights, [math.log1p(0.5), math.log1p(0.2)], rtol=1e-15)
    with pytest.raises(ValueError):
        pool_sparse(logits, [False, False])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pool_matches_direct_eval(seed):
    rng = np.random.default_rng(seed)
    n, v = rng.integers(1, 6), rng.integers(1, 12)
    logits = rng.normal(size=(n, v))
    valid = rng.random(n) < 0.7
    valid[rng.integers(n)] = True
    got = pool_sparse(logits, valid).to_dense(v)
    assert np.max(np.abs(got - eq5(logits, valid))) < 1e-12
    perm = rng.permutation(n)
    assert pool_sparse(logits[perm], valid[perm]) == pool_sparse(logits, valid)
    bumped = logits.copy()
    bumped[rng.integers(n), rng.integers(v)] += rng.random() * 3
    assert np.all(pool_sparse(bumped, valid).to_dense(v) >= got)


def _tiny(vocab_size=4, d=4):
    cfg = ModelConfig(vocab_size=vocab_size, d=d, depth=0, heads=1, max_len=4, grid_h=1, grid_w=2, patch_dim=3)
    return init_model(cfg, 0)


def test_project_zero_weights_gives_bias():
    m = _tiny()
    for t in m.params.values():
        t.data[...] = 0.0
    m["head.logit_bias"].data[...] = [0.5, -1.0, 0.0, 2.0]
    out = project_positions(m, Tensor(np.random.default_rng(0).normal(size=(3, 4)))).data
    np.testing.assert_array_equal(out, np.tile([0.5, -1.0, 0.0, 2.0], (3, 1)))


def test_project_identity_embedding_hand_check():
    m = _tiny()
    m["text.token_embedding"].data[...] = np.eye(4)
    m["head.transform_fc"].data[...] = np.eye(4)
    m["head.transform_bias"].data[...] = 0.0
    m["head.ln_gain"].data[...] = 1.0
    m["head.ln_bias"].data[...] = 0.0
    m["head.logit_bias"].data[...] = [0.0, 1.0, 0.0, -1.0]
    h = np.array([[1.0, 2.0, -1.0, 0.0]])
    # hand: gelu then layer norm, identity embedding copies coordinates
    g = np.array([0.8413447460685429, 1.9544997361036416, -0.15865525393145707, 0.0])
    mu, var = g.mean(), g.var()
    expect = (g - mu) / math.sqrt(var + m.config.ln_eps) + [0.0, 1.0, 0.0, -1.0]
    np.testing.assert_allclose(project_positions(m, Tensor(h)).data, [expect], atol=1e-12)


def test_project_shape_mismatch():
    with pytest.raises(ValueError):
        project_positions(_tiny(), Tensor(np.ones((2, 5))))


def test_projection_grad_check(tiny_model):
    m = tiny_model
    feats = Tensor(np.random.default_rng(1).normal(size=(3, 8)))
    w = np.random.default_rng(2).normal(size=(3, 64))
    params = [m[n] for n in m.names("head.")] + [m.tied_embedding, feats]
    r = nx.grad_check(lambda: nx.sum(project_positions(m, feats) * w), params, h=1e-5)
    assert r.max_rel_error < 1e-4


def test_embed_text_is_composition(tiny_model):
    m = tiny_model
    seq = [2, 9, 17, 3]
    manual = pool_sparse(project_positions(m, encode_text(m, seq)))
    assert embed_text(m, seq) == manual
    grid = PatchGrid(np.random.default_rng(0).normal(size=(4, 6)), 2, 2)
    assert embed_image(m, grid) == pool_sparse(project_positions(m, encode_image(m, grid)))


def test_embed_text_of_empty_text(tiny_model):
    e = embed_text(tiny_model, [2, 3])
    assert all(w > 0 for w in e.weights)


def test_golden_embeddings(tiny_model):
    m = tiny_model
    t = embed_text(m, [2, 9, 17, 3]).to_dense(64)
    np.testing.assert_allclose(t, golden("embed_text_tiny", t), rtol=0, atol=1e-12)
    grid = PatchGrid(np.random.default_rng(5).normal(size=(4, 6)), 2, 2)
    i = embed_image(m, grid).to_dense(64)
    np.testing.assert_allclose(i, golden("embed_image_tiny", i), rtol=0, atol=1e-12)


def test_padding_never_leaks_into_pool(tiny_model):
    m = tiny_model
    batch = text_enc_batch(m, [[2, 9, 3], [2, 9, 17, 18, 19, 3]], pad_id=0).data
    np.testing.assert_allclose(batch[0], embed_text(m, [2, 9, 3]).to_dense(64), atol=1e-12)


def test_weight_tying_single_storage(tiny_model):
    m = tiny_model
    feats_img = encode_image(m, PatchGrid(np.ones((4, 6)), 2, 2))
    before_img = project_positions(m, feats_img).data.copy()
    before_txt = project_positions(m, encode_text(m, [2, 9, 3])).data.copy()
    m.tied_embedding.requires_grad = True
    with Tape() as tape:
        loss = nx.sum(text_enc_batch(m, [[2, 9, 3]], 0))
    tape.backward(loss)
    m.tied_embedding.data -= 0.1 * m.tied_embedding.grad
    assert not np.allclose(project_positions(m, feats_img).data, before_img)
    assert not np.allclose(project_positions(m, encode_text(m, [2, 9, 3])).data, before_txt)


def test_heatmap_single_and_multi_token(vocab):
    cfg = ModelConfig(vocab_size=vocab.size, d=8, depth=1, heads=2, grid_h=2, grid_w=2, patch_dim=6)
    m = init_model(cfg, 1)
    img = PatchGrid(np.random.default_rng(0).normal(size=(4, 6)), 2, 2)
    logits = project_positions(m, encode_image(m, img)).data
    cat = vocab.id_of("cat")
    np.testing.assert_array_equal(heatmap(m, vocab, img, "cat").values, logits[:, cat].reshape(2, 2))
    both = heatmap(m, vocab, img, "cat dog").values
    mean = (heatmap(m, vocab, img, "cat").values + heatmap(m, vocab, img, "dog").values) / 2
    assert np.max(np.abs(both - mean)) < 1e-12
    with pytest.raises(ValueError):
        heatmap(m, vocab, img, "   ")


def test_heatmap_runs_no_text_encoder(vocab, monkeypatch):
    import lexsparse.projection as proj

    cfg = ModelConfig(vocab_size=vocab.size, d=8, depth=1, heads=2, grid_h=2, grid_w=2, patch_dim=6)
    m = init_model(cfg, 1)
    calls = []
    monkeypatch.setattr(proj, "encode_text", lambda *a: calls.append(a))
    monkeypatch.setattr(proj, "encode_text_batch", lambda *a: calls.append(a))
    heatmap(m, vocab, PatchGrid(np.zeros((4, 6)), 2, 2), "cat")
    assert calls == []
