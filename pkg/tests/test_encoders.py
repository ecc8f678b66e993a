"""Encoder towers, classifier head, similarity ops, checkpoints."""

import numpy as np
import pytest

from pcsr.encoders import (ModelParams, distribution_similarity,
                           distribution_similarity_matrix, load_checkpoint,
                           save_checkpoint, similarity, similarity_matrix)
from pcsr.errors import DegenerateInputError, FormatError
from pcsr.numerics import grad_check


def make_params(seed=0, n_classes=4):
    return ModelParams(d_img=6, d_txt=5, d_hidden=8, d_embed=4,
                       n_classes=n_classes, seed=seed)


# ---------------------------------------------------------------------------
# towers
# ---------------------------------------------------------------------------

def test_embeddings_unit_norm():
    params = make_params()
    rng = np.random.default_rng(0)
    img = params.embed_image(rng.normal(size=(7, 6)))
    txt = params.embed_text(rng.normal(size=(7, 5)))
    assert np.allclose(np.linalg.norm(img, axis=1), 1.0, atol=1e-12)
    assert np.allclose(np.linalg.norm(txt, axis=1), 1.0, atol=1e-12)
    one = params.embed_image(rng.normal(size=6))
    assert one.shape == (4,) and np.isclose(np.linalg.norm(one), 1.0)


def test_init_deterministic_and_seed_sensitive():
    a, b, c = make_params(1), make_params(1), make_params(2)
    assert np.array_equal(a.f.fc1.weight, b.f.fc1.weight)
    assert not np.array_equal(a.f.fc1.weight, c.f.fc1.weight)
    # towers must not share weights even with equal dims
    d = ModelParams(d_img=5, d_txt=5, d_hidden=8, d_embed=4, n_classes=3, seed=1)
    assert not np.array_equal(d.f.fc1.weight, d.g.fc1.weight)


def test_tower_gradient_against_finite_differences():
    params = make_params()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 6))
    target = rng.normal(size=(5, 4))
    # the extra linear term keeps every gradient path at resolvable
    # magnitude, so finite-difference noise cannot dominate an entry
    # whose quadratic contributions cancel
    w_lin = rng.normal(size=(5, 4))

    def loss_fn():
        params.zero_grad()
        emb, cache = params.f.forward(x)
        diff = emb - target
        params.f.backward(cache, diff + w_lin)
        return 0.5 * float(np.sum(diff * diff)) + float(np.sum(emb * w_lin))

    worst = grad_check(loss_fn, params.f.params(), params.f.grads())
    assert worst < 1e-6


def test_text_tower_gradient():
    params = make_params()
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 5))
    w = rng.normal(size=(5, 4))

    def loss_fn():
        params.zero_grad()
        emb, cache = params.g.forward(x)
        params.g.backward(cache, w)
        return float(np.sum(emb * w))

    worst = grad_check(loss_fn, params.g.params(), params.g.grads())
    assert worst < 1e-6


# ---------------------------------------------------------------------------
# classifier head
# ---------------------------------------------------------------------------

def test_classify_probs_rows_sum_to_one():
    params = make_params()
    x = np.random.default_rng(5).normal(size=(6, 6))
    emb = params.embed_image(x)
    probs = params.classify_probs(emb)
    assert probs.shape == (6, 4)
    assert np.allclose(probs.sum(axis=1), 1.0)


def test_classify_tie_picks_lowest_index():
    params = make_params()
    params.head.weight[:] = 0.0
    params.head.bias[:] = 0.0
    pred = params.classify(np.ones(4) / 2.0)
    assert pred.label == 0
    assert np.allclose(pred.probs, 0.25)


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------

def test_similarity_matrix_matches_pairwise():
    rng = np.random.default_rng(6)
    u = rng.normal(size=(4, 3))
    v = rng.normal(size=(5, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    sims = similarity_matrix(u, v)
    for i in range(4):
        for j in range(5):
            assert np.isclose(sims[i, j], similarity(u[i], v[j]))


def test_distribution_similarity_clamped():
    p = np.array([1.0, 0.0])
    assert distribution_similarity(p, p) == 1.0
    q = np.array([0.0, 1.0])
    assert distribution_similarity(p, q) == 0.0
    near = np.array([1.0, 1e-9])
    assert 0.0 <= distribution_similarity(p, near) <= 1.0


def test_distribution_similarity_zero_vector():
    with pytest.raises(DegenerateInputError):
        distribution_similarity(np.zeros(3), np.ones(3) / 3)


def test_distribution_similarity_matrix_oracle():
    rng = np.random.default_rng(7)
    p = rng.uniform(0.01, 1.0, size=(3, 4))
    q = rng.uniform(0.01, 1.0, size=(5, 4))
    got = distribution_similarity_matrix(p, q)
    for i in range(3):
        for j in range(5):
            assert np.isclose(got[i, j], distribution_similarity(p[i], q[j]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_exact(tmp_path):
    params = make_params(seed=9)
    path = tmp_path / "ck.bin"
    save_checkpoint(params, path, epoch=17)
    back, epoch = load_checkpoint(path)
    assert epoch == 17
    for p, q in zip(params.all_params(), back.all_params()):
        assert np.array_equal(p, q)


def test_checkpoint_bytes_deterministic(tmp_path):
    params = make_params(seed=9)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(params, a, epoch=1)
    save_checkpoint(params, b, epoch=1)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_truncation_offset(tmp_path):
    params = make_params()
    path = tmp_path / "ck.bin"
    save_checkpoint(params, path, epoch=1)
    raw = path.read_bytes()
    path.write_bytes(raw[:-40])
    with pytest.raises(FormatError) as err:
        load_checkpoint(path)
    assert err.value.offset is not None


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "ck.bin"
    path.write_bytes(b"WRONGMAG" + b"\x00" * 32)
    with pytest.raises(FormatError) as err:
        load_checkpoint(path)
    assert err.value.offset == 0
