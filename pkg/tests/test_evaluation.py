"""Retrieval metric oracles and division audit arithmetic."""

import numpy as np
import pytest

from pcsr.data import generate_synthetic
from pcsr.division import DivisionResult
from pcsr.encoders import ModelParams, similarity_matrix
from pcsr.errors import ConfigurationError, LogicError
from pcsr.evaluation import (RetrievalReport, audit_division, evaluate,
                             recall_at_k)


# ---------------------------------------------------------------------------
# recall@k
# ---------------------------------------------------------------------------

def test_identity_similarity_perfect_recall():
    sim = np.eye(12)
    rel = [[i] for i in range(12)]
    assert recall_at_k(sim, rel, 1) == 100.0
    assert recall_at_k(sim, rel, 10) == 100.0


def test_adversarial_ranking_zero_recall():
    # relevant item always scored strictly lowest
    n = 12
    sim = np.arange(n * n, dtype=float).reshape(n, n)
    np.fill_diagonal(sim, -1.0)
    rel = [[i] for i in range(n)]
    assert recall_at_k(sim, rel, 1) == 0.0
    assert recall_at_k(sim, rel, n - 1) == 0.0
    assert recall_at_k(sim, rel, n) == 100.0


def test_recall_brute_force_oracle():
    rng = np.random.default_rng(13)
    sim = rng.normal(size=(100, 40))
    rel = [rng.choice(40, size=rng.integers(1, 4), replace=False)
           for _ in range(100)]
    for k in (1, 5, 10):
        want = 0
        for row, r in zip(sim, rel):
            order = sorted(range(40), key=lambda j: (-row[j], j))
            want += bool(set(order[:k]) & set(int(x) for x in r))
        assert recall_at_k(sim, rel, k) == 100.0 * want / 100


def test_recall_tie_breaks_toward_lower_index():
    sim = np.array([[0.5, 0.5]])
    assert recall_at_k(sim, [[0]], 1) == 100.0
    assert recall_at_k(sim, [[1]], 1) == 0.0


def test_recall_invariant_under_monotone_transform():
    rng = np.random.default_rng(14)
    sim = rng.normal(size=(30, 20))
    rel = [[int(rng.integers(0, 20))] for _ in range(30)]
    for k in (1, 5):
        base = recall_at_k(sim, rel, k)
        assert recall_at_k(3.0 * sim + 7.0, rel, k) == base
        assert recall_at_k(np.tanh(sim), rel, k) == base


def test_recall_validation():
    sim = np.ones((3, 4))
    rel = [[0], [1], [2]]
    with pytest.raises(ConfigurationError):
        recall_at_k(sim, rel, 0)
    with pytest.raises(ConfigurationError):
        recall_at_k(sim, rel, 5)
    with pytest.raises(ConfigurationError):
        recall_at_k(np.ones(4), rel, 1)
    with pytest.raises(LogicError):
        recall_at_k(sim, [[0], [1]], 1)
    with pytest.raises(LogicError):
        recall_at_k(sim, [[0], [], [2]], 1)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_agrees_with_manual_recall():
    ds = generate_synthetic(15, 3, d_img=6, d_txt=6, seed=2)
    params = ModelParams(d_img=6, d_txt=6, d_hidden=8, d_embed=4,
                         n_classes=3, seed=0)
    idx = np.arange(15)
    report = evaluate(params, ds, idx)

    U = params.embed_image(ds.image_feats)
    V = params.embed_text(ds.text_feats)
    sim = similarity_matrix(U, V)
    rel = [[i] for i in range(15)]
    assert report.i2t_r1 == recall_at_k(sim, rel, 1)
    assert report.t2i_r5 == recall_at_k(sim.T, rel, 5)
    assert np.isclose(report.rsum,
                      report.i2t_r1 + report.i2t_r5 + report.i2t_r10
                      + report.t2i_r1 + report.t2i_r5 + report.t2i_r10)
    assert report.n_queries == 15


def test_evaluate_subset_gallery_only():
    ds = generate_synthetic(30, 3, d_img=6, d_txt=6, seed=2)
    params = ModelParams(d_img=6, d_txt=6, d_hidden=8, d_embed=4,
                         n_classes=3, seed=0)
    subset = np.arange(10, 22)
    report = evaluate(params, ds, subset)
    assert report.n_queries == 12


def test_evaluate_multi_caption_relevance():
    ds = generate_synthetic(12, 2, d_img=5, d_txt=5, seed=3,
                            captions_per_image=2)
    params = ModelParams(d_img=5, d_txt=5, d_hidden=8, d_embed=4,
                         n_classes=2, seed=1)
    report = evaluate(params, ds, np.arange(12))
    # gallery holds both captions of every image
    assert report.n_queries == 12
    assert 0.0 <= report.i2t_r1 <= 100.0


def test_evaluate_empty_rejected():
    ds = generate_synthetic(12, 2, seed=0)
    params = ModelParams(d_img=64, d_txt=64, d_hidden=8, d_embed=4,
                         n_classes=2, seed=0)
    with pytest.raises(ConfigurationError):
        evaluate(params, ds, [])


def test_report_table_layout():
    report = RetrievalReport(i2t_r1=10.0, i2t_r5=30.0, i2t_r10=50.0,
                             t2i_r1=12.5, t2i_r5=32.5, t2i_r10=52.5,
                             rsum=187.5, n_queries=40)
    text = report.table()
    assert "img->txt" in text and "txt->img" in text
    assert "rsum 187.5" in text
    d = report.to_dict()
    assert d["rsum"] == 187.5 and d["n_queries"] == 40


# ---------------------------------------------------------------------------
# division audit
# ---------------------------------------------------------------------------

def make_division(clean, refinable, ambiguous, indices):
    arr = lambda v: np.asarray(v, dtype=np.int64)
    return DivisionResult(clean=arr(clean), refinable=arr(refinable),
                          ambiguous=arr(ambiguous),
                          clean_posterior=np.zeros(len(indices)),
                          indices=arr(indices))


def test_audit_exact_fractions():
    mask = np.zeros(10, dtype=bool)
    mask[5:] = True  # pairs 5..9 corrupted
    division = make_division(clean=[0, 1, 2, 5], refinable=[6, 7],
                             ambiguous=[8, 9], indices=np.arange(10))
    audit = audit_division(division, mask)
    assert np.isclose(audit.clean_precision, 3 / 4)
    assert np.isclose(audit.clean_recall, 3 / 5)
    assert np.isclose(audit.corrupted_in_refinable, 2 / 5)
    assert np.isclose(audit.corrupted_in_ambiguous, 2 / 5)


def test_audit_perfect_division():
    mask = np.zeros(8, dtype=bool)
    mask[[1, 3]] = True
    division = make_division(clean=[0, 2, 4, 5, 6, 7], refinable=[1, 3],
                             ambiguous=[], indices=np.arange(8))
    audit = audit_division(division, mask)
    assert audit.clean_precision == 1.0
    assert audit.clean_recall == 1.0
    assert audit.corrupted_in_refinable == 1.0
    assert audit.corrupted_in_ambiguous == 0.0


def test_audit_degenerate_cases():
    mask = np.zeros(4, dtype=bool)
    division = make_division(clean=[], refinable=[0, 1], ambiguous=[2, 3],
                             indices=np.arange(4))
    audit = audit_division(division, mask)
    assert audit.clean_precision == 0.0  # empty clean set
    assert audit.corrupted_in_refinable == 0.0  # nothing corrupted


def test_audit_mask_too_short():
    division = make_division(clean=[0], refinable=[], ambiguous=[],
                             indices=[0, 9])
    with pytest.raises(LogicError):
        audit_division(division, np.zeros(5, dtype=bool))
