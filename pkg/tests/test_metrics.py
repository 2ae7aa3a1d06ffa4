import numpy as np
import pytest
import scipy.sparse as sp

import naive
from elias.metrics import (
    RankedPrediction,
    evaluate,
    merge_ensemble,
    ndcg_at_k,
    precision_at_k,
    psp_at_k,
    recall_at_k,
)

from factories import random_ranking_instance
from oracles import check_against_naive


def _pred(*rankings):
    return RankedPrediction([np.array(r) for r in rankings], [np.linspace(1, 0.1, len(r)) for r in rankings])


def test_direct_count_example():
    pred, truth = _pred([1, 2, 3]), [{1, 3}]
    assert precision_at_k(pred, truth, 3) == pytest.approx(2 / 3)
    assert recall_at_k(pred, truth, 3) == 1.0


def test_perfect_ranking():
    pred, truth = _pred([4, 7, 1]), [{4, 7, 1}]
    assert precision_at_k(pred, truth, 1) == 1.0
    assert ndcg_at_k(pred, truth, 3) == pytest.approx(1.0)
    assert ndcg_at_k(pred, truth, 5) == pytest.approx(1.0)


def test_csr_truth_and_short_predictions():
    Y = sp.csr_matrix(np.array([[0, 1, 0, 1], [1, 0, 0, 0]]))
    pred = _pred([1], [2, 0])
    assert precision_at_k(pred, Y, 2) == pytest.approx((1 + 1) / 4)
    assert recall_at_k(pred, Y, 2) == pytest.approx((0.5 + 1) / 2)


def test_psp_reductions():
    pred, truth = _pred([1, 2, 3], [5, 6]), [{1, 3}, {6}]
    ones = np.ones(10)
    for K in (1, 2, 3):
        assert psp_at_k(pred, truth, ones, K) == pytest.approx(K * precision_at_k(pred, truth, K))
    assert psp_at_k(_pred([0, 2]), [{5}], ones, 2) == 0.0
    prop = np.full(10, 0.5)
    assert psp_at_k(pred, truth, prop, 1, normalized=True) == pytest.approx(0.5)


def test_k_must_be_positive():
    with pytest.raises(ValueError):
        precision_at_k(_pred([1]), [{1}], 0)


def test_row_count_mismatch():
    with pytest.raises(ValueError):
        precision_at_k(_pred([1]), [{1}, {2}], 1)


def test_duplicate_labels_rejected():
    with pytest.raises(ValueError):
        RankedPrediction([np.array([1, 1])], [np.array([0.5, 0.4])])


def test_from_scores_ties_lower_id():
    p = RankedPrediction.from_scores([[5, 2, 9]], [[0.3, 0.3, 0.9]])
    assert p.labels[0].tolist() == [9, 2, 5]


def test_metrics_match_naive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        pred, truth = random_ranking_instance(rng)
        prop = rng.uniform(0.05, 1.0, 30)
        check_against_naive(pred, truth, int(rng.integers(1, 8)), prop)


def test_single_point_precision_recall_bit_exact():
    rng = np.random.default_rng(1)
    for _ in range(200):
        pred, truth = random_ranking_instance(rng, max_points=1)
        K = int(rng.integers(1, 8))
        r = pred.labels[0].tolist()
        assert precision_at_k(pred, truth, K) == naive.precision(r, set(truth[0]), K)
        if truth[0]:
            assert recall_at_k(pred, truth, K) == naive.recall(r, set(truth[0]), K)


def test_precision_recall_consistency():
    rng = np.random.default_rng(2)
    for _ in range(300):
        pred, truth = random_ranking_instance(rng, max_points=1)
        if not truth[0]:
            continue
        K = int(rng.integers(1, 8))
        lhs = precision_at_k(pred, truth, K) * K
        rhs = recall_at_k(pred, truth, K) * min(K, len(truth[0]))
        assert lhs >= rhs - 1e-12


def test_evaluate_keys():
    pred, truth = _pred([1, 2, 3]), [{1}]
    out = evaluate(pred, truth, ks=(1, 3), propensities=np.ones(5), recall_ks=(3,), ndcg_ks=(3,))
    assert set(out) == {"P@1", "P@3", "PSP@1", "PSP@3", "R@3", "nDCG@3"}


def test_merge_identical_inputs():
    p = RankedPrediction.from_scores([[3, 1, 2]], [[0.2, 0.9, 0.5]])
    m = merge_ensemble([p, p, p])
    assert m.labels[0].tolist() == p.labels[0].tolist()


def test_merge_additivity_example():
    a = RankedPrediction.from_scores([[1]], [[0.9]])
    b = RankedPrediction.from_scores([[2]], [[0.4]])
    m = merge_ensemble([RankedPrediction.from_scores([[1, 2]], [[0.9, 0.4]]), b, b])
    assert m.labels[0].tolist() == [2, 1]
    assert m.scores[0][0] == pytest.approx(1.2)
    with pytest.raises(ValueError):
        merge_ensemble([])
    with pytest.raises(ValueError):
        merge_ensemble([a, RankedPrediction.from_scores([[1], [2]], [[1.0], [1.0]])])


def test_merge_matches_dict_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(1, 4))
        preds = []
        for _ in range(3):
            labs = [rng.choice(20, int(rng.integers(0, 8)), replace=False) for _ in range(n)]
            preds.append(RankedPrediction.from_scores(labs, [np.round(rng.random(len(l)), 2) for l in labs]))
        dicts = [[dict(zip(p.labels[i].tolist(), p.scores[i].tolist())) for i in range(n)] for p in preds]
        m = merge_ensemble(preds)
        assert [l.tolist() for l in m.labels] == naive.merge(dicts)


def test_prediction_file_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    pred, _ = random_ranking_instance(rng)
    path = tmp_path / "p.txt"
    pred.save(str(path))
    back = RankedPrediction.load(str(path))
    assert len(back) == len(pred)
    for a, b, sa, sb in zip(back.labels, pred.labels, back.scores, pred.scores):
        assert a.tolist() == b.tolist() and np.array_equal(sa, sb)
