"""Ranking metrics (P@K, R@K, nDCG@K, PSP@K) and ensemble merging.

A ranked prediction is a list with one ``(labels, scores)`` pair per point,
labels ordered by descending score (ties toward the lower label id).
Ground truth is either a CSR label matrix or a list of label collections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from elias.exceptions import DataFormatError


@dataclass
class RankedPrediction:
    labels: list
    scores: list

    def __post_init__(self):
        for i, lab in enumerate(self.labels):
            if len(set(np.asarray(lab).tolist())) != len(lab):
                raise ValueError(f"duplicate labels in prediction for point {i}")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_scores(cls, label_lists, score_lists):
        """Sort each point's labels by score (descending, ties by lower id)."""
        labels, scores = [], []
        for lab, sc in zip(label_lists, score_lists):
            lab = np.asarray(lab, dtype=np.int64)
            sc = np.asarray(sc, dtype=np.float64)
            order = np.lexsort((lab, -sc))
            labels.append(lab[order])
            scores.append(sc[order])
        return cls(labels, scores)

    def truncate(self, k):
        return RankedPrediction([l[:k] for l in self.labels], [s[:k] for s in self.scores])

    def to_csr(self, num_labels):
        ind = np.concatenate([np.asarray(l, dtype=np.int64) for l in self.labels]) if self.labels else np.zeros(0, np.int64)
        val = np.concatenate([np.asarray(s, dtype=np.float64) for s in self.scores]) if self.scores else np.zeros(0)
        ptr = np.r_[0, np.cumsum([len(l) for l in self.labels])]
        return sp.csr_matrix((val, ind, ptr), shape=(len(self.labels), num_labels))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for lab, sc in zip(self.labels, self.scores):
                f.write(" ".join(f"{int(l)}:{float(s)!r}" for l, s in zip(lab, sc)) + "\n")

    @classmethod
    def load(cls, path):
        labels, scores = [], []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                lab, sc = [], []
                for tok in line.split():
                    l, sep, s = tok.partition(":")
                    if not sep:
                        raise DataFormatError(f"{path}:{lineno}: bad token {tok!r}")
                    lab.append(int(l))
                    sc.append(float(s))
                labels.append(lab)
                scores.append(sc)
        return cls.from_scores(labels, scores)


def _truth_sets(truth):
    if sp.issparse(truth):
        truth = sp.csr_matrix(truth)
        return [truth.indices[truth.indptr[i]:truth.indptr[i + 1]] for i in range(truth.shape[0])]
    return [np.asarray(list(t), dtype=np.int64) for t in truth]


def _hits(pred, truth, K):
    """(n, K) 0/1 matrix of hits at each rank; ranks past the prediction length are 0."""
    sets = _truth_sets(truth)
    if len(sets) != len(pred):
        raise ValueError(f"{len(pred)} predictions but {len(sets)} ground-truth rows")
    H = np.zeros((len(pred), K))
    for i, (lab, t) in enumerate(zip(pred.labels, sets)):
        top = np.asarray(lab[:K], dtype=np.int64)
        H[i, : top.size] = np.isin(top, t)
    return H, np.array([len(t) for t in sets])


def _check_k(K):
    if K < 1:
        raise ValueError("K must be >= 1")


def precision_at_k(pred, truth, K):
    _check_k(K)
    H, _ = _hits(pred, truth, K)
    return float(H.sum(axis=1).mean() / K) if len(pred) else 0.0


def recall_at_k(pred, truth, K):
    """Mean over points with at least one true label."""
    _check_k(K)
    H, n_true = _hits(pred, truth, K)
    ok = n_true > 0
    if not ok.any():
        return 0.0
    return float((H[ok].sum(axis=1) / n_true[ok]).mean())


def ndcg_at_k(pred, truth, K):
    """nDCG with log2 discounts; points without true labels are skipped."""
    _check_k(K)
    H, n_true = _hits(pred, truth, K)
    disc = 1.0 / np.log2(np.arange(2, K + 2))
    ok = n_true > 0
    if not ok.any():
        return 0.0
    dcg = H[ok] @ disc
    cum = np.cumsum(disc)
    idcg = cum[np.minimum(n_true[ok], K) - 1]
    return float((dcg / idcg).mean())


def psp_at_k(pred, truth, propensities, K, normalized=False):
    """Propensity-scored precision.

    Default: per point ``sum_j y_rank(j) / p_rank(j)`` over the top ``K``,
    averaged over points. ``normalized=True`` divides each point's sum by
    its best attainable value and averages over points with true labels.
    """
    _check_k(K)
    inv = 1.0 / np.asarray(propensities, dtype=np.float64)
    sets = _truth_sets(truth)
    num, den = np.zeros(len(pred)), np.zeros(len(pred))
    for i, (lab, t) in enumerate(zip(pred.labels, sets)):
        top = np.asarray(lab[:K], dtype=np.int64)
        num[i] = inv[top[np.isin(top, t)]].sum()
        if len(t):
            den[i] = np.sort(inv[t])[::-1][:K].sum()
    if not normalized:
        return float(num.mean()) if len(pred) else 0.0
    ok = den > 0
    return float((num[ok] / den[ok]).mean()) if ok.any() else 0.0


def evaluate(pred, truth, ks=(1, 3, 5), propensities=None, recall_ks=(10, 20, 100), ndcg_ks=()):
    out = {}
    for k in ks:
        out[f"P@{k}"] = precision_at_k(pred, truth, k)
        if propensities is not None:
            out[f"PSP@{k}"] = psp_at_k(pred, truth, propensities, k)
    for k in recall_ks:
        out[f"R@{k}"] = recall_at_k(pred, truth, k)
    for k in ndcg_ks:
        out[f"nDCG@{k}"] = ndcg_at_k(pred, truth, k)
    return out


def merge_ensemble(preds):
    """Sum scores per label across models (absent = 0) and re-rank."""
    if not preds:
        raise ValueError("nothing to merge")
    n = len(preds[0])
    if any(len(p) != n for p in preds):
        raise ValueError("ensemble members disagree on the number of points")
    labels, scores = [], []
    for i in range(n):
        lab = np.concatenate([np.asarray(p.labels[i], dtype=np.int64) for p in preds])
        sc = np.concatenate([np.asarray(p.scores[i], dtype=np.float64) for p in preds])
        uniq, inv = np.unique(lab, return_inverse=True)
        labels.append(uniq)
        scores.append(np.bincount(inv, weights=sc, minlength=uniq.size))
    return RankedPrediction.from_scores(labels, scores)
