"""Sparse re-ranker over the top predictions and the decision-tree score calibration.

The ranker fits one L2-regularised logistic regression per label on the
points whose candidate list contains that label, using the static
representation psi(x) as features. Calibration maps
``(p, q, p*q, label frequency)`` to a relevance correction with a CART tree;
the final score is ``T(p, q, p*q, f) + p*q``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed
from scipy.optimize import minimize
from sklearn.base import BaseEstimator
from sklearn.tree import DecisionTreeClassifier

from elias.exceptions import DataFormatError
from elias.losses import sigmoid

logger = logging.getLogger(__name__)


def _logistic_objective(w, Z, t, reg):
    """Loss, gradient and Hessian-vector product for targets ``t`` in {-1, +1}."""
    m = t * (Z @ w)
    loss = np.logaddexp(0.0, -m).sum() + 0.5 * reg * w @ w
    s = sigmoid(-m)
    grad = -(Z.T @ (t * s)) + reg * w
    d = s * (1.0 - s)

    def hessp(v):
        return Z.T @ (d * (Z @ v)) + reg * v

    return loss, grad, hessp


def fit_logistic(Z, y, reg=1.0, max_iter=100, tol=1e-6):
    """L2-regularised logistic regression by trust-region Newton-CG.

    Minimises ``sum_i log(1 + exp(-t_i w.z_i)) + reg/2 |w|^2``. Returns
    ``(w, objective, grad_norm)``.
    """
    t = np.where(np.asarray(y) > 0, 1.0, -1.0)
    cache = {}

    def f(w):
        key = w.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = _logistic_objective(w, Z, t, reg)
        return cache[key]

    res = minimize(
        lambda w: f(w)[0],
        np.zeros(Z.shape[1]),
        jac=lambda w: f(w)[1],
        hessp=lambda w, v: f(w)[2](v),
        method="trust-ncg",
        options={"gtol": tol, "maxiter": max_iter},
    )
    loss, grad, _ = _logistic_objective(res.x, Z, t, reg)
    return res.x, float(loss), float(np.linalg.norm(grad))


def candidate_pairs(candidates, Y):
    """Flatten per-point candidate lists into (point, label, target) arrays."""
    Y = sp.csr_matrix(Y)
    pts = np.concatenate([np.full(len(c), i) for i, c in enumerate(candidates)]) if candidates else np.zeros(0, int)
    labs = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidates]) if candidates else np.zeros(0, int)
    target = np.asarray(Y[pts, labs]).ravel() > 0
    return pts.astype(np.int64), labs, target


def _fit_one(Psi, pts, target, reg, max_iter, tol):
    Z = Psi[pts]
    cols = np.unique(Z.indices)
    Zc = Z[:, cols]
    w, obj, gnorm = fit_logistic(Zc, target, reg, max_iter, tol)
    keep = w != 0
    return cols[keep], w[keep], obj, gnorm


class SparseRanker(BaseEstimator):
    """Per-label sparse logistic classifiers trained on candidate (point, label) pairs."""

    def __init__(self, reg=1.0, max_iter=100, tol=1e-6, n_jobs=1):
        self.reg = reg
        self.max_iter = max_iter
        self.tol = tol
        self.n_jobs = n_jobs

    def fit(self, Psi, Y, candidates):
        """``Psi``: (N, D') static reps; ``Y``: (N, L) labels; ``candidates``: per-point label lists."""
        Psi = sp.csr_matrix(Psi)
        L = Y.shape[1]
        pts, labs, target = candidate_pairs(candidates, Y)
        order = np.argsort(labs, kind="stable")
        pts, labs, target = pts[order], labs[order], target[order]
        bounds = np.searchsorted(labs, np.arange(L + 1))
        todo = [l for l in range(L) if bounds[l + 1] > bounds[l]]
        results = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(_fit_one)(
                Psi, pts[bounds[l]:bounds[l + 1]], target[bounds[l]:bounds[l + 1]], self.reg, self.max_iter, self.tol
            )
            for l in todo
        )
        rows, cols, vals = [], [], []
        self.objectives_ = np.zeros(L)
        self.grad_norms_ = np.zeros(L)
        for l, (c, v, obj, g) in zip(todo, results):
            rows.append(np.full(c.size, l))
            cols.append(c)
            vals.append(v)
            self.objectives_[l] = obj
            self.grad_norms_[l] = g
        self.weights_ = sp.csr_matrix(
            (np.concatenate(vals) if vals else [], (np.concatenate(rows) if rows else [], np.concatenate(cols) if cols else [])),
            shape=(L, Psi.shape[1]),
        )
        self.unseen_labels_ = np.setdiff1d(np.arange(L), todo)
        if self.unseen_labels_.size:
            logger.info("%d labels never appear in a candidate list; their weights stay zero", self.unseen_labels_.size)
        return self

    def decision_function(self, Psi, candidates):
        Psi = sp.csr_matrix(Psi)
        out = []
        for i, cand in enumerate(candidates):
            cand = np.asarray(cand, dtype=np.int64)
            out.append(np.asarray(self.weights_[cand] @ Psi[i].T.toarray()).ravel())
        return out

    def predict_proba(self, Psi, candidates):
        """``q = sigmoid(w_l . psi(x))`` for each candidate label of each point."""
        return [sigmoid(z) for z in self.decision_function(Psi, candidates)]

    def save(self, path):
        W = self.weights_
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{W.shape[0]} {W.shape[1]}\n")
            for l in range(W.shape[0]):
                lo, hi = W.indptr[l], W.indptr[l + 1]
                if hi > lo:
                    feats = " ".join(f"{int(j)}:{float(v)!r}" for j, v in zip(W.indices[lo:hi], W.data[lo:hi]))
                    f.write(f"{l} {feats}\n")

    @classmethod
    def load(cls, path, **kw):
        with open(path, encoding="utf-8") as f:
            L, D = (int(x) for x in f.readline().split())
            rows, cols, vals = [], [], []
            for line in f:
                head, *toks = line.split()
                for tok in toks:
                    j, _, v = tok.partition(":")
                    rows.append(int(head))
                    cols.append(int(j))
                    vals.append(float(v))
        obj = cls(**kw)
        obj.weights_ = sp.csr_matrix((vals, (rows, cols)), shape=(L, D))
        return obj


# -- calibration ---------------------------------------------------------------


def calibration_features(p, q, f):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return np.column_stack([p, q, p * q, np.asarray(f, dtype=np.float64)])


@dataclass
class CalibrationTree:
    """Binary tree over the features (p, q, p*q, f).

    Internal nodes hold ``feature``, ``threshold``, ``left``, ``right``
    (``x[feature] <= threshold`` goes left); leaves hold ``value`` in [0, 1].
    """

    nodes: list

    def __post_init__(self):
        for node in self.nodes:
            if "value" in node:
                if not np.isfinite(node["value"]):
                    raise ValueError("non-finite leaf value")
            elif node["feature"] not in (0, 1, 2, 3):
                raise ValueError(f"invalid split feature {node['feature']}")

    @property
    def depth(self):
        def walk(k):
            n = self.nodes[k]
            return 0 if "value" in n else 1 + max(walk(n["left"]), walk(n["right"]))

        return walk(0)

    def split_features(self, max_level=None):
        """Features used by internal nodes, optionally only in the first ``max_level`` levels."""
        found, frontier, level = [], [0], 0
        while frontier and (max_level is None or level < max_level):
            nxt = []
            for k in frontier:
                n = self.nodes[k]
                if "value" not in n:
                    found.append(n["feature"])
                    nxt.extend((n["left"], n["right"]))
            frontier, level = nxt, level + 1
        return found

    def predict(self, X):
        # thresholds were learned on float32 inputs
        X = np.asarray(X, dtype=np.float32).astype(np.float64)
        out = np.empty(X.shape[0])
        for i, x in enumerate(X):
            k = 0
            while "value" not in self.nodes[k]:
                n = self.nodes[k]
                k = n["left"] if x[n["feature"]] <= n["threshold"] else n["right"]
            out[i] = self.nodes[k]["value"]
        return out

    def to_json(self):
        return json.dumps({"nodes": self.nodes})

    @classmethod
    def from_json(cls, text):
        try:
            return cls(json.loads(text)["nodes"])
        except (KeyError, json.JSONDecodeError) as err:
            raise DataFormatError(f"bad calibration tree: {err}") from None

    @classmethod
    def from_sklearn(cls, clf):
        tree = clf.tree_
        classes = list(clf.classes_)
        pos = classes.index(1) if 1 in classes else None
        nodes = []
        for k in range(tree.node_count):
            if tree.children_left[k] == -1:
                v = tree.value[k, 0]
                frac = 0.0 if pos is None else float(v[pos] / v.sum())
                nodes.append({"value": frac})
            else:
                nodes.append(
                    {
                        "feature": int(tree.feature[k]),
                        "threshold": float(tree.threshold[k]),
                        "left": int(tree.children_left[k]),
                        "right": int(tree.children_right[k]),
                    }
                )
        return cls(nodes)


class ScoreCalibrator(BaseEstimator):
    """CART (Gini) calibration tree; leaves predict the fraction of positives."""

    def __init__(self, max_depth=8, min_samples_leaf=50, random_state=0):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    def fit(self, X, y):
        """``X``: (n, 4) rows of (p, q, p*q, f); ``y``: 0/1 relevance."""
        y = np.asarray(y).astype(int)
        clf = DecisionTreeClassifier(
            criterion="gini",
            max_depth=self.max_depth,
            min_samples_leaf=self.min_samples_leaf,
            random_state=self.random_state,
        ).fit(np.asarray(X, dtype=np.float64), y)
        self.estimator_ = clf
        self.tree_ = CalibrationTree.from_sklearn(clf)
        return self

    def predict(self, X):
        return self.tree_.predict(X)

    def score_pairs(self, p, q, f):
        return calibrated_score(self.tree_, p, q, f)


def fit_calibration(p, q, f, y, max_depth=8, min_samples_leaf=50):
    return ScoreCalibrator(max_depth, min_samples_leaf).fit(calibration_features(p, q, f), y).tree_


def calibrated_score(tree, p, q, f):
    """``T(p, q, p*q, f) + p*q``, elementwise over arrays."""
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    return tree.predict(calibration_features(p, q, np.broadcast_to(f, p.shape))) + p * q
