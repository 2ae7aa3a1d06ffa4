"""Forward pass, loss and exact gradients of the full index + classifier graph.

Gradients follow the subgradient conventions used throughout the package:
``min(1, .)`` clamps pass no gradient once saturated (boundary included),
only the argmax path of a label receives gradient, and top-b / top-K
selections are treated as fixed index sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from elias.exceptions import InvariantError, NonFiniteGradientError
from elias.index import (
    AdjacencyMatrix,
    row_softmax,
    shortlist as _shortlist,
    softmax,
    top_b_batch,
)
from elias.losses import EPS, LossBreakdown, sigmoid


@dataclass
class ModelParams:
    encoder: object
    W_C: np.ndarray
    W_L: np.ndarray
    A: AdjacencyMatrix

    def copy(self):
        enc = self.encoder
        enc = type(enc)(
            enc.mode,
            enc.dim,
            projection=None if enc.projection is None else enc.projection.copy(),
            embeddings=enc.embeddings,
        )
        return ModelParams(enc, self.W_C.copy(), self.W_L.copy(), self.A.copy())

    def groups(self):
        """Trainable arrays keyed by parameter-group name (views, not copies)."""
        g = {"W_C": self.W_C, "W_L": self.W_L, "A": self.A.weights}
        if self.encoder.trainable:
            g["encoder"] = self.encoder.projection
        return g


@dataclass
class Batch:
    X: sp.csr_matrix
    Y: sp.csr_matrix
    rows: np.ndarray

    @classmethod
    def from_dataset(cls, dataset, rows=None):
        rows = np.arange(dataset.num_points) if rows is None else np.asarray(rows)
        return cls(dataset.X[rows], dataset.Y[rows], rows)

    def __len__(self):
        return self.X.shape[0]

    def positives(self, i):
        return self.Y.indices[self.Y.indptr[i]:self.Y.indptr[i + 1]].astype(np.int64)


@dataclass
class ForwardResult:
    loss: LossBreakdown
    grads: dict | None
    num_paths: np.ndarray
    shortlists: list = field(default_factory=list, repr=False)


def forward_backward(params, batch, alpha, beta, b, K, lam, train_A=True, compute_grad=True,
                     keep_shortlists=False):
    """Mean loss over the batch (training-mode cluster selection) and its gradients."""
    enc = params.encoder
    A = params.A
    n = len(batch)
    Phi = enc.encode_batch(batch.X, batch.rows)
    sm = softmax(Phi @ params.W_C.T)
    S = np.minimum(1.0, alpha * sm)
    if train_A and compute_grad and A.is_pruned:
        raise InvariantError("a pruned adjacency is for inference only")
    an = row_softmax(A)
    E = np.minimum(1.0, beta * an)
    parents = A.parents()
    top = top_b_batch(S, b)

    dS = np.zeros_like(S)
    dE = np.zeros_like(E)
    dPhi = np.zeros_like(Phi)
    wl_rows, wl_coef, wl_point = [], [], []
    L_c = L_s = 0.0
    num_paths = np.zeros(n, dtype=np.int64)
    kept = []

    for i in range(n):
        pos = batch.positives(i)
        par = parents[pos]
        if np.any(par < 0):
            raise InvariantError(f"positive label {pos[par < 0][0]} has no incoming edge")
        sel = np.union1d(top[i], par)
        sl = _shortlist(sel, S[i], A, beta, K, edge=E)
        num_paths[i] = sl.num_paths
        if keep_shortlists:
            kept.append(sl)
        phi = Phi[i]
        lab = sl.labels
        sig = sigmoid(params.W_L[lab] @ phi)
        p_raw = sig * sl.scores
        p = np.clip(p_raw, EPS, 1.0 - EPS)
        y = np.isin(lab, pos).astype(np.float64)
        L_c -= float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))

        yhat_pos = np.zeros(0)
        if pos.size:
            ip = sl.paths.lookup(pos)
            if np.any(ip < 0):
                raise InvariantError("positive label missing from the explored path set")
            yhat_pos = sl.paths.scores[ip]
            L_s -= float(np.sum(np.log(np.maximum(yhat_pos, EPS))))

        if not compute_grad:
            continue
        inside = (p_raw > EPS) & (p_raw < 1.0 - EPS)
        dp = np.where(inside, -y / p + (1.0 - y) / (1.0 - p), 0.0)
        du = dp * sl.scores * sig * (1.0 - sig)
        wl_rows.append(lab)
        wl_coef.append(du)
        wl_point.append(np.full(lab.size, i))
        dPhi[i] += du @ params.W_L[lab]

        # gradient w.r.t. each argmax path score, then split over s_c * e_cl
        g_cl, g_sl, g_val = [sl.clusters], [sl.slots], [dp * sig]
        if pos.size and lam > 0:
            g_cl.append(sl.paths.clusters[ip])
            g_sl.append(sl.paths.slots[ip])
            g_val.append(np.where(yhat_pos > EPS, -lam / np.maximum(yhat_pos, EPS), 0.0))
        gc = np.concatenate(g_cl)
        gs = np.concatenate(g_sl)
        gv = np.concatenate(g_val)
        np.add.at(dS[i], gc, gv * E[gc, gs])
        np.add.at(dE, (gc, gs), gv * S[i, gc])

    loss = LossBreakdown(L_c / n, L_s / n, lam)
    if not compute_grad:
        return ForwardResult(loss, None, num_paths, kept)

    gS = np.where(alpha * sm >= 1.0, 0.0, alpha * dS)
    dlogits = sm * (gS - np.sum(sm * gS, axis=1, keepdims=True))
    grads = {"W_C": dlogits.T @ Phi / n}
    dPhi += dlogits @ params.W_C

    dW_L = np.zeros_like(params.W_L)
    if wl_rows:
        rows = np.concatenate(wl_rows)
        coef = np.concatenate(wl_coef)
        pts = np.concatenate(wl_point)
        contrib = sp.csr_matrix((coef, (rows, pts)), shape=(params.W_L.shape[0], n))
        dW_L = np.asarray(contrib @ Phi)
    grads["W_L"] = dW_L / n

    if enc.trainable:
        grads["encoder"] = np.asarray(batch.X.T @ dPhi) / n
    if train_A:
        gE = np.where((beta * an >= 1.0) | ~A.mask, 0.0, beta * dE)
        grads["A"] = an * (gE - np.sum(an * gE, axis=1, keepdims=True)) / n
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    return ForwardResult(loss, grads, num_paths, kept)


@dataclass
class Prediction:
    labels: np.ndarray
    scores: np.ndarray
    shortlist_scores: np.ndarray
    num_paths: int
    num_selected: int


def predict(params, X, rows, alpha, beta, b, K, topk=None):
    """Prediction-mode search: top-b clusters, top-K shortlist, final scores ranked.

    Returns one :class:`Prediction` per row, sorted by final score (ties
    toward the lower label id), truncated to ``topk`` when given.
    """
    Phi = params.encoder.encode_batch(X, rows)
    S = np.minimum(1.0, alpha * softmax(Phi @ params.W_C.T))
    E = np.minimum(1.0, beta * row_softmax(params.A))
    top = top_b_batch(S, b)
    out = []
    for i in range(Phi.shape[0]):
        sel = np.sort(top[i])
        sl = _shortlist(sel, S[i], params.A, beta, K, edge=E)
        p = sigmoid(params.W_L[sl.labels] @ Phi[i]) * sl.scores
        order = np.lexsort((sl.labels, -p))
        if topk is not None:
            order = order[:topk]
        out.append(Prediction(sl.labels[order], p[order], sl.scores[order], sl.num_paths, sel.size))
    return out
