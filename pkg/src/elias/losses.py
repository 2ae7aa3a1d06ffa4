"""Label-classifier scoring and the combined classification + shortlist loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from elias.exceptions import InvariantError

EPS = 1e-12


def sigmoid(u):
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def final_scores(W_L, phi, shortlist):
    """``p_l = sigmoid(w_l . phi) * yhat_l`` for every shortlisted label."""
    if len(shortlist) == 0:
        raise ValueError("empty shortlist")
    return sigmoid(W_L[shortlist.labels] @ phi) * shortlist.scores


def classification_loss(p, y, eps=EPS):
    """Binary cross-entropy summed over the shortlist; ``p`` is clamped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def shortlist_loss(yhat_pos, eps=EPS):
    """Negative log-likelihood of the positives' path scores."""
    yhat_pos = np.asarray(yhat_pos, dtype=np.float64)
    if np.any(yhat_pos <= 0):
        raise InvariantError("positive label missing from the explored path set")
    return float(-np.sum(np.log(np.maximum(yhat_pos, eps))))


def total_loss(L_c, L_s, lam):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return L_c + lam * L_s


@dataclass
class LossBreakdown:
    L_c: float
    L_s: float
    lam: float

    @property
    def total(self):
        return total_loss(self.L_c, self.L_s, self.lam)
