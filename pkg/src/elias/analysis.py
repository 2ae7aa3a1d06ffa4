"""Post-hoc analyses of a trained adjacency: pruning sweeps and edge-score statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from elias.index import AdjacencyMatrix, all_edge_scores, row_softmax

logger = logging.getLogger(__name__)


@dataclass
class PruneResult:
    adjacency: AdjacencyMatrix
    fraction: float
    orphaned: np.ndarray  # labels left without any incoming edge


def _keep_rows(A, keep, frozen=True):
    """Sub-matrix of the kept entries; ``frozen`` keeps the dropped mass in each row normaliser."""
    rows = []
    lse = np.full(A.num_clusters, -np.inf) if A.pruned_lse is None else A.pruned_lse.copy()
    for c in range(A.num_clusters):
        n = A.counts[c]
        k = keep[c, :n]
        w = A.weights[c, :n]
        rows.append((A.indices[c, :n][k], w[k]))
        if (~k).any():
            lse[c] = np.logaddexp(lse[c], logsumexp(w[~k]))
    if not frozen or (A.pruned_lse is None and np.all(np.isneginf(lse))):
        lse = None
    return AdjacencyMatrix.from_rows(rows, A.num_labels, kappa=A.kappa, pruned_lse=lse)


def prune_threshold(A, beta, t, renormalize=False):
    """Drop stored entries whose edge score ``min(1, beta * a_norm)`` is below ``t``.

    By default surviving edges keep their scores (the removed mass stays in
    the normaliser). ``renormalize=True`` re-spreads the softmax over the
    survivors instead.
    """
    if t < 0:
        raise ValueError("threshold must be non-negative")
    E = all_edge_scores(A, beta)
    keep = A.mask & (E >= t)
    pruned = _keep_rows(A, keep, frozen=not renormalize)
    frac = 1.0 - pruned.nnz / A.nnz if A.nnz else 0.0
    orphaned = np.flatnonzero((A.label_degrees() > 0) & (pruned.label_degrees() == 0))
    if orphaned.size:
        logger.warning("pruning at %g leaves %d labels unreachable", t, orphaned.size)
    return PruneResult(pruned, float(frac), orphaned)


def prune_topk(A, k, renormalize=False):
    """Keep the ``k`` largest weights of every row (ties toward the lower label id)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    keep = np.zeros(A.indices.shape, dtype=bool)
    for c in range(A.num_clusters):
        n = A.counts[c]
        w = A.weights[c, :n]
        order = np.lexsort((A.indices[c, :n], -w))[:k]
        keep[c, order] = True
    return _keep_rows(A, keep, frozen=not renormalize)


@dataclass
class EdgeStats:
    profile: np.ndarray  # mean sorted a_norm per rank position
    assigned: np.ndarray  # per label, clusters with edge score > threshold
    decile_means: np.ndarray  # mean of ``assigned`` per frequency decile (rarest first)

    def top_mass(self, m):
        return float(self.profile[:m].sum())


def edge_profile(A):
    """Row-softmax values sorted descending within each row, averaged over non-empty rows."""
    P = -np.sort(-row_softmax(A), axis=1)
    nonempty = A.counts > 0
    return P[nonempty].mean(axis=0) if nonempty.any() else np.zeros(A.kappa)


def assigned_clusters(A, beta, threshold=0.25):
    E = all_edge_scores(A, beta)
    hit = A.mask & (E > threshold)
    return np.bincount(A.indices[hit], minlength=A.num_labels)


def edge_stats(A, beta, label_freq=None, threshold=0.25, num_buckets=10):
    """Averaged edge-weight profile and per-decile multi-cluster assignment counts."""
    assigned = assigned_clusters(A, beta, threshold)
    if label_freq is None:
        deciles = np.full(num_buckets, np.nan)
    else:
        order = np.lexsort((np.arange(A.num_labels), np.asarray(label_freq)))
        deciles = np.array([assigned[b].mean() if b.size else np.nan for b in np.array_split(order, num_buckets)])
    return EdgeStats(edge_profile(A), assigned, deciles)
