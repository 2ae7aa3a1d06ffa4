"""Label-space partitioning by recursive balanced spherical 2-means."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClusterMixin

from elias.exceptions import DataFormatError

_PART_HEADER = struct.Struct("<II")


@dataclass
class Partition:
    """``assignment[l]`` is the cluster id of label ``l``; ``num_clusters`` is a power of two."""

    assignment: np.ndarray
    num_clusters: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.size and (
            self.assignment.min() < 0 or self.assignment.max() >= self.num_clusters
        ):
            raise ValueError("cluster id out of range")

    @property
    def num_labels(self):
        return self.assignment.size

    def cluster_sizes(self):
        return np.bincount(self.assignment, minlength=self.num_clusters)

    def members(self, c):
        return np.flatnonzero(self.assignment == c)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(_PART_HEADER.pack(self.num_labels, self.num_clusters))
            f.write(self.assignment.astype("<i4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            L, C = _PART_HEADER.unpack(f.read(_PART_HEADER.size))
            body = f.read()
        if len(body) != 4 * L:
            raise DataFormatError(f"{path}: expected {L} cluster ids")
        return cls(np.frombuffer(body, dtype="<i4").astype(np.int64), C)


def _row_norms(M):
    if sp.issparse(M):
        return np.sqrt(np.asarray(M.multiply(M).sum(axis=1)).ravel())
    return np.linalg.norm(M, axis=1)


def label_centroids(Y, Psi):
    """Unit-normalised sum of the static reps of each label's positive points.

    Returns ``(centroids, zero_mask)``; ``centroids`` is sparse when ``Psi`` is.
    Labels without positives (or whose reps cancel) get a zero row and are flagged.
    """
    M = sp.csr_matrix(Y).T.tocsr() @ Psi
    norms = _row_norms(M)
    zero = norms <= 1e-12
    scale = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, norms))
    if sp.issparse(M):
        M = sp.csr_matrix(sp.diags(scale) @ M)
        M.eliminate_zeros()
    else:
        M = M * scale[:, None]
    return M, zero


def _dot(points, c):
    return np.asarray(points @ c).ravel()


def _unit_mean(points, mask):
    s = np.asarray(points[mask].sum(axis=0)).ravel()
    n = np.linalg.norm(s)
    return s / n if n > 0 else s


def _balanced_assign(diff):
    """Top half (ceil) by diff goes to side A; ties toward the lower point id."""
    n = diff.size
    order = np.lexsort((np.arange(n), -diff))
    in_a = np.zeros(n, dtype=bool)
    in_a[order[: (n + 1) // 2]] = True
    return in_a


def _objective(points, in_a, ca, cb):
    return float(_dot(points[in_a], ca).sum() + _dot(points[~in_a], cb).sum())


def balanced_2means(points, seed=0, max_iters=50, return_history=False):
    """Split rows of ``points`` into two halves whose sizes differ by at most one.

    Alternates a median split on ``sim(x, c_A) - sim(x, c_B)`` with a
    unit-mean centroid update until the split stops changing.
    """
    n = points.shape[0]
    if n < 2:
        raise ValueError("balanced_2means needs at least two points")
    rng = np.random.default_rng(seed)
    i, j = rng.choice(n, size=2, replace=False)
    ca = _unit_mean(points, np.eye(1, n, i, dtype=bool).ravel())
    cb = _unit_mean(points, np.eye(1, n, j, dtype=bool).ravel())
    in_a = None
    history = []
    for _ in range(max_iters):
        diff = _dot(points, ca) - _dot(points, cb)
        if in_a is None and not np.any(np.abs(diff) > 1e-12):
            # degenerate seeds (identical points): fall back to a random balanced split
            perm = rng.permutation(n)
            new = np.zeros(n, dtype=bool)
            new[perm[: (n + 1) // 2]] = True
        else:
            new = _balanced_assign(diff)
        if in_a is not None and np.array_equal(new, in_a):
            break
        in_a = new
        ca = _unit_mean(points, in_a)
        cb = _unit_mean(points, ~in_a)
        history.append(_objective(points, in_a, ca, cb))
    a_ids = np.flatnonzero(in_a)
    b_ids = np.flatnonzero(~in_a)
    if return_history:
        return a_ids, b_ids, history
    return a_ids, b_ids


def build_partition(centroids, num_clusters, seed=0, max_iters=50, zero_mask=None):
    C = int(num_clusters)
    L = centroids.shape[0]
    if C < 1 or C & (C - 1):
        raise ValueError(f"number of clusters must be a power of two, got {C}")
    if C > L:
        raise ValueError(f"number of clusters {C} exceeds number of labels {L}")
    if zero_mask is None:
        zero_mask = _row_norms(centroids) <= 1e-12
    active = np.flatnonzero(~zero_mask)
    if active.size < C:
        # too little geometry to cluster: everything is distributed round-robin
        active = np.array([], dtype=np.int64)
    rng = np.random.default_rng(seed)
    assignment = np.full(L, -1, dtype=np.int64)

    if active.size:
        points = centroids[active]
        groups = [np.arange(active.size)]
        while len(groups) < C:
            nxt = []
            for g in groups:
                a, b = balanced_2means(points[g], seed=rng.integers(2**31), max_iters=max_iters)
                nxt.extend((g[a], g[b]))
            groups = nxt
        for c, g in enumerate(groups):
            assignment[active[g]] = c

    sizes = np.bincount(assignment[assignment >= 0], minlength=C)
    for lab in np.flatnonzero(assignment < 0):
        c = int(np.argmin(sizes))
        assignment[lab] = c
        sizes[c] += 1
    return Partition(assignment, C)


class BalancedLabelClusterer(ClusterMixin, BaseEstimator):
    """Cluster labels given point reps ``X`` (N x D') and label matrix ``Y`` (N x L).

    ``labels_`` holds the cluster id of every label (not of every point).
    """

    def __init__(self, n_clusters=8, random_state=0, max_iter=50):
        self.n_clusters = n_clusters
        self.random_state = random_state
        self.max_iter = max_iter

    def fit(self, X, Y):
        centroids, zero = label_centroids(Y, X)
        self.partition_ = build_partition(
            centroids, self.n_clusters, seed=self.random_state, max_iters=self.max_iter, zero_mask=zero
        )
        self.labels_ = self.partition_.assignment
        self.zero_centroid_labels_ = np.flatnonzero(zero)
        return self

    def fit_predict(self, X, Y):
        return self.fit(X, Y).labels_
