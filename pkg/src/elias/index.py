"""The learnable cluster-to-label search index.

The adjacency matrix is row-sparse: each cluster row stores at most ``kappa``
label ids (sorted) with one real logit per stored entry. Only stored entries
take part in the row softmax; a stored weight can be any real number.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from elias.exceptions import DataFormatError, InvariantError

_ADJ_HEADER = struct.Struct("<III")


@dataclass
class AdjacencyMatrix:
    """Padded row storage: ``indices``/``weights`` are (C, kappa); row ``c`` uses the
    first ``counts[c]`` slots.

    ``pruned_lse`` (optional, per row) is the log-sum-exp of logits removed by
    pruning. It stays in the softmax normaliser so that the surviving entries
    keep their scores.
    """

    indices: np.ndarray
    weights: np.ndarray
    counts: np.ndarray
    num_labels: int
    pruned_lse: np.ndarray | None = None
    _parents: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.pruned_lse is not None:
            self.pruned_lse = np.asarray(self.pruned_lse, dtype=np.float64)

    @classmethod
    def from_rows(cls, rows, num_labels, kappa=None, pruned_lse=None):
        """Build from ``[(label_ids, weights), ...]``, one pair per cluster."""
        C = len(rows)
        counts = np.array([len(r[0]) for r in rows], dtype=np.int64)
        kappa = int(counts.max(initial=0)) if kappa is None else int(kappa)
        if counts.max(initial=0) > kappa:
            raise InvariantError("row has more than kappa entries")
        indices = np.full((C, kappa), -1, dtype=np.int64)
        weights = np.zeros((C, kappa))
        for c, (ids, w) in enumerate(rows):
            ids = np.asarray(ids, dtype=np.int64)
            w = np.asarray(w, dtype=np.float64)
            order = np.argsort(ids, kind="stable")
            indices[c, : ids.size] = ids[order]
            weights[c, : ids.size] = w[order]
        return cls(indices, weights, counts, int(num_labels), pruned_lse)

    @classmethod
    def from_partition(cls, partition, weight=0.0):
        """Stage-1 index: one edge per label into its partition cluster, equal weights."""
        rows = []
        for c in range(partition.num_clusters):
            ids = partition.members(c)
            rows.append((ids, np.full(ids.size, weight)))
        return cls.from_rows(rows, partition.num_labels)

    @property
    def num_clusters(self):
        return self.indices.shape[0]

    @property
    def kappa(self):
        return self.indices.shape[1]

    @property
    def mask(self):
        return np.arange(self.kappa)[None, :] < self.counts[:, None]

    @property
    def nnz(self):
        return int(self.counts.sum())

    def row(self, c):
        n = self.counts[c]
        return self.indices[c, :n], self.weights[c, :n]

    def copy(self):
        lse = None if self.pruned_lse is None else self.pruned_lse.copy()
        return AdjacencyMatrix(self.indices.copy(), self.weights.copy(), self.counts.copy(), self.num_labels, lse)

    @property
    def is_pruned(self):
        return self.pruned_lse is not None

    def same_support(self, other):
        return (
            np.array_equal(self.counts, other.counts)
            and np.array_equal(self.indices[self.mask], other.indices[other.mask])
        )

    def entries(self):
        """Flat (cluster, slot, label, weight) arrays over stored entries."""
        c, s = np.nonzero(self.mask)
        return c, s, self.indices[c, s], self.weights[c, s]

    def to_csr(self, values=None):
        c, s, lab, w = self.entries()
        vals = w if values is None else values[c, s]
        return sp.csr_matrix((vals, (c, lab)), shape=(self.num_clusters, self.num_labels))

    def label_degrees(self):
        _, _, lab, _ = self.entries()
        return np.bincount(lab, minlength=self.num_labels)

    def validate(self, require_coverage=True):
        m = self.mask
        if np.any(self.counts > self.kappa):
            raise InvariantError("row count exceeds kappa")
        for c in range(self.num_clusters):
            ids = self.indices[c, : self.counts[c]]
            if ids.size and (ids[0] < 0 or ids[-1] >= self.num_labels or np.any(np.diff(ids) <= 0)):
                raise InvariantError(f"row {c}: label ids must be valid and strictly increasing")
        if not np.all(np.isfinite(self.weights[m])):
            raise InvariantError("non-finite adjacency weight")
        if require_coverage:
            missing = np.flatnonzero(self.label_degrees() == 0)
            if missing.size:
                raise InvariantError(f"{missing.size} labels have no incoming edge (e.g. {missing[0]})")

    def parents(self):
        """Per label, the row holding its largest weight (ties: lower cluster id); -1 if none."""
        if self._parents is None:
            c, _, lab, w = self.entries()
            order = np.lexsort((c, -w, lab))
            lab_s = lab[order]
            first = np.r_[True, lab_s[1:] != lab_s[:-1]] if lab_s.size else np.zeros(0, bool)
            par = np.full(self.num_labels, -1, dtype=np.int64)
            par[lab_s[first]] = c[order][first]
            self._parents = par
        return self._parents

    def invalidate(self):
        """Drop cached derived quantities after the weights were modified in place."""
        self._parents = None

    def save(self, path):
        if self.is_pruned:
            raise InvariantError("the adjacency file format cannot hold pruned rows; save a checkpoint instead")
        with open(path, "wb") as f:
            f.write(_ADJ_HEADER.pack(self.num_clusters, self.num_labels, self.kappa))
            for c in range(self.num_clusters):
                ids, w = self.row(c)
                f.write(struct.pack("<I", ids.size))
                f.write(ids.astype("<u4").tobytes())
                f.write(w.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            buf = f.read()
        if len(buf) < _ADJ_HEADER.size:
            raise DataFormatError(f"{path}: truncated adjacency header")
        C, L, kappa = _ADJ_HEADER.unpack_from(buf)
        pos = _ADJ_HEADER.size
        rows = []
        for _ in range(C):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            ids = np.frombuffer(buf, dtype="<u4", count=n, offset=pos).astype(np.int64)
            pos += 4 * n
            w = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float64)
            pos += 4 * n
            rows.append((ids, w))
        if pos != len(buf):
            raise DataFormatError(f"{path}: trailing bytes after adjacency rows")
        return cls.from_rows(rows, L, kappa)


# -- scoring ------------------------------------------------------------------


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cluster_scores(W_C, phi, alpha):
    """``min(1, alpha * softmax(W_C phi))``; ``phi`` may be one vector or a batch (n, D)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    logits = np.asarray(phi) @ np.asarray(W_C).T
    return np.minimum(1.0, alpha * softmax(logits))


def row_softmax(A):
    """Softmax of each row over its stored entries; padding slots are 0."""
    m = A.mask
    z = np.where(m, A.weights, -np.inf)
    zmax = np.max(z, axis=1, keepdims=True, initial=-np.inf)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(m, np.exp(z - zmax), 0.0)
    tot = e.sum(axis=1, keepdims=True)
    if A.pruned_lse is not None:
        tot = tot + np.exp(A.pruned_lse[:, None] - zmax)
    return np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)


def all_edge_scores(A, beta):
    """(C, kappa) matrix of ``min(1, beta * a_norm)``; padding slots are 0."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return np.minimum(1.0, beta * row_softmax(A))


def edge_scores(A, c, beta):
    """Edge scores of row ``c`` as ``(label_ids, scores)``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    ids, w = A.row(c)
    if ids.size == 0:
        return ids, np.zeros(0)
    e = np.exp(w - w.max())
    tot = e.sum()
    if A.pruned_lse is not None:
        tot += np.exp(A.pruned_lse[c] - w.max())
    return ids, np.minimum(1.0, beta * e / tot)


def top_b(scores, b):
    """Indices of the ``b`` largest scores, ties toward the lower index, sorted by rank."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.shape[-1]), -scores))[:b]


def top_b_batch(S, b):
    idx = np.argsort(-S, axis=1, kind="stable")
    return idx[:, :b]


def select_clusters(scores, b, positives=None, A=None):
    """Top-``b`` clusters, plus (training) the parent cluster of every positive label."""
    scores = np.asarray(scores)
    if b > scores.size:
        raise ValueError(f"beam size {b} exceeds number of clusters {scores.size}")
    chosen = top_b(scores, b)
    if positives is not None and len(positives):
        par = A.parents()[np.asarray(positives, dtype=np.int64)]
        if np.any(par < 0):
            bad = np.asarray(positives)[par < 0][0]
            raise InvariantError(f"positive label {bad} has no incoming edge")
        chosen = np.union1d(chosen, par)
    return np.sort(chosen)


@dataclass
class PathSet:
    """Best path per reachable label for one query.

    ``labels`` ascending; ``scores`` is the max path score; ``clusters``/``slots``
    locate the argmax edge; ``num_paths`` counts every scored path.
    """

    labels: np.ndarray
    scores: np.ndarray
    clusters: np.ndarray
    slots: np.ndarray
    num_paths: int

    def lookup(self, labels):
        """Positions of ``labels`` in this path set (-1 when unreachable)."""
        labels = np.asarray(labels, dtype=np.int64)
        if self.labels.size == 0:
            return np.full(labels.size, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.labels, labels), self.labels.size - 1)
        return np.where(self.labels[pos] == labels, pos, -1)


@dataclass
class ShortlistResult:
    """Top-K labels by path score (descending, ties toward lower label id)."""

    labels: np.ndarray
    scores: np.ndarray
    clusters: np.ndarray
    slots: np.ndarray
    selected: np.ndarray
    selected_scores: np.ndarray
    num_paths: int
    paths: PathSet = field(default=None, repr=False)

    def __len__(self):
        return int(self.labels.size)


def explore_paths(selected, s, A, edge):
    """Score every path root -> c -> l for ``c`` in ``selected`` and keep the max per label.

    ``s`` holds the cluster scores of all clusters and ``edge`` the (C, kappa)
    edge-score matrix of ``A``.
    """
    selected = np.asarray(selected, dtype=np.int64)
    cnt = A.counts[selected]
    m = A.mask[selected]
    cl = np.broadcast_to(selected[:, None], m.shape)[m]
    sl = np.broadcast_to(np.arange(A.kappa)[None, :], m.shape)[m]
    lab = A.indices[selected][m]
    sc = s[cl] * edge[cl, sl]
    order = np.lexsort((cl, -sc, lab))
    lab_o = lab[order]
    first = np.ones(lab_o.size, dtype=bool)
    first[1:] = lab_o[1:] != lab_o[:-1]
    keep = order[first]
    return PathSet(lab[keep], sc[keep], cl[keep], sl[keep], int(cnt.sum()))


def shortlist(selected, s, A, beta, K, edge=None):
    if K < 1:
        raise ValueError("K must be at least 1")
    s = np.asarray(s, dtype=np.float64)
    if edge is None:
        edge = all_edge_scores(A, beta)
    paths = explore_paths(selected, s, A, edge)
    order = np.lexsort((paths.labels, -paths.scores))[:K]
    selected = np.asarray(selected, dtype=np.int64)
    return ShortlistResult(
        labels=paths.labels[order],
        scores=paths.scores[order],
        clusters=paths.clusters[order],
        slots=paths.slots[order],
        selected=selected,
        selected_scores=s[selected],
        num_paths=paths.num_paths,
        paths=paths,
    )


# -- adjacency initialisation --------------------------------------------------


def cluster_matching_matrix(S, b):
    """Sparse (N, C) matrix keeping each row's top-``b`` cluster scores."""
    N, C = S.shape
    top = top_b_batch(S, b)
    rows = np.repeat(np.arange(N), top.shape[1])
    return sp.csr_matrix((S[rows, top.ravel()], (rows, top.ravel())), shape=(N, C))


def _top_k_positive(values, ids, k):
    """Top-``k`` strictly positive entries (ties toward the lower id)."""
    pos = values > 0
    values, ids = values[pos], ids[pos]
    order = np.lexsort((ids, -values))[:k]
    return ids[order], values[order]


def init_adjacency(S, Y, partition, b, kappa, seed=0):
    """Select each row's support from ``A' = M^T Y`` and draw uniform(0, 1) weights.

    ``S`` holds the stage-1 cluster scores of the training points. Labels
    left without an incoming edge are attached to their partition cluster,
    evicting the row's lowest-``A'`` entry when the row is full.
    """
    C = partition.num_clusters
    L = partition.num_labels
    max_size = int(partition.cluster_sizes().max(initial=0))
    if kappa < max_size:
        raise ValueError(f"kappa={kappa} is smaller than the largest partition cluster ({max_size})")
    A_prime = (cluster_matching_matrix(S, b).T @ sp.csr_matrix(Y)).tocsr()
    A_prime.sort_indices()

    rows = []
    for c in range(C):
        lo, hi = A_prime.indptr[c], A_prime.indptr[c + 1]
        ids, vals = _top_k_positive(A_prime.data[lo:hi], A_prime.indices[lo:hi].astype(np.int64), kappa)
        rows.append(dict(zip(ids.tolist(), vals.tolist())))

    degree = np.zeros(L, dtype=np.int64)
    for r in rows:
        for lab in r:
            degree[lab] += 1
    protected = [set() for _ in range(C)]
    queue = sorted(np.flatnonzero(degree == 0).tolist())
    while queue:
        lab = queue.pop(0)
        if degree[lab] > 0:
            continue
        c = int(partition.assignment[lab])
        row = rows[c]
        if len(row) >= kappa:
            cand = [k for k in row if k not in protected[c]]
            redundant = [k for k in cand if degree[k] > 1]
            pool = redundant or cand
            # lowest A' first; among equal A' evict the higher label id
            victim = min(pool, key=lambda k: (row[k], -k))
            del row[victim]
            degree[victim] -= 1
            if degree[victim] == 0:
                queue.append(victim)
        row[lab] = 0.0
        protected[c].add(lab)
        degree[lab] += 1

    rng = np.random.default_rng(seed)
    built = []
    for r in rows:
        ids = np.array(sorted(r), dtype=np.int64)
        built.append((ids, rng.random(ids.size)))
    A = AdjacencyMatrix.from_rows(built, L, kappa)
    return A, A_prime
