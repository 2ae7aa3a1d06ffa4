"""Dataset ingestion, propensity model and validation splits.

Datasets use the usual extreme-classification text layout::

    N D L
    l1,l2,... f1:v1 f2:v2 ...

Features and labels are held as ``scipy.sparse.csr_matrix`` so that they
plug directly into numpy/scikit-learn code.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from elias.exceptions import DataFormatError, IndexRangeError


@dataclass(frozen=True)
class SparseVector:
    """Index/value pairs with strictly increasing indices."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-d and equally long")
        if idx.size and (idx[0] < 0 or np.any(np.diff(idx) <= 0)):
            raise ValueError("indices must be non-negative and strictly increasing")
        if not np.all(np.isfinite(val)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_dict(cls, d):
        keys = sorted(d)
        return cls(np.array(keys, dtype=np.int64), np.array([d[k] for k in keys], dtype=np.float64))

    @classmethod
    def from_csr_row(cls, row):
        row = sp.csr_matrix(row)
        row.sort_indices()
        return cls(row.indices.copy(), row.data.copy())

    def to_csr(self, dim):
        if self.indices.size and self.indices[-1] >= dim:
            raise IndexRangeError(f"feature index {self.indices[-1]} >= {dim}")
        return sp.csr_matrix(
            (self.values, self.indices, np.array([0, self.indices.size])), shape=(1, dim)
        )

    def norm(self):
        return float(np.linalg.norm(self.values))

    def __len__(self):
        return int(self.indices.size)


@dataclass
class Dataset:
    """N points with sparse features ``X`` (N x D_bow) and binary labels ``Y`` (N x L)."""

    X: sp.csr_matrix
    Y: sp.csr_matrix
    empty_label_rows: np.ndarray = field(default=None)

    def __post_init__(self):
        self.X = sp.csr_matrix(self.X, dtype=np.float64)
        self.Y = sp.csr_matrix(self.Y, dtype=np.float64)
        self.X.sort_indices()
        self.Y.sort_indices()
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("X and Y must have the same number of rows")
        self.Y.data[:] = 1.0
        if self.empty_label_rows is None:
            self.empty_label_rows = np.flatnonzero(np.diff(self.Y.indptr) == 0)

    @property
    def num_points(self):
        return self.X.shape[0]

    @property
    def num_features(self):
        return self.X.shape[1]

    @property
    def num_labels(self):
        return self.Y.shape[1]

    def feature_vector(self, i):
        return SparseVector.from_csr_row(self.X[i])

    def label_set(self, i):
        return self.Y.indices[self.Y.indptr[i]:self.Y.indptr[i + 1]]

    def label_frequencies(self):
        return np.asarray(self.Y.sum(axis=0)).ravel().astype(np.int64)

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.X[rows], self.Y[rows])


def _parse_line(line, lineno, D, L):
    # A leading space means "no labels"; otherwise the first token is the label list.
    if line[:1] in (" ", "\t"):
        label_tok, rest = "", line.strip()
    else:
        label_tok, _, rest = line.partition(" ")
        if ":" in label_tok:
            label_tok, rest = "", line.strip()
    labels = []
    if label_tok:
        try:
            labels = [int(t) for t in label_tok.split(",")]
        except ValueError:
            raise DataFormatError(f"line {lineno}: bad label list {label_tok!r}") from None
    for lab in labels:
        if lab < 0 or lab >= L:
            raise IndexRangeError(f"line {lineno}: label {lab} outside [0, {L})")
    feats = {}
    for tok in rest.split():
        k, sep, v = tok.partition(":")
        if not sep:
            raise DataFormatError(f"line {lineno}: bad feature token {tok!r}")
        try:
            k, v = int(k), float(v)
        except ValueError:
            raise DataFormatError(f"line {lineno}: bad feature token {tok!r}") from None
        if k < 0 or k >= D:
            raise IndexRangeError(f"line {lineno}: feature {k} outside [0, {D})")
        if k in feats:
            raise DataFormatError(f"line {lineno}: duplicate feature index {k}")
        if not math.isfinite(v):
            raise DataFormatError(f"line {lineno}: non-finite value for feature {k}")
        feats[k] = v
    return sorted(set(labels)), feats


def read_xmc(stream):
    """Parse an XMC text stream into a :class:`Dataset`."""
    header = stream.readline()
    parts = header.split()
    if len(parts) != 3:
        raise DataFormatError(f"line 1: expected header 'N D L', got {header.strip()!r}")
    try:
        N, D, L = (int(p) for p in parts)
    except ValueError:
        raise DataFormatError(f"line 1: non-integer header {header.strip()!r}") from None
    if min(N, D, L) < 0:
        raise DataFormatError("line 1: negative header count")

    x_ind, x_val, x_ptr = [], [], [0]
    y_ind, y_ptr = [], [0]
    n = 0
    for lineno, raw in enumerate(stream, start=2):
        line = raw.rstrip("\r\n")
        if not line.strip() and n >= N:
            continue
        if n >= N:
            raise DataFormatError(f"line {lineno}: more data lines than declared N={N}")
        labels, feats = _parse_line(line, lineno, D, L)
        keys = sorted(feats)
        x_ind.extend(keys)
        x_val.extend(feats[k] for k in keys)
        x_ptr.append(len(x_ind))
        y_ind.extend(labels)
        y_ptr.append(len(y_ind))
        n += 1
    if n != N:
        raise DataFormatError(f"expected {N} data lines, found {n}")
    X = sp.csr_matrix(
        (np.array(x_val, dtype=np.float64), np.array(x_ind, dtype=np.int64), np.array(x_ptr)),
        shape=(N, D),
    )
    Y = sp.csr_matrix(
        (np.ones(len(y_ind)), np.array(y_ind, dtype=np.int64), np.array(y_ptr)), shape=(N, L)
    )
    return Dataset(X, Y)


def load_xmc_dataset(path):
    """Load a dataset file; LF and CRLF line endings are both accepted."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8", newline="") as f:
        return read_xmc(f)


def format_xmc(dataset):
    out = io.StringIO()
    write_xmc(dataset, out)
    return out.getvalue()


def write_xmc(dataset, stream):
    X, Y = dataset.X, dataset.Y
    stream.write(f"{X.shape[0]} {X.shape[1]} {Y.shape[1]}\n")
    for i in range(X.shape[0]):
        labels = ",".join(str(int(j)) for j in Y.indices[Y.indptr[i]:Y.indptr[i + 1]])
        lo, hi = X.indptr[i], X.indptr[i + 1]
        feats = " ".join(f"{int(k)}:{float(v)!r}" for k, v in zip(X.indices[lo:hi], X.data[lo:hi]))
        stream.write(f"{labels} {feats}".rstrip() + "\n" if labels else f" {feats}\n")


def save_xmc_dataset(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        write_xmc(dataset, f)


@dataclass
class PropensityModel:
    """Per-label inverse-propensity model, ``propensities[l]`` in (0, 1]."""

    propensities: np.ndarray
    A: float = 0.55
    B: float = 1.5

    def inverse(self):
        return 1.0 / self.propensities


def propensity_from_counts(counts, num_points, A=0.55, B=1.5):
    counts = np.asarray(counts, dtype=np.float64)
    if num_points <= 0:
        raise ValueError("propensities need at least one training point")
    c = (math.log(num_points) - 1.0) * (B + 1.0) ** A
    p = 1.0 / (1.0 + c * np.exp(-A * np.log(counts + B)))
    # log N < 1 makes c negative; keep the contract p in (0, 1].
    return np.clip(p, np.finfo(float).tiny, 1.0)


def compute_propensities(dataset, A=0.55, B=1.5):
    if dataset.num_points == 0:
        raise ValueError("propensities need at least one training point")
    p = propensity_from_counts(dataset.label_frequencies(), dataset.num_points, A, B)
    return PropensityModel(p, A, B)


def split_validation(dataset, n_val, seed=0):
    """Random disjoint (train, validation) split with ``n_val`` validation rows."""
    train, val = split_indices(dataset.num_points, n_val, seed)
    return dataset.subset(train), dataset.subset(val)


def split_indices(N, n_val, seed=0):
    if n_val >= N:
        raise ValueError(f"n_val={n_val} must be smaller than N={N}")
    perm = np.random.default_rng(seed).permutation(N)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])
