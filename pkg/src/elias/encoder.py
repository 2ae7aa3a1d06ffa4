"""Input embeddings and the static (bow + dense) representation.

Two encoder modes are supported:

* ``"linear"``: a trainable projection, ``phi(x) = P^T x`` for sparse ``x``.
* ``"precomputed"``: rows of a fixed embedding matrix, addressed by point id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from elias.data import SparseVector
from elias.exceptions import DataFormatError, IndexRangeError

_EMB_HEADER = struct.Struct("<II")


@dataclass
class Encoder:
    mode: str
    dim: int
    projection: np.ndarray | None = None
    embeddings: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("linear", "precomputed"):
            raise ValueError(f"unknown encoder mode {self.mode!r}")
        if self.dim <= 0:
            raise ValueError("embedding dimension must be positive")
        if self.mode == "linear":
            if self.projection is None or self.projection.shape[1] != self.dim:
                raise ValueError("linear mode needs a (D_bow, dim) projection")
            if not np.all(np.isfinite(self.projection)):
                raise ValueError("projection has non-finite entries")
        elif self.embeddings is None or self.embeddings.shape[1] != self.dim:
            raise ValueError("precomputed mode needs an (N, dim) embedding matrix")

    @classmethod
    def linear(cls, num_features, dim=64, seed=0, scale=None):
        rng = np.random.default_rng(seed)
        scale = 1.0 if scale is None else scale
        P = rng.standard_normal((num_features, dim)) * scale
        return cls("linear", dim, projection=P)

    @classmethod
    def identity(cls, num_features):
        return cls("linear", num_features, projection=np.eye(num_features))

    @classmethod
    def precomputed(cls, embeddings):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        return cls("precomputed", embeddings.shape[1], embeddings=embeddings)

    @property
    def trainable(self):
        return self.mode == "linear"

    def encode(self, x, row=None):
        """Embed one point; ``x`` is a :class:`SparseVector` (linear mode) and
        ``row`` its id (precomputed mode)."""
        if self.mode == "precomputed":
            if row is None or not 0 <= row < self.embeddings.shape[0]:
                raise IndexRangeError(f"no precomputed embedding for row {row!r}")
            return self.embeddings[row].copy()
        if len(x) and x.indices[-1] >= self.projection.shape[0]:
            raise IndexRangeError(f"feature index {x.indices[-1]} >= {self.projection.shape[0]}")
        return x.values @ self.projection[x.indices]

    def encode_batch(self, X, rows=None):
        if self.mode == "precomputed":
            rows = np.asarray(rows)
            if rows.size and (rows.min() < 0 or rows.max() >= self.embeddings.shape[0]):
                raise IndexRangeError("row ids outside the precomputed embedding table")
            return self.embeddings[rows]
        if X.shape[1] > self.projection.shape[0]:
            raise IndexRangeError("feature dimension exceeds projection rows")
        return np.asarray(X @ self.projection)


def encode(encoder, x, row=None):
    return encoder.encode(x, row)


@dataclass(frozen=True)
class StaticRep:
    """psi(x): unit-normalised sparse bow block followed by unit-normalised dense block."""

    sparse: SparseVector
    dense: np.ndarray
    sparse_zero: bool
    dense_zero: bool

    def to_dense(self, num_features):
        out = np.zeros(num_features + self.dense.size)
        out[self.sparse.indices] = self.sparse.values
        out[num_features:] = self.dense
        return out


def static_rep(x, phi_x):
    xn = x.norm()
    pn = float(np.linalg.norm(phi_x))
    sparse = SparseVector(x.indices, x.values / xn) if xn > 0 else x
    dense = np.asarray(phi_x, dtype=np.float64) / pn if pn > 0 else np.zeros_like(phi_x, dtype=np.float64)
    return StaticRep(sparse, dense, xn == 0, pn == 0)


def _row_normalize(M):
    M = sp.csr_matrix(M, dtype=np.float64, copy=True)
    norms = np.sqrt(np.asarray(M.multiply(M).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    M.data /= np.repeat(norms, np.diff(M.indptr))
    return M


def static_reps(X, Phi):
    """Batched psi(x) as a CSR matrix of shape (N, D_bow + D)."""
    Phi = np.asarray(Phi, dtype=np.float64)
    norms = np.linalg.norm(Phi, axis=1, keepdims=True)
    dense = np.divide(Phi, norms, out=np.zeros_like(Phi), where=norms > 0)
    return sp.hstack([_row_normalize(X), sp.csr_matrix(dense)], format="csr")


def write_embeddings(path, E):
    E = np.ascontiguousarray(E, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_EMB_HEADER.pack(*E.shape))
        f.write(E.tobytes())


def read_embeddings(path):
    with open(path, "rb") as f:
        head = f.read(_EMB_HEADER.size)
        if len(head) != _EMB_HEADER.size:
            raise DataFormatError(f"{path}: truncated embedding header")
        N, D = _EMB_HEADER.unpack(head)
        body = f.read()
    if len(body) != 4 * N * D:
        raise DataFormatError(f"{path}: expected {N}x{D} float32 payload, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(N, D).astype(np.float64)
