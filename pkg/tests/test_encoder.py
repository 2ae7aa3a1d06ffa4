import numpy as np
import pytest
import scipy.sparse as sp

from elias.data import SparseVector
from elias.encoder import Encoder, encode, read_embeddings, static_rep, static_reps, write_embeddings
from elias.exceptions import DataFormatError, IndexRangeError


def test_identity_projection():
    enc = Encoder.identity(5)
    np.testing.assert_array_equal(encode(enc, SparseVector([2], [1.0])), np.eye(5)[2])


def test_zero_input():
    enc = Encoder.linear(6, 4, seed=0)
    assert np.all(encode(enc, SparseVector([], [])) == 0)


def test_matches_dense_matvec():
    rng = np.random.default_rng(0)
    enc = Encoder.linear(30, 7, seed=1)
    x = SparseVector.from_dict({int(i): float(rng.standard_normal()) for i in rng.choice(30, 8, replace=False)})
    dense = np.zeros(30)
    dense[x.indices] = x.values
    np.testing.assert_allclose(encode(enc, x), enc.projection.T @ dense, rtol=1e-12, atol=1e-12)


def test_linearity():
    enc = Encoder.linear(20, 5, seed=3)
    X = sp.random(2, 20, density=0.3, random_state=4, format="csr")
    a, b = 1.7, -0.4
    lhs = enc.encode_batch(a * X[0] + b * X[1])
    rhs = a * enc.encode_batch(X[0]) + b * enc.encode_batch(X[1])
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)


def test_precomputed_rows_and_missing():
    E = np.arange(12.0).reshape(4, 3)
    enc = Encoder.precomputed(E)
    np.testing.assert_array_equal(enc.encode(None, row=2), E[2])
    with pytest.raises(IndexRangeError):
        enc.encode(None, row=4)
    with pytest.raises(IndexRangeError):
        enc.encode_batch(None, [0, 9])


def test_feature_out_of_range():
    enc = Encoder.linear(3, 2)
    with pytest.raises(IndexRangeError):
        enc.encode(SparseVector([5], [1.0]))


def test_static_rep_345():
    r = static_rep(SparseVector([0, 1], [3.0, 4.0]), np.zeros(4))
    np.testing.assert_allclose(r.sparse.values, [0.6, 0.8])
    assert r.dense_zero and not r.sparse_zero
    assert np.all(r.dense == 0)


def test_static_rep_norms():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = SparseVector(np.sort(rng.choice(50, 6, replace=False)), rng.standard_normal(6))
        r = static_rep(x, rng.standard_normal(8))
        assert abs(np.linalg.norm(r.sparse.values) - 1) < 1e-9
        assert abs(np.linalg.norm(r.dense) - 1) < 1e-9
        assert np.linalg.norm(r.to_dense(50)) ** 2 == pytest.approx(2.0, abs=1e-9)


def test_static_reps_batch_matches_single():
    rng = np.random.default_rng(6)
    X = sp.random(10, 15, density=0.3, random_state=7, format="csr")
    Phi = rng.standard_normal((10, 4))
    Phi[3] = 0
    Psi = static_reps(X, Phi).toarray()
    for i in range(10):
        r = static_rep(SparseVector.from_csr_row(X[i]), Phi[i])
        np.testing.assert_allclose(Psi[i], r.to_dense(15), atol=1e-12)


def test_embedding_file_round_trip(tmp_path):
    E = np.random.default_rng(8).standard_normal((5, 3)).astype(np.float32)
    p = tmp_path / "e.bin"
    write_embeddings(str(p), E)
    assert p.stat().st_size == 8 + 4 * 15
    np.testing.assert_array_equal(read_embeddings(str(p)), E.astype(np.float64))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(DataFormatError):
        read_embeddings(str(p))
