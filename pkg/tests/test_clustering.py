import numpy as np
import pytest
import scipy.sparse as sp

from elias.clustering import (
    BalancedLabelClusterer,
    Partition,
    balanced_2means,
    build_partition,
    label_centroids,
)
from elias.exceptions import DataFormatError
from elias.synthetic import planted_label_groups

from naive import rand_index


def _unit(rng, n, d):
    P = rng.standard_normal((n, d))
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def test_centroid_single_positive():
    psi = np.array([[3.0, 4.0], [1.0, 0.0]])
    Y = sp.csr_matrix(np.array([[1], [0]]))
    M, zero = label_centroids(Y, psi)
    np.testing.assert_allclose(M[0], [0.6, 0.8])
    assert not zero[0]


def test_centroid_antipodal_is_zero_and_flagged():
    psi = np.array([[1.0, 0.0], [-1.0, 0.0]])
    Y = sp.csr_matrix(np.ones((2, 1)))
    M, zero = label_centroids(Y, psi)
    assert zero[0] and np.all(M[0] == 0)


def test_centroid_matches_naive_sum():
    rng = np.random.default_rng(0)
    psi = rng.standard_normal((10, 6))
    Y = sp.csr_matrix(np.ones((10, 1)))
    acc = np.zeros(6)
    for i in range(10):
        acc += psi[i]
    M, _ = label_centroids(Y, psi)
    np.testing.assert_allclose(M[0], acc / np.linalg.norm(acc), rtol=1e-12)


def test_centroids_sparse_input():
    psi = sp.csr_matrix(np.array([[0.0, 2.0], [0.0, 1.0]]))
    M, _ = label_centroids(sp.csr_matrix(np.ones((2, 1))), psi)
    np.testing.assert_allclose(M.toarray(), [[0.0, 1.0]])


def test_2means_separable():
    pts = np.array([[1, 0.05], [1, -0.05], [0.05, 1], [-0.05, 1]])
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    a, b = balanced_2means(pts, seed=0)
    assert sorted(map(sorted, (a.tolist(), b.tolist()))) == [[0, 1], [2, 3]]


def test_2means_odd_sizes():
    a, b = balanced_2means(_unit(np.random.default_rng(1), 5, 3), seed=0)
    assert sorted((a.size, b.size)) == [2, 3]


def test_2means_identical_points_balanced_and_deterministic():
    pts = np.ones((6, 3)) / np.sqrt(3)
    a1, b1 = balanced_2means(pts, seed=4)
    a2, b2 = balanced_2means(pts, seed=4)
    assert a1.size == b1.size == 3
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def test_2means_needs_two_points():
    with pytest.raises(ValueError):
        balanced_2means(np.ones((1, 2)))


def test_2means_objective_monotone():
    rng = np.random.default_rng(2)
    for k in range(50):
        pts = _unit(rng, int(rng.integers(4, 40)), 5)
        _, _, hist = balanced_2means(pts, seed=k, return_history=True)
        assert np.all(np.diff(hist) >= -1e-9)


def test_partition_full_depth_singletons():
    part = build_partition(_unit(np.random.default_rng(3), 8, 4), 8, seed=0)
    assert sorted(part.cluster_sizes().tolist()) == [1] * 8


def test_partition_sizes_l9_c4():
    part = build_partition(_unit(np.random.default_rng(4), 9, 4), 4, seed=0)
    assert sorted(part.cluster_sizes().tolist()) == [2, 2, 2, 3]


def test_partition_errors():
    pts = _unit(np.random.default_rng(5), 4, 3)
    with pytest.raises(ValueError):
        build_partition(pts, 8)
    with pytest.raises(ValueError):
        build_partition(pts, 3)


def test_partition_balance_every_level():
    rng = np.random.default_rng(6)
    L, C = 101, 16
    part = build_partition(_unit(rng, L, 8), C, seed=1)
    sizes = part.cluster_sizes()
    assert sizes.max() - sizes.min() <= 1
    # siblings at each level of the implicit binary tree
    level = sizes
    while level.size > 1:
        pairs = level.reshape(-1, 2)
        assert np.all(np.abs(pairs[:, 0] - pairs[:, 1]) <= 1)
        level = pairs.sum(axis=1)


def test_partition_deterministic():
    pts = _unit(np.random.default_rng(7), 40, 6)
    assert np.array_equal(build_partition(pts, 8, seed=3).assignment, build_partition(pts, 8, seed=3).assignment)


def test_zero_centroids_fill_smallest_clusters():
    pts = _unit(np.random.default_rng(8), 10, 4)
    pts[[2, 5]] = 0
    part = build_partition(pts, 4, seed=0)
    sizes = part.cluster_sizes()
    assert sizes.sum() == 10 and sizes.max() - sizes.min() <= 1


def test_planted_groups_rand_index():
    scores = []
    for seed in range(10):
        cents, groups = planted_label_groups(seed=seed)
        part = build_partition(cents, 4, seed=seed)
        scores.append(rand_index(part.assignment.tolist(), groups.tolist()))
    assert min(scores) >= 0.95


def test_partition_io(tmp_path):
    part = Partition(np.array([0, 1, 1, 0, 2, 3]), 4)
    p = tmp_path / "p.bin"
    part.save(str(p))
    assert p.stat().st_size == 8 + 4 * 6
    back = Partition.load(str(p))
    assert np.array_equal(back.assignment, part.assignment) and back.num_clusters == 4
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(DataFormatError):
        Partition.load(str(p))


def test_estimator_api():
    cents, groups = planted_label_groups(num_labels=32, seed=1)
    # one point per label carrying that label's centroid
    est = BalancedLabelClusterer(n_clusters=4, random_state=0).fit(cents, sp.identity(32, format="csr"))
    assert est.labels_.shape == (32,)
    assert est.get_params()["n_clusters"] == 4
    assert rand_index(est.labels_.tolist(), groups.tolist()) >= 0.95
