import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aerodrag.knn import (
    KTooLarge,
    SpatialGrid,
    knn_graph,
    knn_graph_accelerated,
    nearest_sq_dist,
    pairwise_sq_dist,
)


def loop_sq_dist(X):
    n, d = X.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = sum((X[i, c] - X[j, c]) ** 2 for c in range(d))
    return out


def loop_knn(X, k):
    D = loop_sq_dist(X)
    rows = []
    for i in range(len(X)):
        cands = sorted((D[i, j], j) for j in range(len(X)) if j != i)
        rows.append([j for _, j in cands[:k]])
    return np.array(rows)


def test_pairwise_1d():
    np.testing.assert_array_equal(pairwise_sq_dist(np.array([[0.0], [3.0]])), [[0, 9], [9, 0]])


@pytest.mark.parametrize("d", [3, 5, 40])
def test_pairwise_matches_triple_loop(rng, d):
    X = rng.normal(size=(20, d))
    D = pairwise_sq_dist(X)
    np.testing.assert_allclose(D, loop_sq_dist(X), rtol=0, atol=1e-10)
    assert np.all(np.diag(D) == 0)
    np.testing.assert_array_equal(D, D.T)


def test_knn_line():
    g = knn_graph(np.array([[0.0], [1.0], [10.0]]), 1)
    assert g.indices[:, 0].tolist() == [1, 0, 1]


def test_knn_tie_lower_index_wins():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert knn_graph(X, 1).indices[0, 0] == 1


def test_k_too_large():
    X = np.zeros((4, 3))
    with pytest.raises(KTooLarge):
        knn_graph(X, 4)
    with pytest.raises(KTooLarge):
        knn_graph_accelerated(X, 4)


def test_matches_loop_oracle(rng):
    X = rng.normal(size=(30, 4))
    np.testing.assert_array_equal(knn_graph(X, 5).indices, loop_knn(X, 5))


def test_rows_are_distinct_and_exclude_self(rng):
    X = rng.normal(size=(50, 3))
    idx = knn_graph(X, 10).indices
    for i, row in enumerate(idx):
        assert len(set(row)) == 10
        assert i not in row
        assert row.max() < 50


def test_include_self_puts_self_first(rng):
    X = rng.normal(size=(40, 3))
    for fn in (knn_graph, knn_graph_accelerated):
        g = fn(X, 6, include_self=True)
        np.testing.assert_array_equal(g.indices[:, 0], np.arange(40))
        np.testing.assert_array_equal(g.indices[:, 1:], knn_graph(X, 5).indices)


def test_distances_non_decreasing(rng):
    X = rng.normal(size=(60, 3))
    idx = knn_graph(X, 12).indices
    D = pairwise_sq_dist(X)
    for i, row in enumerate(idx):
        assert np.all(np.diff(D[i, row]) >= 0)


def test_accelerated_two_points():
    g = knn_graph_accelerated(np.array([[0.0, 0, 0], [1.0, 2, 3]]), 1)
    assert g.indices[:, 0].tolist() == [1, 0]


@pytest.mark.parametrize("seed", range(10))
def test_accelerated_equals_bruteforce_k8(seed):
    X = np.random.default_rng(seed).random((200, 3))
    np.testing.assert_array_equal(knn_graph_accelerated(X, 8).indices, knn_graph(X, 8).indices)


def test_accelerated_on_lattice_ties():
    g = np.arange(6, dtype=float)
    X = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    for k in (1, 6, 7, 18, 26, 40):
        np.testing.assert_array_equal(knn_graph_accelerated(X, k).indices, knn_graph(X, k).indices)


def test_accelerated_with_duplicates_and_flat_cloud(rng):
    X = rng.integers(0, 3, size=(80, 3)).astype(float)
    X[:, 2] = 0.0
    for k in (1, 5, 30):
        np.testing.assert_array_equal(knn_graph_accelerated(X, k).indices, knn_graph(X, k).indices)


def test_accelerated_5000_spot_check(rng):
    X = rng.normal(size=(5000, 3))
    idx = knn_graph_accelerated(X, 40).indices
    rows = rng.choice(5000, size=25, replace=False)
    D = ((X[rows, None, :] - X[None, :, :]) ** 2).sum(-1)
    D[np.arange(25), rows] = np.inf
    for r, i in enumerate(rows):
        expect = np.lexsort((np.arange(5000), D[r]))[:40]
        np.testing.assert_array_equal(idx[i], expect)


def test_deterministic_repeat(rng):
    X = rng.normal(size=(300, 3))
    a = knn_graph_accelerated(X, 9).indices
    b = knn_graph_accelerated(X.copy(), 9).indices
    np.testing.assert_array_equal(a, b)


def test_far_point_leaves_row_unchanged(rng):
    X = rng.normal(size=(100, 3))
    before = knn_graph(X, 7).indices
    after = knn_graph(np.vstack([X, [[1e3, 1e3, 1e3]]]), 7).indices
    np.testing.assert_array_equal(after[:100], before)


def test_grid_cross_queries_outside_bounds(rng):
    ref = rng.random((300, 3))
    q = rng.normal(scale=3.0, size=(100, 3))
    d_fast = nearest_sq_dist(q, ref, accelerated=True)
    d_slow = nearest_sq_dist(q, ref, accelerated=False)
    np.testing.assert_array_equal(d_fast, d_slow)
    idx, _ = SpatialGrid(ref).query(q, 3)
    assert idx.shape == (100, 3)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 60), st.just(3)),
           elements=st.floats(-5, 5, allow_nan=False, width=32)),
    st.integers(1, 10),
)
def test_accelerated_property(X, k):
    k = min(k, len(X) - 1)
    np.testing.assert_array_equal(knn_graph_accelerated(X, k).indices, knn_graph(X, k).indices)
