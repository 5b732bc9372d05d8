import math

import numpy as np
import pytest

from aerodrag import autodiff as ad
from aerodrag.autodiff import Parameter, Tape, Tensor
from aerodrag.knn import knn_graph

from conftest import analytic_grad, numeric_grad, rel_err

FD_TOL = 1e-4


def away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def check_input_grad(build, x, tol=FD_TOL):
    g = analytic_grad(build, x)
    n = numeric_grad(lambda v: float(build(Tensor(v)).data), x)
    err = rel_err(g, n)
    assert err < tol, err
    return err


# ---------------------------------------------------------------- forward


def test_linear_examples():
    out = ad.pointwise_linear(np.eye(2), np.array([[1.0, 2], [3, 4]]), np.zeros(2))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])
    out = ad.pointwise_linear(np.zeros((3, 2)), np.ones((2, 1)), np.array([5.0]))
    np.testing.assert_array_equal(out.data, [[5], [5], [5]])
    with pytest.raises(ad.ShapeMismatch):
        ad.pointwise_linear(np.zeros((3, 2)), np.ones((3, 1)))


def test_leaky_relu_examples():
    out = ad.leaky_relu(np.array([-1.0, 3.0, 0.0]), 0.2)
    np.testing.assert_array_equal(out.data, [-0.2, 3.0, 0.0])


def test_leaky_relu_subgradient_at_zero():
    g = analytic_grad(lambda t: ad.total(ad.leaky_relu(t, 0.2)), np.zeros(3))
    np.testing.assert_array_equal(g, [0.2, 0.2, 0.2])


def test_max_pool_examples():
    H = np.array([[[1.0], [5.0]], [[3.0], [2.0]]])
    np.testing.assert_array_equal(ad.neighborhood_max_pool(H).data, [[5], [3]])
    np.testing.assert_array_equal(ad.global_max_pool(np.array([[1.0, 5], [3, 2]])).data, [3, 5])
    np.testing.assert_array_equal(ad.global_max_pool(np.array([[4.0, 2]])).data, [4, 2])


def test_max_pool_tie_goes_to_first_slot():
    g = analytic_grad(lambda t: ad.total(ad.neighborhood_max_pool(t)), np.ones((1, 4, 2)))
    np.testing.assert_array_equal(g[0, :, 0], [1, 0, 0, 0])


def test_global_max_pool_permutation(rng):
    X = rng.normal(size=(30, 4))
    perm = rng.permutation(30)
    np.testing.assert_array_equal(ad.global_max_pool(X).data, ad.global_max_pool(X[perm]).data)


def test_dropout_modes(rng):
    X = rng.normal(size=(5, 5))
    np.testing.assert_array_equal(ad.dropout(Tensor(X), 0.0, rng, True).data, X)
    np.testing.assert_array_equal(ad.dropout(Tensor(X), 0.7, rng, False).data, X)
    with pytest.raises(ValueError):
        ad.dropout(Tensor(X), 1.0, rng, True)


def test_dropout_survivor_fraction():
    n = 200_000
    out = ad.dropout(Tensor(np.ones(n)), 0.5, np.random.default_rng(0), True).data
    kept = int((out != 0).sum())
    assert abs(kept - n / 2) < 4 * math.sqrt(n * 0.25)
    np.testing.assert_array_equal(np.unique(out), [0.0, 2.0])


def test_dropout_seeded():
    a = ad.dropout(Tensor(np.ones(100)), 0.3, np.random.default_rng(5), True).data
    b = ad.dropout(Tensor(np.ones(100)), 0.3, np.random.default_rng(5), True).data
    np.testing.assert_array_equal(a, b)


def test_concat_examples():
    x = np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(ad.concat_channels([x]).data, x)
    out = ad.concat_channels([np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]])])
    np.testing.assert_array_equal(out.data, [[1, 3], [2, 4]])
    with pytest.raises(ad.ShapeMismatch):
        ad.concat_channels([np.zeros((2, 1)), np.zeros((3, 1))])


def test_mse_examples():
    assert float(ad.mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).data) == 0.0
    assert float(ad.mse_loss(np.array([1.0, 1.0]), np.array([0.0, 0.0])).data) == 1.0
    g = analytic_grad(lambda t: ad.mse_loss(t, np.zeros(2)), np.ones(2))
    np.testing.assert_array_equal(g, [1.0, 1.0])
    with pytest.raises(ad.ShapeMismatch):
        ad.mse_loss(np.zeros(2), np.zeros(3))


def test_batch_norm_training_identity_on_standardized():
    X = np.array([[-1.0, 2.0], [1.0, -2.0]])  # per channel mean 0, var 1 and 4
    rm, rv = np.zeros(2), np.ones(2)
    out = ad.batch_norm(Tensor(X), None, None, rm, rv, training=True).data
    np.testing.assert_allclose(out[:, 0], X[:, 0] / math.sqrt(1 + 1e-5))
    np.testing.assert_allclose(rm, [0.0, 0.0])
    # unbiased batch variance: 2 and 8
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 2.0, 0.9 + 0.1 * 8.0])


def test_batch_norm_inference_hand_numbers():
    gamma, beta = Parameter(np.array([2.0]), "g"), Parameter(np.array([0.5]), "b")
    rm, rv = np.array([1.0]), np.array([4.0])
    out = ad.batch_norm(Tensor(np.array([[3.0], [1.0]])), gamma, beta, rm, rv, training=False).data
    # (3-1)/sqrt(4+1e-5)*2+0.5 and (1-1)/...*2+0.5
    np.testing.assert_allclose(out[:, 0], [2.0 / math.sqrt(4.00001) * 2 + 0.5, 0.5], rtol=1e-15)


def test_batch_norm_too_small():
    with pytest.raises(ad.BatchTooSmall):
        ad.batch_norm(Tensor(np.ones((1, 3))), None, None, np.zeros(3), np.ones(3), training=True)


# ---------------------------------------------------------- FD gradients


def test_linear_grad_wrt_w_is_column_sums(rng):
    X = rng.normal(size=(6, 3))
    W0 = rng.normal(size=(3, 2))
    W = Parameter(W0.copy(), "w")
    with Tape() as tape:
        out = ad.total(ad.pointwise_linear(Tensor(X), W, Tensor(np.zeros(2))))
    tape.backward(out)
    np.testing.assert_allclose(W.grad, np.repeat(X.sum(0)[:, None], 2, axis=1))

    def f(w):
        return float(ad.total(ad.pointwise_linear(X, w, np.zeros(2))).data)

    assert rel_err(W.grad, numeric_grad(f, W0)) < 1e-6


def test_linear_fd_all_inputs(rng):
    X = rng.normal(size=(2, 5, 3))
    W = rng.normal(size=(3, 4))
    b = rng.normal(size=4)
    R = rng.normal(size=(2, 5, 4))

    check_input_grad(lambda t: _weighted(ad.pointwise_linear(t, W, b), R), X)
    for which, val in (("w", W), ("b", b)):

        def build(t, which=which):
            args = (Tensor(X), t, Tensor(b)) if which == "w" else (Tensor(X), Tensor(W), t)
            return _weighted(ad.pointwise_linear(*args), R)

        check_input_grad(build, val)


def _weighted(t, R):
    """Scalar sum(t * R) built from recorded ops."""
    return ad.total(ad.pointwise_linear(ad.reshape(t, (1, -1)), R.reshape(-1, 1)))


def test_leaky_relu_fd(rng):
    X = away_from_zero(rng, (4, 5))
    R = rng.normal(size=(4, 5))
    assert check_input_grad(lambda t: _weighted(ad.leaky_relu(t, 0.2), R), X) < 1e-6


def test_batch_norm_fd_training(rng):
    X = rng.normal(size=(4, 3))
    R = rng.normal(size=(4, 3))
    gamma0, beta0 = rng.normal(size=3), rng.normal(size=3)

    def build(t):
        return _weighted(
            ad.batch_norm(t, Tensor(gamma0), Tensor(beta0), np.zeros(3), np.ones(3), training=True), R
        )

    assert check_input_grad(build, X) < 1e-5

    def build_gamma(t):
        return _weighted(ad.batch_norm(Tensor(X), t, Tensor(beta0), np.zeros(3), np.ones(3), True), R)

    def build_beta(t):
        return _weighted(ad.batch_norm(Tensor(X), Tensor(gamma0), t, np.zeros(3), np.ones(3), True), R)

    assert check_input_grad(build_gamma, gamma0) < 1e-5
    assert check_input_grad(build_beta, beta0) < 1e-5


def test_batch_norm_fd_inference_4d(rng):
    X = rng.normal(size=(2, 3, 4, 5))
    R = rng.normal(size=X.shape)
    rm, rv = rng.normal(size=5), rng.uniform(0.5, 2, size=5)
    check_input_grad(lambda t: _weighted(ad.batch_norm(t, None, None, rm, rv, False), R), X)
    check_input_grad(lambda t: _weighted(ad.batch_norm(t, None, None, rm.copy(), rv.copy(), True), R), X)


def test_neighborhood_max_pool_fd(rng):
    H = rng.normal(size=(5, 4, 3))
    R = rng.normal(size=(5, 3))
    check_input_grad(lambda t: _weighted(ad.neighborhood_max_pool(t), R), H)


def test_global_max_pool_fd(rng):
    X = rng.normal(size=(2, 7, 3))
    R = rng.normal(size=(2, 3))
    check_input_grad(lambda t: _weighted(ad.global_max_pool(t), R), X)


def test_dropout_fd(rng):
    X = rng.normal(size=(6, 4))
    R = rng.normal(size=(6, 4))
    check_input_grad(lambda t: _weighted(ad.dropout(t, 0.4, np.random.default_rng(2), True), R), X)


def test_concat_fd(rng):
    A, B = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    R = rng.normal(size=(3, 6))
    check_input_grad(lambda t: _weighted(ad.concat_channels([t, Tensor(B)]), R), A)
    check_input_grad(lambda t: _weighted(ad.concat_channels([Tensor(A), t]), R), B)


def test_mse_fd(rng):
    p, y = rng.normal(size=7), rng.normal(size=7)
    check_input_grad(lambda t: ad.mse_loss(t, y), p)


def test_edge_features_fd_and_values(rng):
    X = rng.normal(size=(6, 3))
    idx = knn_graph(X, 2).indices
    E = ad.edge_features(Tensor(X), idx).data
    for i in range(6):
        for j in range(2):
            np.testing.assert_array_equal(E[i, j, :3], X[i])
            np.testing.assert_array_equal(E[i, j, 3:], X[idx[i, j]] - X[i])
    R = rng.normal(size=(6, 2, 6))
    check_input_grad(lambda t: _weighted(ad.edge_features(t, idx), R), X)


def test_edge_linear_matches_unfused(rng):
    X = rng.normal(size=(2, 9, 4))
    idx = np.stack([knn_graph(x, 3).indices for x in X])
    W, b = rng.normal(size=(8, 5)), rng.normal(size=5)
    fused = ad.edge_linear(Tensor(X), idx, Tensor(W), Tensor(b)).data
    unfused = ad.pointwise_linear(ad.edge_features(Tensor(X), idx), Tensor(W), Tensor(b)).data
    np.testing.assert_allclose(fused, unfused, rtol=1e-12, atol=1e-12)


def test_edge_linear_fd(rng):
    X = rng.normal(size=(2, 8, 3))
    idx = np.stack([knn_graph(x, 3).indices for x in X])
    W, b = rng.normal(size=(6, 4)), rng.normal(size=4)
    R = rng.normal(size=(2, 8, 3, 4))
    check_input_grad(lambda t: _weighted(ad.edge_linear(t, idx, Tensor(W), Tensor(b)), R), X)
    check_input_grad(lambda t: _weighted(ad.edge_linear(Tensor(X), idx, t, Tensor(b)), R), W)
    check_input_grad(lambda t: _weighted(ad.edge_linear(Tensor(X), idx, Tensor(W), t), R), b)


# ---------------------------------------------------------- composition


def test_chain_rule_three_ops(rng):
    X = rng.normal(size=(5, 3))
    W = rng.normal(size=(3, 4))
    y = rng.normal(size=4)

    def build(t):
        h = ad.leaky_relu(ad.pointwise_linear(t, W), 0.2)
        return ad.mse_loss(ad.global_max_pool(h), y)

    check_input_grad(build, X)


def test_gradients_accumulate_additively(rng):
    x0 = rng.normal(size=(4, 3))
    W1, W2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))

    def f(t):
        return ad.total(ad.leaky_relu(ad.pointwise_linear(t, W1), 0.2))

    def g(t):
        return ad.mse_loss(ad.pointwise_linear(t, W2), np.ones((4, 2)))

    gf = analytic_grad(f, x0)
    gg = analytic_grad(g, x0)
    both = analytic_grad(lambda t: ad.add(f(t), g(t)), x0)
    np.testing.assert_allclose(both, gf + gg, rtol=0, atol=1e-12)


def test_reused_tensor_accumulates(rng):
    x0 = rng.normal(size=3)
    g = analytic_grad(lambda t: ad.add(ad.total(t), ad.total(t)), x0)
    np.testing.assert_array_equal(g, [2.0, 2.0, 2.0])


def test_backward_runs_in_reverse_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        a = ad.scale(x, 2.0)
        b = ad.scale(a, 3.0)
        c = ad.total(b)
    assert [r[0] for r in tape.records] == [a, b, c]
    tape.backward(c)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_non_finite_raises_under_checking_tape():
    x = Tensor(np.array([1.0, np.inf]), requires_grad=True)
    with pytest.raises(ad.NonFiniteError):
        with Tape(check_finite=True):
            ad.scale(x, 1.0)


def test_ops_without_tape_do_not_record():
    x = Tensor(np.ones(3), requires_grad=True)
    out = ad.total(x)
    assert not out.requires_grad


def test_forward_deterministic(rng):
    X = rng.normal(size=(50, 8)).astype(np.float32)
    W = rng.normal(size=(8, 16)).astype(np.float32)
    a = ad.leaky_relu(ad.pointwise_linear(X, W), 0.2).data
    b = ad.leaky_relu(ad.pointwise_linear(X, W), 0.2).data
    assert a.tobytes() == b.tobytes()
