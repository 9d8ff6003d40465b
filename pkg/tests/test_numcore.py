"""Tests for the matrix core: RNG streams, op shapes, and reverse-mode gradients."""

import numpy as np
import pytest

from tools import numcore as nc


def _inputs(seed, *shapes, lo=-1.0, hi=1.0):
    rng = nc.Rng(seed)
    return [rng.uniform(r, c, lo, hi) for r, c in shapes]


def _numeric_grad(fn, inputs, i, h=1e-6):
    grad = np.zeros_like(inputs[i])
    for idx in np.ndindex(inputs[i].shape):
        up = [x.copy() for x in inputs]
        dn = [x.copy() for x in inputs]
        up[i][idx] += h
        dn[i][idx] -= h
        f_up = fn(*(nc.Tensor(x) for x in up)).item()
        f_dn = fn(*(nc.Tensor(x) for x in dn)).item()
        grad[idx] = (f_up - f_dn) / (2 * h)
    return grad


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def _gradcheck(fn, inputs, tol=1e-5):
    params = [nc.parameter(x.copy()) for x in inputs]
    nc.backward(fn(*params))
    for i, p in enumerate(params):
        num = _numeric_grad(fn, inputs, i)
        assert _rel_err(p.grad, num) < tol, f"input {i}: rel err {_rel_err(p.grad, num):.2e}"


def _project(out_shape, seed=99):
    # random projection turns a matrix-valued op into a scalar loss
    R = nc.Rng(seed).uniform(*out_shape, -1.0, 1.0)
    return lambda t: nc.sum(t * R)


class TestRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(nc.Rng(7).normal(3, 4), nc.Rng(7).normal(3, 4))

    def test_different_seed_differs(self):
        assert not np.array_equal(nc.Rng(7).normal(3, 4), nc.Rng(8).normal(3, 4))

    def test_substreams_are_independent_and_stable(self):
        a = nc.Rng(3).substream("init").normal(2, 2)
        b = nc.Rng(3).substream("noise").normal(2, 2)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, nc.Rng(3).substream("init").normal(2, 2))

    def test_substream_does_not_consume_parent(self):
        parent = nc.Rng(5)
        parent.substream("x").normal(10, 10)
        assert np.array_equal(parent.normal(2, 2), nc.Rng(5).normal(2, 2))

    def test_zero_std_is_constant(self):
        assert np.all(nc.Rng(0).normal(2, 3, mean=1.5, std=0.0) == 1.5)

    def test_negative_std_rejected(self):
        with pytest.raises(nc.ContractError):
            nc.Rng(0).normal(2, 2, std=-1.0)

    def test_uniform_bounds(self):
        u = nc.Rng(1).uniform(50, 4, -2.0, 3.0)
        assert u.min() >= -2.0 and u.max() < 3.0

    def test_inverted_uniform_bounds_rejected(self):
        with pytest.raises(nc.ContractError):
            nc.Rng(0).uniform(1, 1, 1.0, 0.0)


class TestOps:
    def test_matmul_matches_triple_loop(self):
        a, b = _inputs(0, (3, 4), (4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        assert np.allclose(nc.matmul(a, b).value, expected, atol=1e-14)

    def test_matmul_dimension_mismatch(self):
        with pytest.raises(nc.DimensionError):
            nc.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_add_row_broadcasts(self):
        out = nc.add_row(np.zeros((3, 2)), np.array([[1.0, 2.0]]))
        assert np.array_equal(out.value, [[1, 2], [1, 2], [1, 2]])

    def test_add_row_rejects_wrong_width(self):
        with pytest.raises(nc.DimensionError):
            nc.add_row(np.zeros((3, 2)), np.zeros((1, 3)))

    def test_incompatible_broadcast(self):
        with pytest.raises(nc.DimensionError):
            nc.add(np.zeros((3, 2)), np.zeros((2, 2)))

    def test_sqrt_clamps_below_eps(self):
        out = nc.sqrt(np.array([[0.0, 4.0]]), eps=1e-6)
        assert out.value[0, 0] == pytest.approx(1e-3)
        assert out.value[0, 1] == 2.0

    def test_pairwise_dist_diagonal_is_sqrt_eps(self):
        X = _inputs(1, (5, 3))[0]
        D = nc.pairwise_dist(X, 1e-7).value
        assert np.allclose(np.diag(D), np.sqrt(1e-7))

    def test_double_center_rejects_non_square(self):
        with pytest.raises(nc.DimensionError):
            nc.double_center(np.zeros((2, 3)))

    def test_as_matrix_shapes(self):
        assert nc.as_matrix(3.0).shape == (1, 1)
        assert nc.as_matrix([1.0, 2.0]).shape == (1, 2)
        with pytest.raises(nc.DimensionError):
            nc.as_matrix(np.zeros((2, 2, 2)))

    def test_item_needs_scalar(self):
        with pytest.raises(nc.ContractError):
            nc.Tensor(np.zeros((2, 2))).item()


class TestGradients:
    def test_matmul(self):
        a, b = _inputs(2, (3, 4), (4, 2))
        _gradcheck(lambda x, y: _project((3, 2))(x @ y), [a, b])

    def test_add_with_row_broadcast(self):
        a, b = _inputs(3, (4, 3), (1, 3))
        _gradcheck(lambda x, y: _project((4, 3))(x + y), [a, b])

    def test_mul_with_column_broadcast(self):
        a, b = _inputs(4, (4, 3), (4, 1))
        _gradcheck(lambda x, y: _project((4, 3))(x * y), [a, b])

    def test_div(self):
        a = _inputs(5, (3, 3))[0]
        b = _inputs(6, (3, 3), lo=0.5, hi=2.0)[0]
        _gradcheck(lambda x, y: _project((3, 3))(x / y), [a, b])

    def test_relu(self):
        a = _inputs(7, (4, 4))[0]
        _gradcheck(lambda x: _project((4, 4))(nc.relu(x)), [a])

    def test_exp_and_log(self):
        a = _inputs(8, (3, 2), lo=0.2, hi=2.0)[0]
        _gradcheck(lambda x: _project((3, 2))(nc.log(x) + nc.exp(x)), [a])

    def test_sum_and_mean_along_axes(self):
        a = _inputs(9, (4, 3))[0]
        _gradcheck(lambda x: _project((1, 3))(nc.sum(x, axis=0)), [a])
        _gradcheck(lambda x: _project((4, 1))(nc.mean(x, axis=1)), [a])

    def test_sqrt_and_sum_squares(self):
        a = _inputs(10, (3, 3), lo=0.5, hi=2.0)[0]
        _gradcheck(lambda x: nc.sum(nc.sqrt(x, eps=1e-7)) + nc.sum_squares(x), [a])

    def test_pairwise_dist(self):
        a = _inputs(11, (6, 3))[0]
        _gradcheck(lambda x: _project((6, 6))(nc.pairwise_dist(x, 1e-7)), [a])

    def test_double_center(self):
        a = _inputs(12, (5, 5))[0]
        _gradcheck(lambda x: _project((5, 5))(nc.double_center(x)), [a])

    def test_softmax_cross_entropy(self):
        logits = _inputs(13, (4, 3))[0]
        y = np.eye(3)[[0, 2, 1, 2]]
        _gradcheck(lambda x: nc.softmax_cross_entropy(x, y), [logits])

    def test_two_layer_net(self):
        X, W1, W2 = _inputs(14, (4, 8), (8, 5), (5, 3))
        y = np.eye(3)[[0, 1, 2, 0]]

        def loss(w1, w2):
            return nc.softmax_cross_entropy(nc.relu(nc.Tensor(X) @ w1) @ w2, y)

        _gradcheck(loss, [W1, W2])


class TestBackward:
    def test_rejects_non_scalar(self):
        with pytest.raises(nc.ContractError):
            nc.backward(nc.parameter(np.ones((2, 2))) * 2.0)

    def test_repeated_backward_is_bit_identical(self):
        a, b = _inputs(15, (3, 4), (4, 2))
        pa, pb = nc.parameter(a), nc.parameter(b)
        loss = nc.sum_squares(nc.relu(pa @ pb))
        nc.backward(loss)
        first = pa.grad.copy()
        nc.backward(loss)
        assert np.array_equal(first, pa.grad)

    def test_unused_parameter_gets_zero_grad(self):
        used, unused = nc.parameter(np.ones((1, 2))), nc.parameter(np.ones((1, 2)))
        loss = nc.sum(used) + nc.sum(unused) * 0.0
        leaves = nc.backward(loss)
        assert np.array_equal(leaves[unused], np.zeros((1, 2)))

    def test_shared_node_accumulates(self):
        a = nc.parameter(np.array([[2.0]]))
        nc.backward(a * a + a)
        assert a.grad[0, 0] == 5.0

    def test_check_finite(self):
        with pytest.raises(nc.ContractError):
            nc.check_finite(np.array([[np.nan]]), "x")
