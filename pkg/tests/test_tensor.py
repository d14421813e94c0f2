"""Tensor engine tests: op semantics, broadcasting, and gradient integrity.

Derived expectations come from independent oracles computed in this file:
a naive triple-loop matrix product and central finite differences.
"""

import math

import numpy as np
import pytest

from asanet import tensor as T
from asanet.errors import DomainError, ShapeError


def matmul_triple_loop(a, b):
    """Naive O(mnk) oracle for the matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def central_diff(f, params, eps=1e-5):
    """Finite-difference oracle: returns numeric grads per parameter."""
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g.reshape(p.data.shape))
    return grads


def analytic_grads(f, params):
    for p in params:
        p.zero_grad()
    with T.Tape() as tape:
        tape.backward(f())
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def assert_grads_match(f, params, tol=1e-4):
    ana = analytic_grads(f, params)
    num = central_diff(f, params)
    for a, n in zip(ana, num):
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        assert err.max() <= tol, f"max rel err {err.max():.3e}"


class TestElementwise:
    def test_relu_definition(self):
        out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_add_definition(self):
        out = T.Tensor([1.0, 2.0]) + T.Tensor([3.0, 4.0])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_sigmoid_symmetry_point(self):
        assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5

    def test_broadcast_shapes(self):
        out = T.Tensor(np.ones((2, 3))) + T.Tensor(np.ones(3))
        assert out.shape == (2, 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(T.Tensor([1.0, 2.0]), T.Tensor([1.0, 2.0, 3.0]))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(T.Tensor([1.0, 0.0]))

    def test_scale(self):
        np.testing.assert_array_equal((T.Tensor([1.0, -2.0]) * 3.0).data, [3.0, -6.0])


class TestMatmul:
    def test_identity(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(T.Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_orthogonal(self):
        out = T.matmul(T.Tensor([[1.0, 0.0]]), T.Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        np.testing.assert_allclose(out.data, matmul_triple_loop(a, b), atol=1e-12)

    def test_triple_loop_up_to_16(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            m, k, n = rng.integers(1, 17, size=3)
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            out = T.matmul(T.Tensor(a), T.Tensor(b))
            np.testing.assert_allclose(out.data, matmul_triple_loop(a, b), atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    def test_stacked_batch(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((4, 2, 3))
        b = rng.standard_normal((3, 5))
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        assert out.shape == (4, 2, 5)
        np.testing.assert_allclose(out.data[1], matmul_triple_loop(a[1], b), atol=1e-12)


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 6))
        a = T.softmax_rows(T.Tensor(x)).data
        b = T.softmax_rows(T.Tensor(x + 13.5)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_hand_value(self):
        # e^0 / (e^0 + 3) = 0.25 for the row [0, ln 3]
        out = T.softmax_rows(T.Tensor([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        out = T.softmax_rows(T.Tensor(rng.standard_normal((7, 9)) * 10))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(7), atol=1e-9)

    def test_nan_rejected(self):
        with pytest.raises(DomainError):
            T.softmax_rows(T.Tensor([[0.0, np.nan]]))


class TestReduce:
    def test_mean(self):
        out = T.reduce_mean(T.Tensor([[2.0, 4.0]]), axis=1)
        np.testing.assert_array_equal(out.data, [3.0])

    def test_sum_of_zeros(self):
        assert T.reduce_sum(T.Tensor(np.zeros((3, 3)))).item() == 0.0

    def test_max_and_argmax_routing(self):
        x = T.Tensor([[1.0, 5.0, 2.0]], requires_grad=True)
        with T.Tape() as tape:
            out = T.reduce_max(x, axis=1)
            np.testing.assert_array_equal(out.data, [5.0])
            tape.backward(T.reduce_sum(out))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            T.reduce_sum(T.Tensor(np.ones((2, 2))), axis=5)


class TestBackward:
    def test_sum_gradient(self):
        w = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with T.Tape() as tape:
            grads = tape.backward(T.reduce_sum(w))
        np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(grads[w.node_id].data, [1.0, 1.0, 1.0])

    def test_quadratic_gradient(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            tape.backward(T.reduce_sum(w * w))
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_composite_vs_finite_difference(self):
        rng = np.random.default_rng(21)
        w = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        v = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def f():
            h = T.relu(T.matmul(w, v))
            return T.reduce_sum(T.sigmoid(h) * h)

        assert_grads_match(f, [w, v])

    def test_non_scalar_rejected(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            out = w * w
            with pytest.raises(ShapeError):
                tape.backward(out)

    def test_repeated_backward_accumulates(self):
        w = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.reduce_sum(w * w)
            tape.backward(loss)
            tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [4.0, 8.0])

    def test_unreachable_leaf_gets_zero(self):
        x = T.Tensor([1.0], requires_grad=True)
        y = T.Tensor([2.0], requires_grad=True)
        with T.Tape() as tape:
            _ = x * y  # y joins the tape here
            tape.backward(T.reduce_sum(x))
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_no_tape_records_nothing(self):
        w = T.Tensor([1.0], requires_grad=True)
        out = w * w
        assert not out.requires_grad


class TestGradCheckOp:
    def test_quadratic_is_nearly_exact(self):
        w = T.Tensor([0.5, -1.5, 2.0], requires_grad=True)
        err = T.grad_check(lambda: T.reduce_sum(w * w), [("w", w)])
        assert err <= 1e-9

    def test_relu_away_from_kink(self):
        w = T.Tensor([1.0], requires_grad=True)
        err = T.grad_check(lambda: T.reduce_sum(T.relu(w)), [("w", w)])
        assert err <= 1e-6

    def test_wrong_backward_is_detected(self):
        w = T.Tensor([0.7, 1.3], requires_grad=True)

        def bad_square(t):
            return T.apply_op(t.data**2, (t,), lambda g: (g * t.data,))  # missing factor 2

        err = T.grad_check(lambda: T.reduce_sum(bad_square(w)), [("w", w)])
        assert err > 1e-4

    def test_non_finite_raises(self):
        # Perturbing w by -eps lands exactly on a division by zero.
        w = T.Tensor([1e-5], requires_grad=True)
        with pytest.raises(DomainError), np.errstate(divide="ignore"):
            T.grad_check(lambda: T.reduce_sum(T.div(T.Tensor([1.0]), w)), [("w", w)])


@pytest.mark.parametrize("seed", range(20))
def test_every_op_matches_finite_differences(seed):
    """Per-op gradients at random non-singular points, 20 seeds each."""
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    y = T.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    m = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    cases = {
        "add": lambda: T.reduce_sum((x + y) * y),
        "sub": lambda: T.reduce_sum((x - y) * x),
        "mul": lambda: T.reduce_sum(x * y),
        "div": lambda: T.reduce_sum(T.div(x, y)),
        "scale": lambda: T.reduce_sum(x * 2.5),
        "relu": lambda: T.reduce_sum(T.relu(x - 1.2)),
        "sigmoid": lambda: T.reduce_sum(T.sigmoid(x)),
        "exp": lambda: T.reduce_sum(T.exp(x * 0.3)),
        "log": lambda: T.reduce_sum(T.log(x)),
        "sqrt": lambda: T.reduce_sum(T.sqrt(x)),
        "softplus": lambda: T.reduce_sum(T.softplus(x * 3 - 4)),
        "clip": lambda: T.reduce_sum(T.clip(x, 0.6, 1.8) * x),
        "matmul": lambda: T.reduce_sum(T.matmul(x, m)),
        "softmax": lambda: T.reduce_sum(T.softmax_rows(x) * y),
        "mean": lambda: T.reduce_sum(T.reduce_mean(x * x, axis=1)),
        "max": lambda: T.reduce_sum(T.reduce_max(x * y, axis=1)),
        "reshape": lambda: T.reduce_sum(T.reshape(x, (4, 3)) * T.reshape(y, (4, 3))),
        "transpose": lambda: T.reduce_sum(T.transpose(x) @ m.transpose()),
        "concat": lambda: T.reduce_sum(T.concat([x, y], axis=0) * 1.5),
        "take": lambda: T.reduce_sum(T.take_rows(x, [0, 2, 2]) * 2.0),
    }
    for name, f in cases.items():
        try:
            assert_grads_match(f, [x, y, m])
        except AssertionError as exc:
            raise AssertionError(f"{name}: {exc}") from None
