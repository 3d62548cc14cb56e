"""Reverse-mode differentiation, checked op by op against central differences."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segnn import autograd as ag
from segnn.autograd import Tensor


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def check(fn, *shapes, seed=0, positive=False, weight=True):
    """Compare backward() of ``sum(w * fn(*xs))`` with finite differences for every input."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    w = rng.normal(size=fn(*[Tensor(x) for x in xs]).shape) if weight else 1.0
    ts = [Tensor(x, requires_grad=True) for x in xs]
    (fn(*ts) * w).sum().backward()
    for k, (x, t) in enumerate(zip(xs, ts)):
        def f(v, k=k):
            args = [Tensor(a) for a in xs]
            args[k] = Tensor(v)
            return float((fn(*args).data * w).sum())

        np.testing.assert_allclose(t.grad, numeric_grad(f, x), rtol=1e-5, atol=1e-7)


class TestElementwise:
    def test_add_broadcast(self):
        check(lambda a, b: a + b, (4, 3), (3,))

    def test_sub(self):
        check(lambda a, b: a - b, (2, 3), (2, 3))

    def test_rsub(self):
        check(lambda a: 2.0 - a, (3,))

    def test_mul_broadcast(self):
        check(lambda a, b: a * b, (4, 3), (1, 3))

    def test_div(self):
        check(lambda a, b: a / b, (3, 2), (3, 2), positive=True)

    def test_pow(self):
        check(lambda a: a**3, (5,))

    def test_exp_log_sqrt(self):
        check(lambda a: a.exp(), (4,))
        check(lambda a: a.log(), (4,), positive=True)
        check(lambda a: a.sqrt(), (4,), positive=True)

    def test_relu_mask(self):
        t = Tensor(np.array([-1.0, 2.0, 0.0]), requires_grad=True)
        t.relu().sum().backward()
        np.testing.assert_array_equal(t.grad, [0.0, 1.0, 0.0])


class TestStructural:
    def test_matmul(self):
        check(lambda a, b: a @ b, (3, 4), (4, 2))

    def test_rmatmul_constant(self):
        m = np.arange(6.0).reshape(2, 3)
        check(lambda a: m @ a, (3, 2))

    def test_transpose_reshape(self):
        check(lambda a: a.T.reshape(6), (2, 3))

    def test_basic_and_fancy_index(self):
        check(lambda a: a[1:, :2], (3, 3))
        check(lambda a: a[np.array([0, 0, 2])], (3, 2))

    def test_sum_mean_axes(self):
        check(lambda a: a.sum(axis=0), (3, 4))
        check(lambda a: a.mean(axis=1, keepdims=True), (3, 4))
        check(lambda a: a.sum(), (3, 4))

    def test_concat(self):
        check(lambda a, b: ag.concat([a, b], axis=0), (2, 3), (1, 3))
        check(lambda a, b: ag.concat([a, b], axis=1), (2, 3), (2, 2))

    def test_astype_round_trip(self):
        t = Tensor(np.ones(3), requires_grad=True)
        t.astype(np.float32).sum().backward()
        assert t.grad.dtype == np.float64

    def test_shared_node_accumulates(self):
        t = Tensor(np.array([3.0]), requires_grad=True)
        (t * t + t).sum().backward()
        np.testing.assert_allclose(t.grad, [7.0])

    def test_constants_get_no_grad(self):
        a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2))
        (a * b).sum().backward()
        assert b.grad is None and a.grad is not None

    def test_integer_input_promoted(self):
        assert Tensor(np.arange(3)).data.dtype == np.float64


class TestLayers:
    def test_window_max_values(self):
        x = Tensor(np.array([[1.0, 5.0], [3.0, 2.0], [0.0, 9.0]]))
        np.testing.assert_array_equal(ag.window_max(x, 2).data, [[3.0, 5.0], [0.0, 9.0]])

    def test_window_max_grad(self):
        check(lambda a: ag.window_max(a, 3), (7, 4), seed=4)

    def test_window_max_routes_to_argmax(self):
        x = Tensor(np.array([[1.0], [4.0], [2.0]]), requires_grad=True)
        ag.window_max(x, 3).sum().backward()
        np.testing.assert_array_equal(x.grad.ravel(), [0.0, 1.0, 0.0])

    def test_batch_norm_normalizes(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, (50, 4))
        out, mu, var = ag.batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-12)
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=0), 1.0, rtol=1e-9)
        np.testing.assert_allclose(mu, x.mean(axis=0))
        np.testing.assert_allclose(var, x.var(axis=0))

    def test_batch_norm_grad(self):
        check(lambda x, s, b: ag.batch_norm(x, s, b, 1e-5)[0], (6, 3), (3,), (3,), seed=2)

    def test_softmax_grad(self):
        check(lambda a: ag.softmax(a, axis=1), (3, 4))

    def test_log_softmax_grad(self):
        check(lambda a: ag.log_softmax(a, axis=0), (4, 3))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.floats(-500, 500))
    def test_softmax_stable_rows(self, r, c, shift):
        x = np.random.default_rng(r * 7 + c).normal(size=(r, c)) + shift
        y = ag.softmax(Tensor(x), axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.exp(ag.log_softmax(Tensor(x), axis=1).data), y, atol=1e-12)
