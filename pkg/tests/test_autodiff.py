import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from overflow import autodiff as ad
from overflow.autodiff import Tensor
from overflow.layers import dropout_mask, lstm_cell


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def check_grad(fn, params, tol=1e-6):
    def loss():
        return fn().sum()

    for p in params:
        p.grad = None
    ad.backward(loss())
    numeric = ad.numerical_gradient(lambda: loss().item(), params)
    for p, num in zip(params, numeric):
        assert ad.relative_error(p.grad, num) < tol


def test_elementwise_examples():
    assert np.array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])
    assert ad.sigmoid([0.0]).data[0] == 0.5
    # oracle: ln(1 + e^0) at 30 digits
    assert ad.softplus([0.0]).data[0] == pytest.approx(float(mpmath.log(1 + mpmath.e**0)), abs=1e-12)
    assert round(float(ad.softplus([0.0]).data[0]), 10) == 0.6931471806


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.add(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        ad.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(np.eye(2), m).data, m)
    assert ad.matmul([[1.0, 0.0]], [[5.0], [7.0]]).data.tolist() == [[5.0]]


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    check_grad(lambda: ad.matmul(a, b) * ad.matmul(a, b), [a, b])


def test_logsumexp_examples():
    assert ad.logsumexp([math.log(0.25), math.log(0.25)]).item() == pytest.approx(math.log(0.5), abs=1e-15)
    assert abs(ad.logsumexp([-1e9, 0.0]).item()) < 1e-300
    mpmath.mp.dps = 50
    oracle = mpmath.log(sum(mpmath.exp(mpmath.mpf(v)) for v in ("0.3", "1.7", "-2.0")))
    assert abs(ad.logsumexp([0.3, 1.7, -2.0]).item() - float(oracle)) < 1e-12


def test_logsumexp_all_neg_inf_has_zero_grad():
    x = leaf([[-np.inf, -np.inf], [0.0, 1.0]])
    out = ad.logsumexp(x, axis=-1)
    assert out.data[0] == -np.inf
    ad.backward(ad.sum(out[1:]))
    assert np.all(np.isfinite(x.grad)) and np.all(x.grad[0] == 0.0)


def test_lstm_zero_weights_give_zero_state():
    x, h, c = np.ones(3), np.ones(2), np.zeros(2)
    h1, c1 = lstm_cell(x, h, c, np.zeros((3, 8)), np.zeros((2, 8)), np.zeros(8))
    assert np.array_equal(h1.data, np.zeros(2)) and np.array_equal(c1.data, np.zeros(2))


def test_lstm_saturated_forget_keeps_memory():
    b = np.zeros(8)
    b[0:2] = -20.0  # input gate
    b[2:4] = 20.0  # forget gate
    c_prev = np.array([0.7, -1.3])
    rng = np.random.default_rng(1)
    _, c1 = lstm_cell(rng.normal(size=3), np.zeros(2), c_prev, np.zeros((3, 8)), np.zeros((2, 8)), b)
    assert np.allclose(c1.data, c_prev, atol=1e-8)


def test_lstm_gradient():
    rng = np.random.default_rng(2)
    params = [leaf(rng.normal(0, 0.5, s)) for s in [(3,), (4,), (4,), (3, 16), (4, 16), (16,)]]
    check_grad(lambda: lstm_cell(*params)[0], params, tol=1e-4)


def test_lstm_width_mismatch():
    with pytest.raises(ValueError):
        lstm_cell(np.ones(5), np.zeros(2), np.zeros(2), np.zeros((3, 8)), np.zeros((2, 8)), np.zeros(8))


def test_dropout_mask():
    assert np.array_equal(dropout_mask((4, 3), 0.0, np.random.default_rng(0)), np.ones((4, 3)))
    m1 = dropout_mask((50,), 0.5, np.random.default_rng(7))
    m2 = dropout_mask((50,), 0.5, np.random.default_rng(7))
    assert np.array_equal(m1, m2)
    big = dropout_mask((100_000,), 0.5, np.random.default_rng(3))
    assert abs(big.mean() - 1.0) < 0.02
    with pytest.raises(ValueError):
        dropout_mask((3,), 1.0, np.random.default_rng(0))


def test_backward_examples():
    x = leaf(3.0)
    ad.backward(x * x)
    assert x.grad == 6.0
    y = leaf(1.5)
    ad.backward(y + y)
    assert y.grad == 2.0
    rng = np.random.default_rng(4)
    a, b = leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    check_grad(lambda: a * b, [a, b])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        ad.backward(leaf([1.0, 2.0]) * 2.0)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with ad.no_grad():
        y = ad.exp(x) * 3.0
    assert not y.requires_grad


def test_broadcast_gradient_reduces():
    rng = np.random.default_rng(5)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4,)))
    check_grad(lambda: ad.tanh(a + b) * b, [a, b])
    assert b.grad.shape == (4,)


def test_triangular_solve_gradient():
    rng = np.random.default_rng(6)
    lower = leaf(np.tril(rng.normal(size=(4, 4))) + 3 * np.eye(4))
    rhs = leaf(rng.normal(size=(4, 2)))
    check_grad(lambda: ad.triangular_solve(lower, rhs, lower=True) * rhs, [lower, rhs], tol=1e-5)
    assert np.all(np.triu(lower.grad, 1) == 0)


UNARY = ["exp", "log", "tanh", "sigmoid", "softplus", "neg"]
BINARY = ["add", "sub", "mul", "div"]
finite = st.floats(-2.0, 2.0, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(kind=st.sampled_from(UNARY + BINARY),
       a=arrays(np.float64, (3,), elements=finite), b=arrays(np.float64, (3,), elements=finite))
def test_elementwise_gradients_property(kind, a, b):
    if kind == "log":
        a = np.abs(a) + 0.5
    if kind == "div":
        b = np.sign(b + 1e-3) * (np.abs(b) + 0.5)
    x, y = leaf(a), leaf(b)
    params = [x] if kind in UNARY else [x, y]
    check_grad(lambda: ad.elementwise(kind, x, y if kind in BINARY else None), params, tol=1e-4)


@settings(max_examples=50, deadline=None)
@given(a=arrays(np.float64, (2, 5), elements=st.floats(-30, 30)))
def test_logsumexp_gradient_property(a):
    x = leaf(a)
    check_grad(lambda: ad.logsumexp(x, axis=-1), [x], tol=1e-4)
    assert np.allclose(x.grad.sum(axis=-1), 1.0)
