"""Tape mechanics and generic tensor ops."""

import numpy as np
import pytest

from deepair.rng import Rng
from deepair.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    matmul,
    mean_all,
    mul,
    relu,
    row,
    scale,
    sigmoid,
    sub,
    sum_all,
    tanh_act,
)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_square_gives_x():
    x = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
    with Tape() as tape:
        loss = scale(sum_all(mul(x, x)), 0.5)
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=0)


def test_backward_accumulates_without_reset():
    x = Tensor(np.array([2.0, 4.0]), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    backward(loss, tape)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, 2.0 * np.ones(2))


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        backward(y, tape)


def test_backward_linearity():
    # grad(a*l1 + b*l2) == a*grad(l1) + b*grad(l2)
    rng = Rng(7)
    xv = rng.normal(shape=(4,))
    a, b = 2.5, -1.25

    def grad_of(fn):
        x = Tensor(xv.copy(), requires_grad=True)
        with Tape() as tape:
            loss = fn(x)
        backward(loss, tape)
        return x.grad

    l1 = lambda x: sum_all(mul(x, x))
    l2 = lambda x: sum_all(tanh_act(x))
    combined = grad_of(lambda x: add(scale(l1(x), a), scale(l2(x), b)))
    separate = a * grad_of(l1) + b * grad_of(l2)
    np.testing.assert_allclose(combined, separate, rtol=1e-12, atol=1e-15)


def test_no_tape_means_no_recording_and_no_grads():
    x = Tensor(np.ones(3), requires_grad=True)
    y = sum_all(mul(x, x))
    assert y.grad is None and not y._rec
    assert x.grad is None


def test_elementwise_shape_mismatch_rejected():
    a = Tensor(np.ones((2, 2)))
    b = Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError, match=r"\(2, 2\).*\(2, 3\)"):
        add(a, b)


def test_matmul_matrix_vector_grads():
    A = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    v = Tensor(np.array([5.0, -1.0]), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(matmul(A, v))
    backward(loss, tape)
    np.testing.assert_array_equal(v.grad, A.data.T @ np.ones(2))
    np.testing.assert_array_equal(A.grad, np.outer(np.ones(2), v.data))


def test_row_select_and_scatter():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(row(x, 1))
    backward(loss, tape)
    expected = np.zeros((3, 2))
    expected[1] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_sigmoid_stable_in_tails():
    x = Tensor(np.array([-1000.0, 0.0, 1000.0]))
    s = sigmoid(x).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0], atol=1e-12)


def test_activation_values():
    x = Tensor(np.array([-2.0, 0.0, 3.0]))
    np.testing.assert_array_equal(relu(x).data, [0.0, 0.0, 3.0])
    np.testing.assert_allclose(tanh_act(x).data, np.tanh(x.data))
    d = sub(x, Tensor(np.array([1.0, 1.0, 1.0])))
    np.testing.assert_array_equal(d.data, [-3.0, -1.0, 2.0])
    np.testing.assert_allclose(mean_all(x).item(), 1.0 / 3.0)


def test_rng_same_seed_same_stream():
    a = Rng(123).normal(shape=(10,))
    b = Rng(123).normal(shape=(10,))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, Rng(124).normal(shape=(10,)))


def test_rng_child_streams_independent_of_order():
    r = Rng(9)
    c1 = r.child("init").uniform(0, 1, (5,))
    r2 = Rng(9)
    r2.normal(shape=(100,))  # consume the parent stream first
    c2 = r2.child("init").uniform(0, 1, (5,))
    np.testing.assert_array_equal(c1, c2)
