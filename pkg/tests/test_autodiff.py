import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sagnet import autodiff as ad
from sagnet.autodiff import (DisconnectedParameter, NonFiniteValue, NotScalar, Parameter,
                             ShapeMismatch, Tape, Tensor)

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def numeric_grad(f, p: Parameter, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(p.value)
    flat, gf = p.value.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        hi = float(f().value)
        flat[j] = orig - eps
        lo = float(f().value)
        flat[j] = orig
        gf[j] = (hi - lo) / (2 * eps)
    return g


def tape_grad(f, params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    ad.backward(loss, tape)
    return [p.grad.copy() for p in params]


def check(f, params, tol=1e-6):
    analytic = tape_grad(f, params)
    for p, g in zip(params, analytic):
        np.testing.assert_allclose(g, numeric_grad(f, p), rtol=tol, atol=tol)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_elementwise_primitives(a0, b0):
    a, b = Parameter(a0, "a"), Parameter(b0, "b")
    check(lambda: ad.sum(ad.mul(ad.tanh(ad.add(a, b)), ad.sigmoid(ad.subtract(a, b)))), [a, b])
    check(lambda: ad.mean(ad.square(ad.scale(a, -1.7))), [a])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (5, 4), elements=finite),
       arrays(np.float64, (5,), elements=finite))
def test_matmul_transposed_with_row_bias(x0, w0, b0):
    x, w, b = Parameter(x0), Parameter(w0), Parameter(b0)
    check(lambda: ad.sum(ad.tanh(ad.add(ad.matmul(x, w, transpose_b=True), b))), [x, w, b])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_matmul_plain_and_vector(a0, v0):
    a, v = Parameter(a0), Parameter(v0)
    w = Parameter(np.arange(6.0).reshape(3, 2) / 7)
    check(lambda: ad.sum(ad.square(ad.matmul(a, w))), [a, w])
    check(lambda: ad.sum(ad.tanh(ad.matmul(a, v))), [a, v])


def test_concat_and_take_route_gradients():
    a = Parameter(np.linspace(-1, 1, 6).reshape(2, 3))
    b = Parameter(np.linspace(0.5, 2, 6).reshape(2, 3))

    def f():
        c = ad.concat([a, b], axis=1)
        return ad.sum(ad.square(ad.take(c, slice(0, 2))) * 0.5) + ad.sum(ad.tanh(ad.take(c, (slice(None), 4))))

    check(f, [a, b])


def test_take_with_repeated_rows_accumulates():
    a = Parameter(np.arange(4.0).reshape(2, 2))
    [g] = tape_grad(lambda: ad.sum(ad.take(a, np.array([0, 0, 1]))), [a])
    np.testing.assert_array_equal(g, [[2.0, 2.0], [1.0, 1.0]])


def test_scalar_broadcast_gradient_sums():
    s = Parameter(np.array([0.3]))
    x = Tensor(np.ones((2, 3)))
    [g] = tape_grad(lambda: ad.sum(ad.mul(x, s)), [s])
    np.testing.assert_allclose(g, [6.0])


def test_shared_subexpression_accumulates():
    a = Parameter(np.array([[0.4, -0.2]]))
    check(lambda: ad.sum(ad.mul(ad.tanh(a), ad.tanh(a))), [a])


def test_tanh_sigmoid_values_at_zero():
    z = Parameter(np.zeros((1, 1)))
    [g] = tape_grad(lambda: ad.sum(ad.tanh(z)), [z])
    assert g[0, 0] == 1.0
    [g] = tape_grad(lambda: ad.sum(ad.sigmoid(z)), [z])
    assert g[0, 0] == 0.25
    assert ad.sigmoid(Tensor(np.array([0.0]))).value[0] == 0.5


def test_sigmoid_stable_at_extremes():
    v = ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).value
    assert np.isfinite(v).all() and v[0] == 0.0 and v[1] == 1.0


def test_loss_must_be_scalar():
    a = Parameter(np.ones((2, 2)))
    with Tape() as tape:
        y = ad.tanh(a)
    with pytest.raises(NotScalar):
        ad.backward(y, tape)


@pytest.mark.parametrize("shapes", [((2, 3), (3, 2)), ((2, 3), (2,)), ((4,), (3,))])
def test_incompatible_shapes(shapes):
    a, b = Tensor(np.ones(shapes[0])), Tensor(np.ones(shapes[1]))
    with pytest.raises(ShapeMismatch):
        ad.add(a, b)


def test_matmul_inner_dimension_checked():
    with pytest.raises(ShapeMismatch):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_strict_backward_names_disconnected_parameter():
    a, b = Parameter(np.ones(2), "a"), Parameter(np.ones(2), "b")
    with Tape() as tape:
        loss = ad.sum(ad.tanh(a))
    with pytest.raises(DisconnectedParameter, match="b"):
        ad.backward(loss, tape, params=[a, b], strict=True)


def test_tape_cannot_be_replayed():
    a = Parameter(np.ones(2))
    with Tape() as tape:
        loss = ad.sum(a)
    ad.backward(loss, tape)
    with pytest.raises(RuntimeError):
        ad.backward(loss, tape)


def test_no_tape_records_nothing():
    a = Parameter(np.ones(2))
    out = ad.tanh(a)
    assert out.backward_fn is None and not out.requires_grad


def test_parameter_grads_accumulate_until_zeroed():
    a = Parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        with Tape() as tape:
            loss = ad.sum(ad.square(a))
        ad.backward(loss, tape)
    np.testing.assert_array_equal(a.grad, [4.0, 8.0])
    a.zero_grad()
    assert not a.grad.any()


def test_grad_check_agrees_and_flags_nonfinite():
    w = Parameter(np.array([[0.3, -0.7], [1.1, 0.2]]))
    x = np.array([[0.5, -1.0]])
    err = ad.grad_check(lambda: ad.sum(ad.tanh(ad.matmul(x, w, transpose_b=True))), [w])
    assert err < 1e-7
    with pytest.raises(NonFiniteValue), np.errstate(invalid="ignore"):
        ad.grad_check(lambda: ad.sum(ad.scale(w, float("inf"))), [w])
