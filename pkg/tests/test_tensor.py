import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fusionattn import tensor as T
from fusionattn.tensor import NumericError, ShapeError, Tape, TapeError, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def grad_of(f, *leaves):
    for x in leaves:
        x.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    return [x.grad for x in leaves]


def test_forward_values_match_numpy(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_array_equal(T.matmul(ta, tb).data, a @ b)
    np.testing.assert_allclose(T.sigmoid(ta).data, 1 / (1 + np.exp(-a)), rtol=1e-15)
    np.testing.assert_array_equal(T.tanh(ta).data, np.tanh(a))
    np.testing.assert_allclose(T.softmax(ta).data.sum(axis=-1), 1.0, rtol=1e-15)
    np.testing.assert_array_equal(T.mean(ta, axis=0).data, a.mean(axis=0))
    mu, sd = T.mean_std(ta, axis=0)
    np.testing.assert_allclose(sd.data, np.sqrt(a.var(axis=0) + 1e-8), rtol=1e-14)
    np.testing.assert_array_equal(T.transpose(ta).data, a.T)
    np.testing.assert_array_equal(T.pick(ta, [0, 1, 2]).data, a[[0, 1, 2], [0, 1, 2]])


def test_operator_sugar(rng):
    a, b = Tensor(rng.standard_normal((2, 2))), Tensor(rng.standard_normal((2, 2)))
    np.testing.assert_array_equal((a @ b).data, a.data @ b.data)
    np.testing.assert_array_equal((a * b).data, a.data * b.data)
    np.testing.assert_array_equal((2.0 * a).data, 2 * a.data)
    np.testing.assert_array_equal((-a).data, -a.data)
    np.testing.assert_array_equal(a[0].data, a.data[0])


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        T.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
    with pytest.raises(ShapeError):
        T.reshape(Tensor(np.ones(6)), (4, 2))


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        T.softmax(Tensor([1.0, np.nan]))


def test_softmax_stable_on_large_logits():
    out = T.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-300)


def test_pointwise_dispatch_unknown():
    with pytest.raises(ValueError):
        T.pointwise("relu", Tensor([1.0]))
    np.testing.assert_array_equal(T.pointwise("tanh", Tensor([0.5])).data, np.tanh([0.5]))


def test_tape_rejects_nonscalar_and_double_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(TapeError):
        tape.backward(y)
    with Tape() as tape:
        s = T.sum(T.scale(x, 2.0))
    tape.backward(s)
    with pytest.raises(TapeError):
        tape.backward(s)
    tape.reset()
    assert s.node_id is None


def test_detached_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        s = T.sum(x).detach()
    with pytest.raises(TapeError):
        tape.backward(s)
    with pytest.raises(TapeError):
        s.backward()


def test_no_tape_no_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.sum(x)
    assert y.node_id is None and not y.requires_grad


def test_grad_accumulates_for_reused_input():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = grad_of(lambda: T.sum(T.add(x, x)), x)
    np.testing.assert_array_equal(g, [2.0, 2.0])


def test_tensor_backward_method():
    x = Tensor([3.0], requires_grad=True)
    with Tape():
        y = T.sum(T.hadamard(x, x))
    y.backward()
    np.testing.assert_array_equal(x.grad, [6.0])


def test_log_floor_blocks_gradient():
    x = Tensor([1e-20, 0.5], requires_grad=True)
    (g,) = grad_of(lambda: T.sum(T.log(x, floor=1e-12)), x)
    np.testing.assert_array_equal(g, [0.0, 2.0])


def test_relative_error_floor():
    assert T.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert T.relative_error(np.array([1.0]), np.array([1.0 + 1e-9])) == pytest.approx(1e-9, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(a):
    p = T.softmax(Tensor(a), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_gradient_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((m, k)), requires_grad=True)
    b = Tensor(rng.standard_normal((k, n)), requires_grad=True)
    w = rng.standard_normal((m, n))
    ga, gb = grad_of(lambda: T.sum(T.hadamard(T.matmul(a, b), Tensor(w))), a, b)
    # analytic: d/dA sum(W * AB) = W B^T, d/dB = A^T W
    np.testing.assert_allclose(ga, w @ b.data.T, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gb, a.data.T @ w, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 5), st.integers(1, 4)), elements=st.floats(-3, 3)))
def test_mean_std_gradient_matches_fd(a):
    x = Tensor(a.copy(), requires_grad=True)
    w = Tensor(np.linspace(-1, 1, 2 * a.shape[1]))

    def f():
        return T.sum(T.hadamard(T.concat(list(T.mean_std(x, axis=0)), axis=0), w))

    (g,) = grad_of(f, x)
    fd = T.finite_diff_grad(lambda _: f(), x, h=1e-5).data
    assert T.relative_error(g, fd) < 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_batched_matmul_broadcast_grad(batch, k, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((batch, 3, k)), requires_grad=True)
    b = Tensor(rng.standard_normal((k, 2)), requires_grad=True)
    ga, gb = grad_of(lambda: T.sum(T.matmul(a, b)), a, b)
    assert ga.shape == a.shape and gb.shape == b.shape
    np.testing.assert_allclose(gb, a.data.sum(axis=(0, 1))[:, None].repeat(2, axis=1), rtol=1e-12)


def test_finite_diff_restores_input(rng):
    arr = rng.standard_normal((3, 2))
    x = Tensor(arr.copy())
    T.finite_diff_grad(lambda t: float(np.sum(t.data ** 2)), x)
    np.testing.assert_array_equal(x.data, arr)
