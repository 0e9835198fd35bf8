"""Unit tests for the tape-based autodiff tensor library.

Gradient tests compare analytic gradients against central finite
differences computed here, independently of the library's own grad_check.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hyperpeft.tensor as T
from hyperpeft.tensor import GraphError, Parameter, ShapeError, Tensor


def finite_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f()
        x[idx] = orig - eps
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


def analytic_grad(loss_fn, t: Tensor) -> np.ndarray:
    t.grad = None
    loss = loss_fn()
    T.backward(loss)
    return t.grad.copy()


def check_op(loss_fn, t: Tensor, tol=1e-7):
    ana = analytic_grad(loss_fn, t)
    num = finite_diff(lambda: float(loss_fn().data), t.data)
    np.testing.assert_allclose(ana, num, rtol=tol, atol=tol)


# --- forward-value examples ---------------------------------------------


def test_rms_norm_constant_vector():
    x = Tensor([2.0, 2.0])
    g = Tensor([1.0, 1.0])
    out = T.rms_norm(x, g, eps=0.0)
    np.testing.assert_allclose(out.data, [1.0, 1.0])


def test_rms_norm_zero_input():
    out = T.rms_norm(Tensor([0.0, 0.0]), Tensor([1.0, 1.0]), eps=1e-6)
    np.testing.assert_allclose(out.data, [0.0, 0.0])


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 4)))
    loss = T.cross_entropy(logits, [0, 1, 2], pad_id=-1)
    assert loss.data == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_confident_correct():
    logits = np.zeros((2, 5))
    logits[0, 3] = 100.0
    logits[1, 1] = 100.0
    loss = T.cross_entropy(Tensor(logits), [3, 1], pad_id=-1)
    assert float(loss.data) < 1e-12


def test_cross_entropy_matches_logsumexp_bruteforce():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 9))
    targets = rng.integers(0, 9, size=6)
    expected = 0.0
    for i, t in enumerate(targets):
        row = logits[i]
        expected += np.log(np.exp(row).sum()) - row[t]
    expected /= len(targets)
    loss = T.cross_entropy(Tensor(logits), list(targets), pad_id=-1)
    assert float(loss.data) == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_pad_positions_excluded():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 5))
    full = T.cross_entropy(Tensor(logits[:2]), [1, 2], pad_id=9)
    padded = T.cross_entropy(Tensor(logits), [1, 2, 9, 9], pad_id=9)
    assert float(full.data) == pytest.approx(float(padded.data), abs=1e-12)


def test_cross_entropy_all_pad_is_zero_with_zero_grad():
    logits = Tensor(np.random.default_rng(2).normal(size=(3, 4)),
                    requires_grad=True)
    loss = T.cross_entropy(logits, [7, 7, 7], pad_id=7)
    assert float(loss.data) == 0.0
    T.backward(loss)
    np.testing.assert_array_equal(logits.grad, np.zeros((3, 4)))


def test_backward_of_sum_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum_(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        T.backward(T.mul(x, 2.0))


def test_backward_accumulates_until_cleared():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum_(x))
    T.backward(T.sum_(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_frozen_parameter_still_receives_grad():
    p = Parameter("theta", [1.0, 2.0], frozen=True)
    q = Parameter("xi", [3.0, 4.0])
    loss = T.sum_(T.mul(p.tensor, q.tensor))
    T.backward(loss)
    assert p.tensor.grad is not None and np.all(p.tensor.grad != 0)
    assert q.tensor.grad is not None and np.all(q.tensor.grad != 0)


def test_add_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_matmul_requires_2d():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


def test_forward_determinism():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 5))
    a = T.softmax(T.matmul(Tensor(x), Tensor(w))).data
    b = T.softmax(T.matmul(Tensor(x), Tensor(w))).data
    np.testing.assert_array_equal(a, b)


# --- softmax properties ---------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=10.0, size=(3, 7))
    out = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(3), atol=1e-12)
    assert np.all(out >= 0) and np.all(out <= 1)


def test_softmax_handles_large_logits():
    out = T.softmax(Tensor([[1000.0, 1000.0]])).data
    np.testing.assert_allclose(out, [[0.5, 0.5]])


# --- per-op gradient checks against finite differences -------------------


@pytest.mark.parametrize("seed", range(10))
def test_per_op_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    g = Tensor(rng.normal(size=4) + 2.0, requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    targets = list(rng.integers(0, 5, size=3))

    cases = {
        "add_bias": lambda: T.sum_(T.add(T.matmul(x, w), b)),
        "mul": lambda: T.sum_(T.mul(x, x)),
        "tanh": lambda: T.sum_(T.tanh(x)),
        "relu": lambda: T.sum_(T.relu(x)),
        "mean": lambda: T.mean_(T.matmul(x, w)),
        "softmax": lambda: T.sum_(T.mul(T.softmax(T.matmul(x, w)),
                                        T.softmax(T.matmul(x, w)))),
        "rms_norm": lambda: T.sum_(T.rms_norm(x, g)),
        "cross_entropy": lambda: T.cross_entropy(T.matmul(x, w), targets,
                                                 pad_id=-1),
        "reshape": lambda: T.sum_(T.tanh(T.reshape(x, (4, 3)))),
        "transpose": lambda: T.sum_(T.tanh(T.transpose(x))),
        "concat": lambda: T.sum_(T.tanh(T.concat([x, x], axis=0))),
        "stack": lambda: T.sum_(T.tanh(T.stack([x, x], axis=0))),
        "getitem": lambda: T.sum_(T.tanh(x[1:3])),
        "embedding": lambda: T.sum_(T.embedding(w, [0, 2, 2])),
    }
    for name, loss_fn in cases.items():
        for t in (x, w, g, b):
            t.grad = None
        loss = loss_fn()
        T.backward(loss)
        for t in (x, w, g, b):
            if t.grad is None:
                continue
            num = finite_diff(lambda: float(loss_fn().data), t.data)
            np.testing.assert_allclose(
                t.grad, num, rtol=1e-4, atol=1e-6,
                err_msg=f"op {name}, seed {seed}")


def test_composite_mlp_gradcheck_double_precision():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(5, 8)))
    w1 = Parameter("w1", rng.normal(size=(8, 16)))
    b1 = Parameter("b1", rng.normal(size=16))
    w2 = Parameter("w2", rng.normal(size=(16, 4)))
    targets = list(rng.integers(0, 4, size=5))

    def f():
        h = T.tanh(T.add(T.matmul(x, w1.tensor), b1.tensor))
        return T.cross_entropy(T.matmul(h, w2.tensor), targets, pad_id=-1)

    err = T.grad_check(f, [w1, b1, w2], rng=np.random.default_rng(1))
    assert err < 1e-7


def test_grad_check_linear_map_near_machine_epsilon():
    rng = np.random.default_rng(4)
    w = Parameter("w", rng.normal(size=(3, 3)))
    x = Tensor(rng.normal(size=(2, 3)))

    def f():
        return T.sum_(T.matmul(x, w.tensor))

    assert T.grad_check(f, [w]) < 1e-9


def test_grad_check_negative_control_detects_corruption():
    """A deliberately wrong gradient must be flagged with a large error."""
    rng = np.random.default_rng(5)
    w = Parameter("w", rng.normal(size=(3, 3)))
    x = Tensor(rng.normal(size=(2, 3)))

    def f():
        out = T.tanh(T.matmul(x, w.tensor))
        corrupted = T._make(out.data, (out,),
                            lambda grad: ((grad * 3.0),))  # wrong rule
        return T.sum_(corrupted)

    assert T.grad_check(f, [w]) > 1e-2


def test_precision_toggle():
    T.set_precision("float32")
    try:
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        T.set_precision("float64")
    assert Tensor([1.0]).data.dtype == np.float64
