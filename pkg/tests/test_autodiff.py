import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgmp import autodiff as ad
from sgmp.autodiff import Tensor
from sgmp.errors import DimensionError, EvaluationError, NumericError, RankError


def param(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def numeric_grad(fn, x, eps=1e-5):
    """Central differences of a plain numpy scalar function."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for k in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[k] += eps
        down[k] -= eps
        g[k] = (fn(up) - fn(down)) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


# -- worked examples -----------------------------------------------------------

def test_matvec_examples():
    assert ad.matvec(Tensor(np.eye(2)), Tensor([3.0, 4.0])).data.tolist() == [3.0, 4.0]
    assert ad.matvec(Tensor(np.zeros((2, 3))), Tensor([1.0, 1.0, 1.0])).data.tolist() == [0.0, 0.0]
    assert ad.matvec(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([1.0, 1.0])).data.tolist() == [3.0, 7.0]


def test_matvec_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2,\)"):
        ad.matvec(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_concat_examples():
    assert ad.concat(Tensor(np.zeros(0)), Tensor([1.0])).data.tolist() == [1.0]
    assert ad.concat(Tensor([1.0, 2.0]), Tensor([3.0])).data.tolist() == [1.0, 2.0, 3.0]
    a, b = param([1.0, 2.0, 5.0]), param([-1.0])
    ad.backward(ad.sum(ad.concat(a, b)))
    assert a.grad.tolist() == [1.0, 1.0, 1.0]
    assert b.grad.tolist() == [1.0]


def test_concat_rejects_matrices():
    with pytest.raises(RankError):
        ad.concat(Tensor(np.zeros((2, 2))), Tensor([1.0]))


def test_sigmoid_examples():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    for x in (-3.0, 0.7, 10.0):
        assert ad.sigmoid(Tensor(x)).item() == pytest.approx(1 - ad.sigmoid(Tensor(-x)).item(), abs=1e-15)
    x = param(0.0)
    ad.backward(ad.sigmoid(x))
    assert x.grad == 0.25


def test_sigmoid_saturates_without_overflow():
    y = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert y[0] >= 0.0 and y[1] == 1.0
    assert np.isfinite(y).all()


def test_tanh_examples():
    assert ad.tanh(Tensor(0.0)).item() == 0.0
    x = param(0.0)
    ad.backward(ad.tanh(x))
    assert x.grad == 1.0
    assert abs(ad.tanh(Tensor(50.0)).item() - 1.0) <= 1e-12


def test_softmax_examples():
    assert ad.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]
    np.testing.assert_allclose(ad.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)
    # large logits are shifted before exponentiating
    big = ad.softmax(Tensor([1000.0, 1000.0])).data
    assert big.tolist() == [0.5, 0.5]


def test_softmax_empty_raises():
    with pytest.raises(RankError):
        ad.softmax(Tensor(np.zeros(0)))


def test_backward_needs_scalar():
    with pytest.raises(DimensionError):
        ad.backward(param([1.0, 2.0]) * 2.0)


def test_backward_constant_loss_gives_zero_grad():
    theta = param([1.0, 2.0])
    loss = ad.sum(theta) * 0.0 + 3.0
    ad.backward(loss)
    assert theta.grad.tolist() == [0.0, 0.0]


def test_backward_linear():
    c = np.array([0.5, -2.0, 3.0])
    theta = param([1.0, 1.0, 1.0])
    ad.backward(ad.sum(theta * Tensor(c)))
    assert theta.grad.tolist() == c.tolist()


def test_two_path_accumulation():
    # y = x*x + 3x, read from the same tensor twice
    x = param(2.0)
    y = x * x + x * 3.0
    ad.backward(y)
    assert x.grad == 2 * 2.0 + 3.0
    # a shared intermediate used by two consumers
    a = param([1.0, -0.5])
    s = ad.sigmoid(a)
    out = ad.sum(s * s) + ad.sum(s)
    ad.backward(out)
    sv = 1 / (1 + np.exp(-a.data))
    np.testing.assert_allclose(a.grad, (2 * sv + 1) * sv * (1 - sv), rtol=1e-14)


def test_leaf_grads_accumulate_until_zeroed():
    x = param(1.5)
    ad.backward(x * 2.0)
    ad.backward(x * 2.0)
    assert x.grad == 4.0
    x.zero_grad()
    assert x.grad is None


def test_composite_expression_matches_finite_differences():
    rng = np.random.default_rng(3)
    W0, x0, b0 = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=3)

    def ref(W, x, b):
        h = np.tanh(W @ x + b)
        return float(np.sum(1 / (1 + np.exp(-h)) * h))

    W, x, b = param(W0), param(x0), param(b0)
    h = ad.tanh(ad.matvec(W, x) + b)
    ad.backward(ad.sum(ad.sigmoid(h) * h))
    assert rel_err(W.grad, numeric_grad(lambda v: ref(v, x0, b0), W0)) < 1e-5
    assert rel_err(x.grad, numeric_grad(lambda v: ref(W0, v, b0), x0)) < 1e-5
    assert rel_err(b.grad, numeric_grad(lambda v: ref(W0, x0, v), b0)) < 1e-5


def test_grad_check_quadratic_and_constant():
    theta = {"theta": param([0.3, -1.2, 2.5])}
    err = ad.grad_check(lambda p: ad.sum(p["theta"] * p["theta"]) * 0.5, theta)
    assert err < 1e-7
    assert ad.grad_check(lambda p: ad.sum(p["theta"]) * 0.0 + 1.0, theta) == 0.0


def test_grad_check_reports_worst_parameter():
    params = {"a": param([1.0]), "b": param([2.0])}

    def broken(p):
        # detach b: analytic gradient is zero, numeric is not
        return ad.sum(p["a"] * p["a"]) + ad.sum(Tensor(p["b"].data) * p["b"])

    err, name, idx = ad.grad_check_report(broken, params)
    assert name == "b" and idx == 0 and err > 0.1


def test_grad_check_non_finite_objective():
    with pytest.raises(EvaluationError):
        ad.grad_check(lambda p: Tensor(np.nan), {"x": param(0.0)})


def test_non_finite_values_raise_immediately():
    with pytest.raises(NumericError):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(NumericError):
        ad.log(Tensor([0.0]))


def test_no_grad_records_no_tape():
    x = param([1.0, 2.0])
    with ad.no_grad():
        y = ad.sum(x * x)
    assert not y.requires_grad
    assert ad.grad_enabled()


def test_segment_ops():
    x = param([[1.0, 5.0], [3.0, 2.0], [4.0, 4.0]])
    s = ad.segment_sum(x, np.array([0, 0, 2]), 3)
    assert s.data.tolist() == [[4.0, 7.0], [0.0, 0.0], [4.0, 4.0]]
    m = ad.segment_max(x, np.array([0, 0, 2]), 3)
    assert m.data.tolist() == [[3.0, 5.0], [0.0, 0.0], [4.0, 4.0]]
    ad.backward(ad.sum(m))
    assert x.grad.tolist() == [[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]


def test_forward_backward_bit_identical_on_repeat():
    def run():
        rng = np.random.default_rng(11)
        W, x = param(rng.normal(size=(5, 5))), param(rng.normal(size=5))
        y = ad.log_softmax(ad.tanh(ad.matvec(W, x)))
        ad.backward(ad.sum(y * Tensor(np.arange(5.0))))
        return y.data.tobytes(), W.grad.tobytes(), x.grad.tobytes()

    assert run() == run()


# -- properties against numpy references -----------------------------------------

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 5), elements=finite)


def _check_unary(op, ref, x0, w):
    x = param(x0)
    ad.backward(ad.sum(op(x) * Tensor(w)))
    num = numeric_grad(lambda v: float(np.sum(ref(v) * w)), x0)
    assert rel_err(x.grad, num) < 1e-5


UNARY = {
    "sigmoid": (ad.sigmoid, lambda v: 1 / (1 + np.exp(-v))),
    "tanh": (ad.tanh, np.tanh),
    "exp": (ad.exp, np.exp),
    "softmax": (ad.softmax, lambda v: np.exp(v - v.max()) / np.exp(v - v.max()).sum()),
    "log_softmax": (ad.log_softmax, lambda v: v - v.max() - math.log(np.exp(v - v.max()).sum())),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=40, deadline=None)
@given(x0=vectors, seed=st.integers(0, 2**16))
def test_unary_gradients(name, x0, seed):
    w = np.random.default_rng(seed).normal(size=x0.shape)
    _check_unary(*UNARY[name], x0, w)


@settings(max_examples=40, deadline=None)
@given(x0=arrays(np.float64, st.integers(1, 5), elements=st.floats(0.1, 5)), seed=st.integers(0, 2**16))
def test_log_gradient(x0, seed):
    w = np.random.default_rng(seed).normal(size=x0.shape)
    _check_unary(ad.log, np.log, x0, w)


@settings(max_examples=40, deadline=None)
@given(r=st.integers(1, 4), c=st.integers(1, 4), k=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_matmul_and_linear_gradients(r, c, k, seed):
    rng = np.random.default_rng(seed)
    A0, B0, b0, w = rng.normal(size=(r, c)), rng.normal(size=(k, c)), rng.normal(size=k), rng.normal(size=(r, k))
    A, B, b = param(A0), param(B0), param(b0)
    ad.backward(ad.sum(ad.linear(A, B, b) * Tensor(w)))
    ref = lambda a, bb, bias: float(np.sum((a @ bb.T + bias) * w))  # noqa: E731
    assert rel_err(A.grad, numeric_grad(lambda v: ref(v, B0, b0), A0)) < 1e-5
    assert rel_err(B.grad, numeric_grad(lambda v: ref(A0, v, b0), B0)) < 1e-5
    assert rel_err(b.grad, numeric_grad(lambda v: ref(A0, B0, v), b0)) < 1e-5
    C0 = rng.normal(size=(c, k))
    A, C = param(A0), param(C0)
    ad.backward(ad.sum(ad.matmul(A, C) * Tensor(w)))
    assert rel_err(C.grad, numeric_grad(lambda v: float(np.sum((A0 @ v) * w)), C0)) < 1e-5


@settings(max_examples=40, deadline=None)
@given(a0=vectors, seed=st.integers(0, 2**16))
def test_binary_broadcast_gradients(a0, seed):
    rng = np.random.default_rng(seed)
    b0, w = rng.normal(size=(3, 1)), rng.normal(size=(3, a0.size))
    for op, ref in ((ad.add, np.add), (ad.sub, np.subtract), (ad.mul, np.multiply)):
        a, b = param(a0), param(b0)
        ad.backward(ad.sum(op(a, b) * Tensor(w)))
        assert rel_err(a.grad, numeric_grad(lambda v: float(np.sum(ref(v, b0) * w)), a0)) < 1e-5
        assert rel_err(b.grad, numeric_grad(lambda v: float(np.sum(ref(a0, v) * w)), b0)) < 1e-5


@settings(max_examples=40, deadline=None)
@given(x0=vectors)
def test_softmax_is_a_distribution(x0):
    p = ad.softmax(Tensor(x0)).data
    assert np.all(p > 0)
    assert np.all(p < 1) or p.size == 1
    assert abs(p.sum() - 1.0) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), segs=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_segment_gradients(n, segs, seed):
    rng = np.random.default_rng(seed)
    x0, ids, w = rng.normal(size=(n, 3)), rng.integers(0, segs, size=n), rng.normal(size=(segs, 3))

    def ref_sum(v):
        out = np.zeros((segs, 3))
        np.add.at(out, ids, v)
        return float(np.sum(out * w))

    def ref_max(v):
        out = np.zeros((segs, 3))
        for s in range(segs):
            rows = v[ids == s]
            if len(rows):
                out[s] = rows.max(axis=0)
        return float(np.sum(out * w))

    x = param(x0)
    ad.backward(ad.sum(ad.segment_sum(x, ids, segs) * Tensor(w)))
    assert rel_err(x.grad, numeric_grad(ref_sum, x0)) < 1e-5
    x = param(x0)
    ad.backward(ad.sum(ad.segment_max(x, ids, segs) * Tensor(w)))
    assert rel_err(x.grad, numeric_grad(ref_max, x0)) < 1e-5
