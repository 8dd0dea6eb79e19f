import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cawcl import diffcore as dc
from cawcl.diffcore import NearZeroNorm, NonFiniteLoss, Tensor

mpmath.mp.dps = 50

finite = st.floats(-50, 50, allow_nan=False)


def test_l2_normalize_examples():
    np.testing.assert_allclose(dc.l2_normalize([3, 4]), [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(dc.l2_normalize([1, 0, 0]), [1, 0, 0])
    with pytest.raises(NearZeroNorm):
        dc.l2_normalize([0, 0])


@given(st.lists(finite, min_size=2, max_size=8), st.floats(1e-3, 1e3))
def test_l2_normalize_unit_and_scale_invariant(v, c):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-6:
        return
    u = dc.l2_normalize(v)
    assert abs(np.linalg.norm(u) - 1.0) < 1e-9
    np.testing.assert_allclose(dc.l2_normalize(c * v), u, atol=1e-9)


def test_log_softmax_examples():
    ln2 = math.log(2)
    np.testing.assert_allclose(dc.log_softmax([0.0, 0.0]), [-ln2, -ln2], rtol=0, atol=1e-15)
    np.testing.assert_allclose(dc.log_softmax([1000.0, 1000.0]), [-ln2, -ln2], rtol=0, atol=1e-15)
    x = [1, 2, 3]
    lse = mpmath.log(sum(mpmath.e ** v for v in x))
    oracle = [float(v - lse) for v in x]
    np.testing.assert_allclose(dc.log_softmax(x), oracle, rtol=0, atol=1e-15)


@given(st.lists(finite, min_size=1, max_size=8), st.floats(-1e3, 1e3))
def test_log_softmax_normalised_and_shift_invariant(x, c):
    y = dc.log_softmax(x)
    assert abs(np.exp(y).sum() - 1.0) < 1e-9
    # shifting by c changes the max-shifted logits only by rounding
    np.testing.assert_allclose(dc.log_softmax(np.array(x) + c), y, atol=1e-12 * max(1.0, abs(c)))


def test_log_softmax_shift_exact_for_representable_shifts():
    x = np.array([0.5, -1.25, 3.0])
    np.testing.assert_array_equal(dc.log_softmax(x + 8.0), dc.log_softmax(x))


def test_masked_log_softmax_matches_subset():
    x = np.array([[0.3, -1.0, 2.0, 0.1]])
    mask = np.array([[True, False, True, True]])
    y = dc.log_softmax_rows(Tensor(x), mask).data
    sub = dc.log_softmax(x[0, [0, 2, 3]])
    np.testing.assert_allclose(y[0, [0, 2, 3]], sub, atol=1e-15)
    assert y[0, 1] == 0.0


def test_grad_check_quadratic():
    x = Tensor(3.0, requires_grad=True)
    assert dc.grad_check(lambda: dc.mul(x, x), [x], eps=1e-5) < 1e-8


def test_grad_check_rejects_bad_eps():
    x = Tensor(1.0, requires_grad=True)
    with pytest.raises(ValueError):
        dc.grad_check(lambda: x, [x], eps=0.1)


def test_grad_check_non_finite():
    x = Tensor(0.0, requires_grad=True)
    with pytest.raises(NonFiniteLoss):
        dc.grad_check(lambda: Tensor(np.log(x.data)), [x], eps=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    bias = Tensor(rng.normal(size=(1, 5)), requires_grad=True)
    labels = rng.integers(0, 5, size=2)
    mask = rng.random((2, 5)) < 0.7
    mask[:, 0] = True

    def f():
        h = dc.tanh(dc.add(dc.matmul(a, b), bias))
        g = dc.group_mean(h, [1, 3])
        n = dc.l2_normalize_rows(g)
        ls = dc.log_softmax_rows(dc.scale(n, 3.0), mask)
        w = Tensor(rng_w)
        return dc.add(dc.total(dc.mul(ls, w)), dc.total(dc.pick(ls, labels)))

    rng_w = np.random.default_rng(seed + 100).random((2, 5))
    assert dc.grad_check(f, [a, b, bias], eps=1e-5) < 1e-5


def test_grl_identity_forward_negated_backward():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    y = dc.grl(x, 1.0)
    np.testing.assert_array_equal(y.data, [[1.0, 2.0]])
    y.backward(np.ones((1, 2)))
    np.testing.assert_array_equal(x.grad, [[-1.0, -1.0]])


def test_backward_accumulates_over_shared_nodes():
    x = Tensor(2.0, requires_grad=True)
    y = dc.mul(x, x)
    z = dc.add(y, y)
    z.backward()
    assert x.grad[0, 0] == 8.0


def test_detached_tensor_gets_no_gradient():
    k = Tensor([[1.0, 2.0]], requires_grad=True)
    x = Tensor([[0.5, 0.5]], requires_grad=True)
    out = dc.total(dc.mul(x, k.detach()))
    out.backward()
    assert np.all(k.grad == 0)
    np.testing.assert_array_equal(x.grad, [[1.0, 2.0]])


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(1, 4))
def test_group_mean_matches_numpy(n, d):
    rng = np.random.default_rng(n * 10 + d)
    sizes = rng.integers(1, 4, size=n)
    x = rng.normal(size=(sizes.sum(), d))
    out = dc.group_mean(Tensor(x), sizes).data
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    expected = np.stack([x[s:s + k].mean(axis=0) for s, k in zip(starts, sizes)])
    np.testing.assert_allclose(out, expected, atol=1e-14)
