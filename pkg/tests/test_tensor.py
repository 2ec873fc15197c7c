import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from ticketlab.tensor import (DimensionError, NonFiniteError, add, as_tensor, conv2d,
                              conv2d_backward, exp, kaiming_init, l2norm, log, logsumexp,
                              make_rng, matmul, mean, mul, relu, softmax)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    assert_array_equal(matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]]), [[3, 4], [5, 6]])


def test_matmul_hand_dot():
    assert_array_equal(matmul([[1, 2]], [[3], [4]]), [[11]])


def test_matmul_zero():
    b = np.random.default_rng(0).normal(size=(4, 5))
    assert_array_equal(matmul(np.zeros((3, 4)), b), np.zeros((3, 5)))


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        matmul(np.ones(3), np.ones((3, 1)))


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite),
       arrays(np.float64, (2, 5), elements=finite))
def test_matmul_associative(a, b, c):
    assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-9, atol=1e-7)


def test_conv_scalar_kernel():
    out = conv2d(np.ones((1, 1, 3, 3)), np.full((1, 1, 1, 1), 2.0))
    assert_array_equal(out, np.full((1, 1, 3, 3), 2.0))


def test_conv_sum_oracle():
    x = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
    out = conv2d(x, np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 45.0


def test_conv_zero_kernel():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    assert_array_equal(conv2d(x, np.zeros((4, 3, 3, 3)), 1, 1), np.zeros((2, 4, 5, 5)))


def test_conv_is_cross_correlation():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 0] = 1.0
    w = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    # with pad 1 the output at (1,1) sees x[0,0] under kernel tap (0,0), no flip
    assert conv2d(x, w, 1, 1)[0, 0, 1, 1] == w[0, 0, 0, 0]
    assert conv2d(x, w, 1, 1)[0, 0, 0, 0] == w[0, 0, 1, 1]


def _conv_loop(x, w, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, h, wd = xp.shape
    o, _, k, _ = w.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, oc, i, j] = np.sum(patch * w[oc])
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    assert_allclose(conv2d(x, w, stride, pad), _conv_loop(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_backward_finite_difference(stride, pad):
    rng = np.random.default_rng(7)
    x, w = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3, 3, 3))
    r = rng.normal(size=conv2d(x, w, stride, pad).shape)
    dx, dw = conv2d_backward(x, w, r, stride, pad)
    eps = 1e-5
    for arr, grad in ((x, dx), (w, dw)):
        for flat in rng.choice(arr.size, 20, replace=False):
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            arr[idx] = old + eps
            up = np.sum(conv2d(x, w, stride, pad) * r)
            arr[idx] = old - eps
            down = np.sum(conv2d(x, w, stride, pad) * r)
            arr[idx] = old
            num = (up - down) / (2 * eps)
            assert abs(grad[idx] - num) / max(1.0, abs(num)) < 1e-6


def test_add_mul_examples():
    assert_array_equal(add([1, 2], [0, 0]), [1, 2])
    assert_array_equal(add([1.5, -2], [2.5, 4]), [4.0, 2.0])
    assert_array_equal(mul([3, 4], [1, 1]), [3, 4])
    assert_array_equal(mul([3, -4], [2, 0.5]), [6, -2])


def test_relu_examples():
    assert_array_equal(relu([0.0, 0.0]), [0.0, 0.0])
    assert_array_equal(relu([-1.5, 2.0, 0.0]), [0.0, 2.0, 0.0])


def test_exp_log_examples():
    assert exp(0.0) == 1.0
    assert_allclose(exp(np.log(7.0)), 7.0)
    assert log(1.0) == 0.0
    assert_allclose(log(math.e ** 3), 3.0)
    with pytest.raises(NonFiniteError):
        log([1.0, 0.0])


def test_softmax_examples():
    assert_allclose(softmax(np.zeros(4)), np.full(4, 0.25))
    # hand: e^0/(e^0+e^ln3) = 1/4
    assert_allclose(softmax([0.0, math.log(3.0)]), [0.25, 0.75])


def test_softmax_shift_invariant_and_stable():
    x = np.array([[1000.0, 1001.0], [-5.0, 3.0]])
    assert_allclose(softmax(x), softmax(x - 500.0))
    assert np.all(np.isfinite(softmax(x)))


def test_logsumexp_examples():
    assert_allclose(logsumexp(np.zeros(3)), math.log(3))
    assert_allclose(logsumexp([1000.0, 1000.0]), 1000.0 + math.log(2))


def test_mean_l2norm_examples():
    assert mean([2.0, 2.0, 2.0]) == 2.0
    assert mean([1.0, 2.0, 6.0]) == 3.0
    assert l2norm(np.zeros(3)) == 0.0
    assert l2norm([3.0, 4.0]) == 5.0


@given(arrays(np.float64, (5,), elements=finite))
def test_softmax_sums_to_one(x):
    assert_allclose(softmax(x).sum(), 1.0)


@given(arrays(np.float64, (6,), elements=finite), arrays(np.float64, (6,), elements=finite))
def test_add_mul_commute(a, b):
    assert_array_equal(add(a, b), add(b, a))
    assert_array_equal(mul(a, b), mul(b, a))


def test_as_tensor_rejects_nan():
    with pytest.raises(NonFiniteError):
        as_tensor([1.0, np.nan])


def test_kaiming_deterministic():
    a = kaiming_init((8, 4, 3, 3), make_rng(5))
    b = kaiming_init((8, 4, 3, 3), make_rng(5))
    assert a.tobytes() == b.tobytes()


def test_kaiming_seeds_differ():
    assert not np.array_equal(kaiming_init((8, 8), make_rng(1)), kaiming_init((8, 8), make_rng(2)))


def test_kaiming_variance():
    # fan_in = 8 -> variance 2/8
    w = kaiming_init((1_000_000 // 8, 8), make_rng(0))
    assert abs(w.var() - 0.25) / 0.25 < 0.02


def test_kaiming_bad_shape():
    with pytest.raises(DimensionError):
        kaiming_init((0, 3), make_rng(0))


def test_make_rng_streams():
    assert make_rng(1, "a").random() == make_rng(1, "a").random()
    assert make_rng(1, "a").random() != make_rng(1, "b").random()
    assert make_rng(1).random() != make_rng(2).random()
