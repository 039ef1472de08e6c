import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capskit.tensor import (
    ConvSpec,
    ShapeError,
    ShiftSpec,
    activation,
    conv2d,
    conv2d_backward,
    global_avg_pool,
    pad,
    shift2d,
)


def conv_oracle(x, kernel, bias, mode="circular"):
    """Nested-loop same-size cross-correlation with explicit index wrapping."""
    b, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    top, left = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((b, o, h, w))
    for bi in range(b):
        for oc in range(o):
            for r in range(h):
                for q in range(w):
                    acc = bias[oc]
                    for i in range(kh):
                        for j in range(kw):
                            rr, qq = r + i - top, q + j - left
                            if mode == "circular":
                                rr, qq = rr % h, qq % w
                            elif not (0 <= rr < h and 0 <= qq < w):
                                continue
                            for ic in range(c):
                                acc += kernel[oc, ic, i, j] * x[bi, ic, rr, qq]
                    out[bi, oc, r, q] = acc
    return out


def test_conv_scaling_identity():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = conv2d(x, ConvSpec(np.full((1, 1, 1, 1), 2.0), np.zeros(1)))
    np.testing.assert_array_equal(out[0, 0], [[2, 4], [6, 8]])


def test_conv_circular_constant_field():
    out = conv2d(np.ones((1, 1, 3, 3)), ConvSpec(np.ones((1, 1, 3, 3)), np.zeros(1)))
    np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 9.0))


@pytest.mark.parametrize("mode", ["circular", "zero"])
def test_conv_matches_nested_loops(mode):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    out = conv2d(x, ConvSpec(k, bias, pad_mode=mode))
    np.testing.assert_allclose(out, conv_oracle(x, k, bias, mode), atol=1e-12)


def test_conv_matches_oracle_at_largest_size():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 4, 8, 8))
    k = rng.standard_normal((3, 4, 3, 3))
    bias = rng.standard_normal(3)
    np.testing.assert_allclose(conv2d(x, ConvSpec(k, bias)), conv_oracle(x, k, bias), atol=1e-12)


def test_conv_even_kernel_and_stride():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 1, 6, 6))
    k = rng.standard_normal((2, 1, 2, 2))
    full = conv2d(x, ConvSpec(k, np.zeros(2)))
    np.testing.assert_allclose(full, conv_oracle(x, k, np.zeros(2)), atol=1e-12)
    strided = conv2d(x, ConvSpec(k, np.zeros(2), stride=2))
    assert strided.shape == (1, 2, 3, 3)
    np.testing.assert_array_equal(strided, full[:, :, ::2, ::2])


def test_conv_errors():
    x = np.zeros((1, 2, 4, 4))
    with pytest.raises(ShapeError):
        conv2d(x, ConvSpec(np.zeros((1, 3, 3, 3)), np.zeros(1)))
    with pytest.raises(ShapeError):
        conv2d(np.zeros((1, 1, 5, 5)), ConvSpec(np.zeros((1, 1, 3, 3)), np.zeros(1),
                                                 stride=2, pad_mode="zero"))


@settings(max_examples=25, deadline=None)
@given(sx=st.integers(-9, 9), sy=st.integers(-9, 9), seed=st.integers(0, 2**16))
def test_conv_commutes_with_circular_shift(sx, sy, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 3, 6, 8))
    spec = ConvSpec(rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2))
    s = ShiftSpec(sx, sy)
    np.testing.assert_allclose(conv2d(shift2d(x, s), spec), shift2d(conv2d(x, spec), s), atol=1e-12)


@pytest.mark.parametrize("mode", ["circular", "zero"])
@pytest.mark.parametrize("ksize", [1, 2, 3])
def test_conv_backward_finite_differences(mode, ksize):
    rng = np.random.default_rng(ksize)
    x = rng.standard_normal((2, 2, 4, 6))
    spec = ConvSpec(rng.standard_normal((3, 2, ksize, ksize)), rng.standard_normal(3), pad_mode=mode)
    g = rng.standard_normal((2, 3, 4, 6))
    gx, gk, gb = conv2d_backward(x, spec, g)

    def f(xx, kk, bb):
        return np.sum(conv2d(xx, ConvSpec(kk, bb, pad_mode=mode)) * g)

    eps = 1e-6
    for arr, grad, name in ((x, gx, "x"), (spec.kernel, gk, "k"), (spec.bias, gb, "b")):
        flat = arr.reshape(-1)
        for idx in range(0, flat.size, max(1, flat.size // 10)):
            args = [x.copy(), spec.kernel.copy(), spec.bias.copy()]
            target = {"x": 0, "k": 1, "b": 2}[name]
            args[target].reshape(-1)[idx] += eps
            up = f(*args)
            args[target].reshape(-1)[idx] -= 2 * eps
            down = f(*args)
            assert (up - down) / (2 * eps) == pytest.approx(grad.reshape(-1)[idx], abs=1e-6)


def test_conv_single_layer_gradient_is_correlation():
    # d/dK sum(conv(x, K) * g) = sum_pixels g * shifted x
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 1, 5, 5))
    g = rng.standard_normal((1, 1, 5, 5))
    _, gk, _ = conv2d_backward(x, ConvSpec(np.zeros((1, 1, 3, 3)), np.zeros(1)), g)
    for i in range(3):
        for j in range(3):
            shifted = np.roll(x, (1 - i, 1 - j), axis=(2, 3))
            assert gk[0, 0, i, j] == pytest.approx(np.sum(g * shifted), abs=1e-12)


def test_global_avg_pool():
    assert global_avg_pool(np.full((2, 3, 4, 4), 1.5)).tolist() == [[1.5] * 3] * 2
    assert global_avg_pool(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))[0, 0] == 2.5
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4, 4))
    out = global_avg_pool(x)
    for b in range(2):
        for c in range(3):
            total = 0.0
            for r in range(4):
                for q in range(4):
                    total += x[b, c, r, q]
            assert out[b, c] == pytest.approx(total / 16, abs=1e-14)


def test_shift_examples():
    row = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)
    np.testing.assert_array_equal(shift2d(row, ShiftSpec(0, 1))[0, 0, 0], [4, 1, 2, 3])
    np.testing.assert_array_equal(shift2d(row, ShiftSpec(0, 1, "common"), 0.0)[0, 0, 0], [0, 1, 2, 3])
    np.testing.assert_array_equal(shift2d(row, ShiftSpec(0, -1, "common"), 7.0)[0, 0, 0], [2, 3, 4, 7])
    x = np.arange(12.0).reshape(1, 1, 3, 4)
    np.testing.assert_array_equal(shift2d(x, ShiftSpec(3, 4)), x)


def test_common_shift_out_of_range():
    with pytest.raises(ValueError):
        shift2d(np.zeros((1, 1, 3, 3)), ShiftSpec(3, 0, "common"))


@settings(max_examples=30, deadline=None)
@given(sx=st.integers(-20, 20), sy=st.integers(-20, 20))
def test_shift_inverse(sx, sy):
    x = np.arange(30.0).reshape(1, 1, 5, 6)
    back = shift2d(shift2d(x, ShiftSpec(sx, sy)), ShiftSpec(-sx, -sy))
    np.testing.assert_array_equal(back, x)


def test_activation():
    np.testing.assert_array_equal(activation(np.array([-1.0, 0.0, 2.0]), "relu"), [0, 0, 2])
    assert activation(np.array(0.0), "sigmoid") == 0.5
    rng = np.random.default_rng(1)
    x = rng.uniform(-50, 50, size=1000)
    np.testing.assert_allclose(activation(x, "sigmoid") + activation(-x, "sigmoid"), 1.0, atol=1e-12)
    big = activation(np.array([-1000.0, 1000.0]), "sigmoid")
    assert np.all(np.isfinite(big)) and big[0] < 1e-300 and big[1] == 1.0


def test_pad():
    out = pad(np.array([[[[5.0]]]]), 1, "zero")[0, 0]
    np.testing.assert_array_equal(out, [[0, 0, 0], [0, 5, 0], [0, 0, 0]])
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = pad(x, 1, "circular")[0, 0]
    # index-wrap oracle
    expect = np.array([[x[0, 0, (r - 1) % 2, (c - 1) % 2] for c in range(4)] for r in range(4)])
    np.testing.assert_array_equal(out, expect)
    assert (out[0, 0], out[0, 3], out[3, 0], out[3, 3]) == (4, 3, 2, 1)
    np.testing.assert_array_equal(pad(x, 0, "circular"), x)
    with pytest.raises(ValueError):
        pad(x, 3, "circular")
