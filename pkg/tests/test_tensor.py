import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saltseg import tensor as T
from saltseg.errors import DimensionError


def param(a):
    return T.Tensor(np.array(a, dtype=float), requires_grad=True)


def loop_conv(x, w, b, stride, pad, groups):
    """Direct nested-loop convolution used as an oracle."""
    n, c, h, wd = x.shape
    cout, cg, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    og = cout // groups
    for i in range(n):
        for o in range(cout):
            grp = o // og
            for y in range(ho):
                for x_ in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(cg):
                        for ky in range(k):
                            for kx in range(k):
                                acc += w[o, ci, ky, kx] * xp[i, grp * cg + ci, y * stride + ky, x_ * stride + kx]
                    out[i, o, y, x_] = acc
    return out


# -- conv2d ---------------------------------------------------------------------

def test_conv_scalar_scaling():
    out = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.full((1, 1, 1, 1), 2.0)))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_grouped_identity():
    x = np.random.default_rng(0).normal(size=(1, 2, 2, 2))
    out = T.conv2d(T.Tensor(x), T.Tensor(np.ones((2, 1, 1, 1))), groups=2)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad,groups,cin,cout,k", [
    (1, 1, 1, 2, 3, 3),
    (2, 1, 1, 3, 2, 3),
    (1, 0, 2, 4, 6, 3),
    (1, 2, 4, 4, 4, 5),
    (1, 0, 1, 3, 5, 1),
])
def test_conv_matches_loop_oracle(stride, pad, groups, cin, cout, k):
    rng = np.random.default_rng(stride * 100 + pad * 10 + groups)
    x = rng.uniform(-2, 2, size=(2, cin, 5, 5))
    w = rng.uniform(-2, 2, size=(cout, cin // groups, k, k))
    b = rng.uniform(-1, 1, size=cout)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=pad, groups=groups).data
    np.testing.assert_allclose(got, loop_conv(x, w, b, stride, pad, groups), rtol=1e-12, atol=1e-12)


def test_conv_groups1_is_sum_of_single_channel_convs():
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, size=(1, 3, 5, 5))
    w = rng.uniform(-2, 2, size=(2, 3, 3, 3))
    full = T.conv2d(T.Tensor(x), T.Tensor(w), padding=1).data
    parts = sum(loop_conv(x[:, c:c + 1], w[:, c:c + 1], None, 1, 1, 1) for c in range(3))
    np.testing.assert_allclose(full, parts, rtol=1e-12, atol=1e-12)


def test_conv_gradcheck():
    rng = np.random.default_rng(1)
    x = param(rng.uniform(-2, 2, size=(1, 2, 5, 5)))
    w = param(rng.uniform(-2, 2, size=(3, 2, 3, 3)))
    b = param(rng.uniform(-2, 2, size=3))
    proj = rng.normal(size=(1, 3, 5, 5))
    err = T.gradcheck(lambda: T.sum(T.conv2d(x, w, b, padding=1) * T.Tensor(proj)), [x, w, b])
    assert err < 1e-6


def test_conv_grouped_strided_gradcheck():
    rng = np.random.default_rng(2)
    x = param(rng.uniform(-2, 2, size=(2, 4, 6, 6)))
    w = param(rng.uniform(-2, 2, size=(4, 2, 3, 3)))
    proj = rng.normal(size=(2, 4, 3, 3))
    err = T.gradcheck(lambda: T.sum(T.conv2d(x, w, stride=2, padding=1, groups=2) * T.Tensor(proj)), [x, w])
    assert err < 1e-6


def test_conv_dimension_errors():
    with pytest.raises(DimensionError, match="axis 1"):
        T.conv2d(T.Tensor(np.ones((1, 3, 4, 4))), T.Tensor(np.ones((2, 2, 3, 3))))
    with pytest.raises(DimensionError, match="groups"):
        T.conv2d(T.Tensor(np.ones((1, 3, 4, 4))), T.Tensor(np.ones((2, 1, 3, 3))), groups=2)
    with pytest.raises(DimensionError, match="odd"):
        T.conv2d(T.Tensor(np.ones((1, 1, 4, 4))), T.Tensor(np.ones((1, 1, 2, 2))))


# -- pointwise / reductions ------------------------------------------------------

def test_sigmoid_zero():
    assert T.sigmoid(T.Tensor(np.zeros(1))).data[0] == 0.5


def test_sigmoid_extremes_finite():
    s = T.sigmoid(T.Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0


def test_concat_shape():
    out = T.concat([T.Tensor(np.zeros((1, 2, 2, 2))), T.Tensor(np.zeros((1, 3, 2, 2)))], axis=1)
    assert out.shape == (1, 5, 2, 2)


def test_concat_mismatch():
    with pytest.raises(DimensionError, match="axis 2"):
        T.concat([T.Tensor(np.zeros((1, 2, 2, 2))), T.Tensor(np.zeros((1, 3, 3, 2)))], axis=1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_concat_split_roundtrip(sizes, seed):
    rng = np.random.default_rng(seed)
    parts = [rng.normal(size=(2, s, 3, 3)) for s in sizes]
    back = T.split(T.concat([T.Tensor(p) for p in parts], axis=1), sizes, axis=1)
    for a, b in zip(parts, back):
        assert np.array_equal(a, b.data)


def test_mean_gradient():
    x = param(np.arange(8.0))
    T.backward(T.mean(x))
    np.testing.assert_array_equal(x.grad, np.full(8, 1 / 8))


def test_pointwise_gradcheck():
    rng = np.random.default_rng(4)
    a = param(rng.uniform(-2, 2, size=(2, 3, 4, 4)))
    gate_c = param(rng.uniform(-2, 2, size=(2, 3, 1, 1)))
    gate_s = param(rng.uniform(-2, 2, size=(2, 1, 4, 4)))
    w = param(rng.uniform(-1, 1, size=(5, 3)))
    b = param(rng.uniform(-1, 1, size=5))

    def f():
        y = a * T.sigmoid(gate_c) + T.mul(a, T.sigmoid(gate_s))
        y = T.relu(y) * 1.5 - a
        pooled = T.global_avg_pool(y)
        return T.mean(T.sigmoid(T.dense(pooled, w, b))) + T.sum(T.crop(y, 1, 1, 2, 3)) * 0.1

    assert T.gradcheck(f, [a, gate_c, gate_s, w, b]) < 1e-5


def test_concat_gradcheck():
    rng = np.random.default_rng(5)
    a = param(rng.normal(size=(1, 2, 3, 3)))
    b = param(rng.normal(size=(1, 1, 3, 3)))
    proj = rng.normal(size=(1, 3, 3, 3))
    assert T.gradcheck(lambda: T.sum(T.concat([a, b]) * T.Tensor(proj)), [a, b]) < 1e-6


# -- maxpool -----------------------------------------------------------------------

def test_maxpool_basic():
    out = T.maxpool2d(T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 1)
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_maxpool_ties_route_to_first_index():
    x = param(np.full((1, 1, 4, 4), 3.0))
    out = T.maxpool2d(x, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))
    T.backward(T.sum(out))
    expected = np.zeros((4, 4))
    expected[0, 0] = expected[0, 2] = expected[2, 0] = expected[2, 2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)


def test_maxpool_gradcheck():
    x = param(np.random.default_rng(6).uniform(-2, 2, size=(1, 1, 6, 6)))
    proj = np.random.default_rng(7).normal(size=(1, 1, 3, 3))
    assert T.gradcheck(lambda: T.sum(T.maxpool2d(x, 2, 2) * T.Tensor(proj)), [x]) < 1e-6


def test_maxpool_padded_same_size():
    x = np.random.default_rng(8).normal(size=(1, 2, 5, 5))
    out = T.maxpool2d(T.Tensor(x), 3, 1, padding=1).data
    assert out.shape == x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    ref = np.array([[[[xp[0, c, i:i + 3, j:j + 3].max() for j in range(5)] for i in range(5)] for c in range(2)]])
    np.testing.assert_array_equal(out, ref)


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        T.maxpool2d(T.Tensor(np.zeros((1, 1, 2, 2))), 3, 1)


# -- bilinear upsample -----------------------------------------------------------

def test_upsample_identity():
    x = np.random.default_rng(9).normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(T.bilinear_upsample(T.Tensor(x), 1).data, x)


@pytest.mark.parametrize("factor", [2, 3, 8])
def test_upsample_constant(factor):
    out = T.bilinear_upsample(T.Tensor(np.full((1, 1, 3, 2), 0.7)), factor).data
    assert out.shape == (1, 1, 3 * factor, 2 * factor)
    np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-15)


def test_upsample_hand_values():
    # align-corners-false: sample points (i + 0.5)/2 - 0.5 clamped at 0, i.e.
    # weights along each axis give [0, .25, .75, 1] of the way from index 0 to 1.
    # Input value is 2*row + col, which is linear, so out = 2*R_i + C_j.
    r = np.array([0.0, 0.25, 0.75, 1.0])
    expected = 2 * r[:, None] + r[None, :]
    out = T.bilinear_upsample(T.Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]])), 2).data
    np.testing.assert_allclose(out[0, 0], expected, atol=1e-15)


def test_upsample_gradcheck():
    x = param(np.random.default_rng(10).normal(size=(1, 2, 3, 3)))
    proj = np.random.default_rng(11).normal(size=(1, 2, 6, 6))
    assert T.gradcheck(lambda: T.sum(T.bilinear_upsample(x, 2) * T.Tensor(proj)), [x]) < 1e-6


def test_upsample_bad_factor():
    with pytest.raises(ValueError):
        T.bilinear_upsample(T.Tensor(np.zeros((1, 1, 2, 2))), 0)


# -- batchnorm -----------------------------------------------------------------------

def test_batchnorm_train_normalizes():
    x = np.random.default_rng(12).normal(3.0, 2.0, size=(4, 3, 5, 5))
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batchnorm2d(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), rm, rv, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-5)
    mu = x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(rm, 0.1 * mu)


def test_batchnorm_eval_identity():
    x = np.random.default_rng(13).normal(size=(2, 3, 4, 4))
    out = T.batchnorm2d(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)),
                        np.zeros(3), np.ones(3), training=False).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-15)
    np.testing.assert_allclose(out, x, rtol=1e-5)


def test_batchnorm_gradcheck():
    rng = np.random.default_rng(14)
    x = param(rng.uniform(-2, 2, size=(2, 3, 4, 4)))
    g = param(rng.uniform(0.5, 2, size=3))
    b = param(rng.uniform(-1, 1, size=3))
    proj = rng.normal(size=(2, 3, 4, 4))
    rm, rv = np.zeros(3), np.ones(3)
    err = T.gradcheck(lambda: T.sum(T.batchnorm2d(x, g, b, rm, rv, training=True) * T.Tensor(proj)), [x, g, b])
    assert err < 1e-5


def test_batchnorm_channel_mismatch():
    with pytest.raises(DimensionError, match="gamma"):
        T.batchnorm2d(T.Tensor(np.zeros((1, 3, 2, 2))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(3)),
                      np.zeros(3), np.ones(3), training=True)


# -- backward --------------------------------------------------------------------------

def test_backward_linear():
    x = np.array([1.0, -2.0, 3.0])
    w = param(np.array([0.5, 0.5, 0.5]))
    T.backward(T.sum(w * T.Tensor(x)))
    np.testing.assert_array_equal(w.grad, x)


def test_backward_accumulates_two_paths():
    w = param(np.array([2.0, 3.0]))
    T.backward(T.sum(w * w + w))
    np.testing.assert_array_equal(w.grad, 2 * w.data + 1)


def test_backward_twice_is_error():
    w = param(np.ones(2))
    loss = T.sum(w * 2.0)
    T.backward(loss)
    with pytest.raises(RuntimeError):
        T.backward(loss)


def test_backward_non_scalar():
    with pytest.raises(ValueError):
        T.backward(param(np.ones(3)) * 2.0)


def test_composite_gradcheck():
    rng = np.random.default_rng(15)
    x = param(rng.uniform(-2, 2, size=(1, 2, 5, 5)))
    w = param(rng.uniform(-1, 1, size=(3, 2, 3, 3)))
    assert T.gradcheck(lambda: T.mean(T.relu(T.conv2d(x, w, padding=1))), [x, w]) < 1e-6


def test_no_grad_builds_no_tape():
    w = param(np.ones(2))
    with T.no_grad():
        out = w * 2.0
    assert not out.requires_grad


def test_rank_limit():
    with pytest.raises(DimensionError):
        T.Tensor(np.zeros((1, 1, 1, 1, 1)))
