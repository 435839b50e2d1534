import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tafe import tensor as T
from tafe.bench import compose_strips
from tafe.errors import ConfigError, ShapeError


def naive_conv(x, w, b=None, pad=(0, 0), stride=1):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad[0], wd + 2 * pad[1]))
    xp[:, :, pad[0]:pad[0] + h, pad[1]:pad[1] + wd] = x
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for s in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[s, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[s, f, i, j] = np.sum(patch * w[f])
            if b is not None:
                out[s, f] += b[f]
    return out


CASES = [
    # (n, c, h, w, o, kh, kw, padding, stride)
    (1, 1, 5, 5, 1, 3, 3, "same", 1),
    (2, 3, 6, 7, 4, 3, 3, "same", 1),
    (1, 2, 8, 8, 3, 5, 5, "same", 1),
    (2, 2, 7, 9, 2, 1, 7, "same", 1),
    (1, 3, 9, 6, 2, 7, 1, "same", 1),
    (1, 2, 6, 6, 2, 3, 3, "valid", 1),
    (2, 1, 8, 5, 3, 2, 3, "valid", 1),
    (1, 2, 8, 8, 2, 3, 3, "same", 2),
    (2, 3, 9, 7, 2, 3, 3, "same", 2),
    (1, 1, 10, 10, 1, 5, 5, "valid", 2),
    (1, 4, 4, 4, 4, 1, 1, "same", 1),
    (3, 2, 5, 8, 2, 1, 3, "same", 1),
    (1, 2, 11, 4, 3, 5, 1, "same", 1),
    (2, 2, 6, 6, 5, 3, 3, "same", 1),
    (1, 3, 7, 7, 1, 7, 7, "same", 1),
    (1, 1, 3, 3, 1, 3, 3, "valid", 1),
    (1, 2, 16, 16, 2, 3, 3, "same", 2),
    (2, 2, 5, 5, 2, 5, 5, "same", 1),
    (1, 3, 12, 9, 2, 1, 5, "same", 1),
    (1, 1, 9, 12, 2, 5, 1, "same", 1),
    (2, 3, 8, 8, 2, 3, 1, "valid", 1),
]


@pytest.mark.parametrize("n,c,h,w,o,kh,kw,padding,stride", CASES)
def test_conv2d_matches_sliding_window_oracle(n, c, h, w, o, kh, kw, padding, stride):
    rng = np.random.default_rng(h * 100 + w * 10 + kh + kw)
    x = rng.standard_normal((n, c, h, w))
    weight = rng.standard_normal((o, c, kh, kw))
    bias = rng.standard_normal(o)
    pad = ((kh - 1) // 2, (kw - 1) // 2) if padding == "same" else (0, 0)

    got = T.conv2d_raw(x, weight, bias, padding=padding, stride=stride)
    expected = naive_conv(x, weight, bias, pad, stride)

    assert got.shape == expected.shape
    assert np.max(np.abs(got - expected)) < 1e-12


def test_identity_kernel_is_a_fixed_point(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d_raw(x, delta), x)


def test_all_ones_kernel_sums_neighbourhoods():
    x = np.ones((1, 1, 3, 3))
    out = T.conv2d_raw(x, np.ones((1, 1, 3, 3)))
    assert out[0, 0, 1, 1] == 9.0
    assert out[0, 0, 0, 0] == 4.0
    assert out[0, 0, 0, 1] == 6.0


@pytest.mark.parametrize("k", [3, 5, 7])
@pytest.mark.parametrize("seed", range(10))
def test_cascaded_strips_equal_dense_outer_product(k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 3, 12, 10))
    row = rng.standard_normal((3, 3, 1, k))
    col = rng.standard_normal((3, 3, k, 1))

    cascade = T.conv2d_raw(T.conv2d_raw(x, row), col)
    dense = T.conv2d_raw(x, compose_strips(row, col))

    assert np.max(np.abs(cascade - dense)) < 1e-10


def test_single_channel_composition_is_outer_product(rng):
    r = rng.standard_normal(5)
    c = rng.standard_normal(5)
    dense = compose_strips(r.reshape(1, 1, 1, 5), c.reshape(1, 1, 5, 1))
    np.testing.assert_allclose(dense[0, 0], np.outer(c, r), rtol=0, atol=1e-15)


def test_even_kernel_with_same_padding_is_rejected(rng):
    with pytest.raises(ConfigError):
        T.conv2d_raw(rng.standard_normal((1, 1, 5, 5)), np.ones((1, 1, 2, 2)))


def test_channel_mismatch_is_a_shape_error(rng):
    with pytest.raises(ShapeError):
        T.conv2d_raw(rng.standard_normal((1, 2, 5, 5)), np.ones((1, 3, 3, 3)))


def test_kernel_record_validates_bias():
    with pytest.raises(ShapeError):
        T.ConvKernel(np.ones((2, 1, 3, 3)), np.ones(3))
    kernel = T.ConvKernel(np.ones((2, 1, 1, 5)))
    assert kernel.is_strip and kernel.size == (1, 5) and kernel.c_out == 2


@pytest.mark.parametrize("size", [(2, 2), (3, 4), (1, 2)])
def test_kernel_record_rejects_even_sizes(size):
    with pytest.raises(ConfigError):
        T.ConvKernel(np.ones((1, 1) + size))


def test_strip_kernel_must_be_one_row_or_column():
    assert T.ConvKernel(np.ones((1, 1, 7, 1)), strip=True).size == (7, 1)
    assert T.ConvKernel(np.ones((1, 1, 1, 3)), strip=True).size == (1, 3)
    with pytest.raises(ShapeError):
        T.ConvKernel(np.ones((1, 1, 3, 3)), strip=True)


def test_box_strip_on_a_short_row():
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3)
    out = T.conv2d(x, T.ConvKernel(np.ones((1, 1, 1, 3)), strip=True))
    assert out.ravel().tolist() == [3.0, 6.0, 5.0]


def test_softmax_known_row():
    np.testing.assert_allclose(T.softmax_rows(np.array([0.0, np.log(3.0)])), [0.25, 0.75], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(
    row=st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=6),
    shift=st.floats(min_value=-100, max_value=100),
)
def test_softmax_ignores_a_constant_shift(row, shift):
    x = np.array(row)
    np.testing.assert_allclose(T.softmax_rows(x + shift), T.softmax_rows(x), atol=1e-12)


def test_layernorm_known_values():
    out = T.layernorm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), 1e-12)
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-9)

    flat = T.layernorm(np.full((1, 4), 2.5), np.ones(4), np.zeros(4), 1e-6)
    np.testing.assert_array_equal(flat, np.zeros((1, 4)))

    beta = np.array([0.5, -1.0, 2.0])
    gated = T.layernorm(np.array([[4.0, -2.0, 7.0]]), np.zeros(3), beta, 1e-6)
    np.testing.assert_array_equal(gated, beta[np.newaxis])


def test_upsample_known_row():
    x = np.array([0.0, 2.0]).reshape(1, 1, 1, 2)
    up = T.upsample_bilinear(x, 1, 4)
    np.testing.assert_allclose(up.ravel(), [0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0], atol=1e-15)


def test_upsample_single_pixel_is_constant():
    up = T.upsample_bilinear(np.full((1, 2, 1, 1), -1.25), 5, 3)
    assert up.shape == (1, 2, 5, 3)
    np.testing.assert_array_equal(up, -1.25)


@settings(max_examples=30, deadline=None)
@given(
    shape=st.tuples(*(st.integers(min_value=1, max_value=3) for _ in range(4))),
    seed=st.integers(min_value=0, max_value=2 ** 16),
)
def test_elementwise_identity_and_commutativity(shape, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(shape)
    b = rng.standard_normal(shape)
    np.testing.assert_array_equal(T.add(a, np.zeros(shape)), a)
    np.testing.assert_array_equal(T.mul(a, np.ones(shape)), a)
    np.testing.assert_array_equal(T.add(a, b), T.add(b, a))
    np.testing.assert_array_equal(T.mul(a, b), T.mul(b, a))


def test_elementwise_ops_require_matching_shapes(rng):
    with pytest.raises(ShapeError):
        T.add(rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 2, 3, 4)))
    with pytest.raises(ShapeError):
        T.mul(rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 1, 3, 3)))


def test_conv_backward_is_the_adjoint(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    g = rng.standard_normal((2, 4, 4, 3))
    gx, gw, gb = T.conv2d_backward(x, w, g, stride=2)

    y = T.conv2d_raw(x, w, stride=2)
    assert y.shape == g.shape
    # <conv(x), g> is linear in x and in w
    assert np.isclose(np.sum(y * g), np.sum(x * gx), rtol=1e-12)
    assert np.isclose(np.sum(y * g), np.sum(w * gw), rtol=1e-12)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)))


def test_results_do_not_depend_on_thread_count(rng, restore_threads):
    x = rng.standard_normal((6, 3, 9, 9))
    w = rng.standard_normal((4, 3, 5, 5))
    g = rng.standard_normal((6, 4, 9, 9))

    T.set_threads(1)
    single = T.conv2d_raw(x, w), T.conv2d_backward(x, w, g)
    T.set_threads(4)
    multi = T.conv2d_raw(x, w), T.conv2d_backward(x, w, g)

    np.testing.assert_array_equal(single[0], multi[0])
    for a, b in zip(single[1], multi[1]):
        np.testing.assert_array_equal(a, b)


def test_thread_count_must_be_positive():
    with pytest.raises(ConfigError):
        T.set_threads(0)


def test_upsample_keeps_corners_and_constants(rng):
    x = rng.standard_normal((1, 2, 3, 4))
    up = T.upsample_bilinear(x, 9, 10)
    np.testing.assert_array_equal(up[..., 0, 0], x[..., 0, 0])
    np.testing.assert_array_equal(up[..., -1, -1], x[..., -1, -1])
    np.testing.assert_array_equal(up[..., 0, -1], x[..., 0, -1])

    flat = T.upsample_bilinear(np.full((1, 1, 2, 2), 3.5), 8, 8)
    np.testing.assert_allclose(flat, 3.5, rtol=0, atol=1e-13)


def test_upsample_same_size_is_identity(rng):
    x = rng.standard_normal((1, 2, 5, 3))
    np.testing.assert_array_equal(T.upsample_bilinear(x, 5, 3), x)


def test_upsample_refuses_to_downscale(rng):
    with pytest.raises(ConfigError):
        T.upsample_bilinear(rng.standard_normal((1, 1, 4, 4)), 2, 4)


def test_upsample_adjoint(rng):
    x = rng.standard_normal((2, 3, 4, 2))
    g = rng.standard_normal((2, 3, 8, 7))
    lhs = np.sum(T.upsample_bilinear(x, 8, 7) * g)
    rhs = np.sum(x * T.upsample_bilinear_adjoint(g, 4, 2))
    assert np.isclose(lhs, rhs, rtol=1e-12)


def test_softmax_rows_are_distributions(rng):
    y = T.softmax_rows(50.0 * rng.standard_normal((3, 4, 6)))
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert (y >= 0).all()


def test_layernorm_normalises_each_token(rng):
    x = 3.0 + 2.0 * rng.standard_normal((2, 5, 8))
    out = T.layernorm(x, np.ones(8), np.zeros(8), 1e-12)
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-9)
    with pytest.raises(ShapeError):
        T.layernorm(x, np.ones(7), np.zeros(8), 1e-6)


def test_gelu_known_values():
    assert T.gelu(np.array(0.0)) == 0.0
    assert abs(T.gelu(np.array(10.0)) - 10.0) < 1e-12
    assert abs(T.gelu(np.array(-10.0))) < 1e-12


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(min_value=1, max_value=9),
    w=st.integers(min_value=1, max_value=9),
    k=st.sampled_from([1, 3, 5]),
    seed=st.integers(min_value=0, max_value=2 ** 16),
)
def test_same_padding_preserves_spatial_size_and_linearity(h, w, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, h, w))
    y = rng.standard_normal((1, 2, h, w))
    weight = rng.standard_normal((3, 2, k, k))

    out = T.conv2d_raw(x + 2.0 * y, weight)
    assert out.shape == (1, 3, h, w)
    expected = T.conv2d_raw(x, weight) + 2.0 * T.conv2d_raw(y, weight)
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-10)
