import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seaseg import autodiff as ad
from seaseg.autodiff import BatchNormState, ConvSpec, Tensor
from seaseg.autodiff.functional import out_size
from seaseg.errors import EmptyLossError, GraphError, NonFiniteError, ShapeError

from conftest import bilinear_oracle, direct_conv2d


def T(a, grad=False, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=grad)


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel():
    x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)
    y = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
    np.testing.assert_array_equal(y.data, x)


def test_conv_dilated_extent():
    spec = ConvSpec(1, 1, (3, 3), 1, 0, (2, 2))
    assert spec.effective_kernel == (5, 5)
    y = ad.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), dilation=2)
    assert y.shape == (1, 1, 1, 1)
    assert y.data[0, 0, 0, 0] == 9


def test_conv_matches_direct_oracle_dilated():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    got = ad.conv2d(Tensor(x), Tensor(w), dilation=2, padding=2).data
    ref = direct_conv2d(x, w, pad=(2, 2), dil=(2, 2))
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5 * np.abs(ref).max())


@pytest.mark.parametrize("c,o,k,s,p,d,hw", [
    (3, 8, 7, 2, 3, 1, 21),     # stem-like, im2col path
    (8, 8, 3, 1, 1, 1, 12),     # shift engine
    (16, 8, 3, 2, 1, 1, 13),    # strided shift engine, odd size
    (12, 6, 3, 1, 4, 4, 10),    # dilation larger than half the input
    (10, 5, 1, 2, 0, 1, 9),     # pointwise strided
    (9, 4, 3, 1, 12, 12, 6),    # every off-centre tap reads only padding
    (8, 4, 2, 3, 1, 2, 11),
])
def test_conv_paths_match_oracle(c, o, k, s, p, d, hw):
    rng = np.random.default_rng(c * 100 + k)
    x = rng.standard_normal((2, c, hw, hw + 1)).astype(np.float32)
    w = rng.standard_normal((o, c, k, k)).astype(np.float32)
    b = rng.standard_normal(o).astype(np.float32)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), s, p, d).data
    ref = direct_conv2d(x, w, b, (s, s), (p, p), (d, d))
    assert got.shape == ref.shape
    np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-4 * np.abs(ref).max())


def test_conv_dilation_equals_zero_inflated_kernel():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 3, 11, 11))
    w = rng.standard_normal((2, 3, 3, 3))
    d = 3
    wz = np.zeros((2, 3, 1 + d * 2, 1 + d * 2))
    wz[:, :, ::d, ::d] = w
    a = ad.conv2d(T(x), T(w), padding=3, dilation=d).data
    b = ad.conv2d(T(x), T(wz), padding=3).data
    np.testing.assert_array_equal(a, b)


def test_conv_shape_errors_name_axis():
    with pytest.raises(ShapeError, match="channel"):
        ad.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))))
    with pytest.raises(ShapeError, match="height"):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 8))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ShapeError, match="bias"):
        ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((2, 1, 1, 1))), Tensor(np.zeros(3)))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), k=st.integers(1, 5), s=st.integers(1, 3), p=st.integers(0, 4), d=st.integers(1, 4))
def test_conv_output_size_formula(n, k, s, p, d):
    eff = d * (k - 1) + 1
    expected = (n + 2 * p - eff) // s + 1
    if expected < 1:
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 1, n, n), np.float32)), Tensor(np.zeros((1, 1, k, k), np.float32)),
                      stride=s, padding=p, dilation=d)
        return
    assert out_size(n, k, s, p, d) == expected
    y = ad.conv2d(Tensor(np.ones((1, 2, n, n), np.float32)), Tensor(np.ones((3, 2, k, k), np.float32)),
                  stride=s, padding=p, dilation=d)
    assert y.shape == (1, 3, expected, expected)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), c=st.integers(1, 12), k=st.sampled_from([1, 3]),
       s=st.integers(1, 2), d=st.integers(1, 3))
def test_conv_random_geometries_match_oracle(seed, c, k, s, d):
    rng = np.random.default_rng(seed)
    p = d * (k - 1) // 2
    x = rng.standard_normal((1, c, 9, 7))
    w = rng.standard_normal((3, c, k, k))
    got = ad.conv2d(T(x), T(w), stride=s, padding=p, dilation=d).data
    np.testing.assert_allclose(got, direct_conv2d(x, w, None, (s, s), (p, p), (d, d)), rtol=1e-10, atol=1e-10)


# ---------------------------------------------------------------- batch norm

def test_bn_standardized_input_train_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    st_ = BatchNormState.create(3, dtype=np.float64)
    y = ad.batch_norm2d(T(x), st_).data
    np.testing.assert_allclose(y, x, atol=1e-3)


def test_bn_eval_affine_exact():
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 4)).astype(np.float32)
    st_ = BatchNormState.create(3)
    st_.mode = "eval"
    st_.gamma.data[:] = 2
    st_.beta.data[:] = 1
    st_.epsilon = 1e-30       # so the variance term is exactly one in float32
    y = ad.batch_norm2d(Tensor(x), st_).data
    np.testing.assert_array_equal(y, 2 * x + 1)
    st_.epsilon = 1e-5
    y = ad.batch_norm2d(Tensor(x), st_).data.astype(np.float64)
    np.testing.assert_allclose(y, 2 * x.astype(np.float64) / np.sqrt(1 + 1e-5) + 1, rtol=1e-6, atol=1e-6)


def test_bn_train_statistics_and_running_update():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 2.0, (4, 5, 6, 6))
    st_ = BatchNormState.create(5, dtype=np.float64)
    y = ad.batch_norm2d(T(x), st_).data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() < 1e-3
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(st_.running_mean, 0.1 * m, rtol=1e-12)
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * v, rtol=1e-12)


def test_bn_errors():
    st_ = BatchNormState.create(3)
    with pytest.raises(ShapeError):
        ad.batch_norm2d(Tensor(np.zeros((1, 4, 2, 2))), st_)
    st_.epsilon = 0.0
    with pytest.raises(ValueError):
        ad.batch_norm2d(Tensor(np.zeros((1, 3, 2, 2))), st_)


# ---------------------------------------------------------------- pooling

def test_pool_small_examples():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert ad.pool2d(x, "avg", 2, 2).data.item() == 2.5
    assert ad.pool2d(x, "max", 2, 2).data.item() == 4.0
    with pytest.raises(ValueError):
        ad.pool2d(x, "median", 2, 2)
    with pytest.raises((ValueError, ShapeError)):
        ad.pool2d(x, "max", 0, 1)


def _pool_oracle(x, k, s, p, kind):
    n, c, h, w = x.shape
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            r0, c0 = i * s - p, j * s - p
            win = x[:, :, max(r0, 0):min(r0 + k, h), max(c0, 0):min(c0 + k, w)]
            out[:, :, i, j] = win.max(axis=(2, 3)) if kind == "max" else win.mean(axis=(2, 3))
    return out


def test_avg_pool_matches_loop_oracle_exactly():
    x = np.random.default_rng(0).standard_normal((1, 3, 48, 48)).astype(np.float32)
    y = ad.avg_pool2d(Tensor(x), 2, 2).data
    assert y.shape == (1, 3, 24, 24)
    ref = (x[:, :, ::2, ::2] + x[:, :, ::2, 1::2] + x[:, :, 1::2, ::2] + x[:, :, 1::2, 1::2]) / np.float32(4)
    np.testing.assert_array_equal(y, ref)


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("k,s,p", [(3, 2, 1), (2, 2, 0), (3, 1, 1), (2, 3, 1)])
def test_pool_padding_semantics(kind, k, s, p):
    x = np.random.default_rng(k * 10 + s).standard_normal((2, 2, 9, 10))
    got = ad.pool2d(T(x), kind, k, s, p).data
    np.testing.assert_allclose(got, _pool_oracle(x, k, s, p, kind), rtol=1e-12, atol=1e-12)


def test_max_pool_tie_routes_to_first():
    x = T(np.ones((1, 1, 2, 2)), grad=True)
    ad.max_pool2d(x, 2, 2).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


# ---------------------------------------------------------------- bilinear

def test_bilinear_constant_and_identity():
    x = np.full((1, 2, 3, 5), 7.25, np.float32)
    np.testing.assert_array_equal(ad.bilinear_resize(Tensor(x), 11, 4).data, 7.25)
    r = np.random.default_rng(0).standard_normal((1, 2, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(ad.bilinear_resize(Tensor(r), 6, 6).data, r)


def test_bilinear_matches_scalar_oracle():
    x = np.array([[[[0.0, 1.0], [2.0, 3.0]]]])
    got = ad.bilinear_resize(T(x), 4, 4).data[0, 0]
    np.testing.assert_allclose(got, bilinear_oracle(x[0, 0], 4, 4), atol=1e-6)
    r = np.random.default_rng(5).standard_normal((1, 1, 5, 7))
    got = ad.bilinear_resize(T(r), 9, 3).data[0, 0]
    np.testing.assert_allclose(got, bilinear_oracle(r[0, 0], 9, 3), atol=1e-12)


def test_bilinear_rejects_empty_target():
    with pytest.raises(ShapeError):
        ad.bilinear_resize(Tensor(np.zeros((1, 1, 2, 2))), 0, 3)


# ---------------------------------------------------------------- relu, loss

def test_relu_examples():
    np.testing.assert_array_equal(ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    x = T([-1.0, 0.0, 2.0], grad=True)
    ad.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])
    assert not ad.relu(Tensor(-np.ones((3, 3)))).data.any()


def test_cross_entropy_uniform_and_empty():
    logits = Tensor(np.zeros((1, 6, 1, 1)))
    loss = ad.softmax_cross_entropy(logits, np.array([[[3]]]))
    assert loss.valid_pixel_count == 1
    assert loss.value == pytest.approx(math.log(6), abs=1e-12)
    with pytest.raises(EmptyLossError):
        ad.softmax_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 255))


def test_cross_entropy_matches_per_pixel_oracle():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((1, 3, 4, 4))
    y = rng.integers(0, 3, (1, 4, 4))
    y[0, 0, :3] = 255
    got = ad.softmax_cross_entropy(T(z), y)
    terms = []
    for i in range(4):
        for j in range(4):
            if y[0, i, j] == 255:
                continue
            v = z[0, :, i, j]
            terms.append(-(v[y[0, i, j]] - math.log(sum(math.exp(t) for t in v))))
    assert got.valid_pixel_count == 13
    assert got.value == pytest.approx(sum(terms) / len(terms), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), shift=st.floats(-50, 50))
def test_cross_entropy_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((2, 4, 3, 3))
    y = rng.integers(0, 4, (2, 3, 3))
    per_pixel = rng.uniform(-1, 1, (2, 1, 3, 3)) * shift
    a = ad.softmax_cross_entropy(T(z), y).value
    b = ad.softmax_cross_entropy(T(z + per_pixel), y).value
    assert abs(a - b) < 1e-6


# ---------------------------------------------------------------- graph mechanics

def test_backward_simple_losses():
    x = T(np.random.default_rng(0).standard_normal((2, 3)), grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x.zero_grad()
    ((x * x).sum() * 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_accumulates_and_consumes():
    x = T([1.0, 2.0], grad=True)
    y = (x * 3.0).sum()
    y.backward(retain_graph=True)
    y.backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    with pytest.raises(GraphError):
        y.backward()
    with ad.no_grad():
        z = (x * 2.0).sum()
    with pytest.raises(GraphError):
        z.backward()


def test_check_finite():
    ad.check_finite(Tensor(np.zeros(3)))
    with pytest.raises(NonFiniteError):
        ad.check_finite(Tensor(np.array([1.0, np.nan])), "x")


def test_eval_forward_deterministic():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 8, 16, 16)).astype(np.float32))
    w = Tensor(rng.standard_normal((8, 8, 3, 3)).astype(np.float32))
    a = ad.conv2d(x, w, padding=2, dilation=2).data
    b = ad.conv2d(x, w, padding=2, dilation=2).data
    assert a.tobytes() == b.tobytes()
