import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sernet.errors import ConfigError, NumericError, ShapeError, UsageError
from sernet.tensor import (
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    detect_anomaly,
    finite_diff_check,
    mul,
    no_grad,
    record,
    relu,
    resize_bilinear,
    sigmoid,
    slice_channels,
    sum_all,
)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------- oracles


def conv_oracle(x, w, b, s, p, d, groups):
    n, cin, h, wd = x.shape
    cout, cg, k, _ = w.shape
    ho = (h + 2 * p - d * (k - 1) - 1) // s + 1
    wo = (wd + 2 * p - d * (k - 1) - 1) // s + 1
    xp = np.zeros((n, cin, h + 2 * p, wd + 2 * p))
    xp[:, :, p : p + h, p : p + wd] = x
    out = np.zeros((n, cout, ho, wo))
    per = cout // groups
    for o in range(cout):
        grp = o // per
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, grp * cg : (grp + 1) * cg, i * s : i * s + d * (k - 1) + 1 : d, j * s : j * s + d * (k - 1) + 1 : d]
                out[:, o, i, j] = np.sum(patch * w[o], axis=(1, 2, 3))
    if b is not None:
        out += b
    return out


def deconv_oracle(x, w, s, p):
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    full = np.zeros((n, cout, (h - 1) * s + k, (wd - 1) * s + k))
    for i in range(h):
        for j in range(wd):
            full[:, :, i * s : i * s + k, j * s : j * s + k] += np.einsum("nc,cokl->nokl", x[:, :, i, j], w)
    return full[:, :, p : full.shape[2] - p, p : full.shape[3] - p]


# ------------------------------------------------------------- construction


def test_tensor_rejects_non_4d_and_empty():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 0, 2, 2)))


def test_data_is_copied_and_float64():
    a = np.ones((1, 1, 2, 2), dtype=np.float32)
    t = Tensor(a)
    a[0, 0, 0, 0] = 5
    assert t.data.dtype == np.float64 and t.data[0, 0, 0, 0] == 1.0


# ------------------------------------------------------------ elementwise


def test_elementwise_examples():
    assert sigmoid(T(np.zeros((1, 1, 1, 1)))).item() == 0.5
    r = relu(T([[[[-3.0, 3.0]]]])).data
    assert r.tolist() == [[[[0.0, 3.0]]]]
    x = T(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    assert np.array_equal(add(x, T(np.zeros(x.shape))).data, x.data)


@given(st.floats(-30, 30, allow_nan=False))
def test_sigmoid_strictly_inside_unit_interval(v):
    s = sigmoid(T(np.full((1, 1, 1, 1), v))).item()
    assert 0.0 < s < 1.0


def test_sigmoid_is_finite_at_extremes():
    s = sigmoid(T([[[[-1000.0, 1000.0]]]])).data
    assert np.all(np.isfinite(s))
    assert s[0, 0, 0, 0] == 0.0 and s[0, 0, 0, 1] == 1.0


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_relu_nonnegative(vals):
    assert np.all(relu(T(np.array(vals).reshape(1, 1, 1, -1))).data >= 0)


def test_binary_ops_refuse_broadcasting_and_name_dimension():
    with pytest.raises(ShapeError, match="dimension"):
        add(T(np.zeros((1, 2, 3, 3))), T(np.zeros((1, 2, 3, 4))))
    with pytest.raises(ShapeError):
        mul(T(np.zeros((1, 2, 3, 3))), T(np.zeros((1, 1, 3, 3))))


def test_concat_and_slice():
    r = np.random.default_rng(0)
    a, b = T(r.standard_normal((1, 2, 4, 4))), T(r.standard_normal((1, 3, 4, 4)))
    c = concat_channels([a, b])
    assert c.shape == (1, 5, 4, 4)
    assert np.array_equal(concat_channels([a]).data, a.data)
    assert np.array_equal(slice_channels(c, 0, 2).data, a.data)
    assert np.array_equal(slice_channels(c, 2, 5).data, b.data)
    with pytest.raises(ShapeError):
        concat_channels([a, T(np.zeros((1, 1, 4, 5)))])


# ------------------------------------------------------------ convolution


def test_conv2d_all_ones_window_sums_to_nine():
    y = conv2d(T(np.ones((1, 1, 5, 5))), T(np.ones((1, 1, 3, 3))))
    assert y.shape == (1, 1, 3, 3)
    assert np.all(y.data == 9.0)


@pytest.mark.parametrize("k,s,p,d", [(3, 1, 1, 1), (3, 1, 12, 12)])
def test_conv2d_same_padding_keeps_size(k, s, p, d):
    y = conv2d(T(np.zeros((1, 3, 8, 8))), T(np.zeros((2, 3, k, k))), stride=s, padding=p, dilation=d)
    assert y.shape[2:] == (8, 8)


@pytest.mark.parametrize(
    "cin,cout,k,s,p,d,groups",
    [(3, 4, 3, 1, 1, 1, 1), (4, 6, 3, 2, 1, 1, 2), (4, 4, 3, 1, 2, 2, 4), (2, 3, 1, 1, 0, 1, 1), (3, 2, 1, 2, 1, 1, 1), (2, 2, 5, 1, 2, 1, 1)],
)
def test_conv2d_matches_loop_oracle(each_backend, cin, cout, k, s, p, d, groups):
    r = np.random.default_rng(3)
    x = r.standard_normal((2, cin, 7, 6))
    w = r.standard_normal((cout, cin // groups, k, k))
    b = r.standard_normal((1, cout, 1, 1))
    y = conv2d(T(x), T(w), T(b), stride=s, padding=p, dilation=d, groups=groups)
    np.testing.assert_allclose(y.data, conv_oracle(x, w, b, s, p, d, groups), rtol=1e-12, atol=1e-12)


def test_conv2d_errors_name_the_problem():
    x = T(np.zeros((1, 3, 8, 8)))
    with pytest.raises(ShapeError, match="in-channel"):
        conv2d(x, T(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ShapeError, match="groups"):
        conv2d(x, T(np.zeros((2, 1, 3, 3))), groups=2)
    with pytest.raises(ConfigError, match="output size"):
        conv2d(T(np.zeros((1, 3, 2, 2))), T(np.zeros((2, 3, 3, 3))))


@given(
    st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(0, 4), st.integers(1, 3)
)
def test_conv2d_output_size_contract(h, w, k, s, p, d):
    ho = (h + 2 * p - d * (k - 1) - 1) // s + 1
    wo = (w + 2 * p - d * (k - 1) - 1) // s + 1
    x, wt = T(np.zeros((1, 2, h, w))), T(np.zeros((3, 2, k, k)))
    if ho < 1 or wo < 1:
        with pytest.raises(ConfigError):
            conv2d(x, wt, stride=s, padding=p, dilation=d)
    else:
        assert conv2d(x, wt, stride=s, padding=p, dilation=d).shape == (1, 3, ho, wo)


def test_depthwise_then_pointwise_equals_dense_separable_kernel(each_backend):
    # depthwise (groups=C) followed by 1x1 equals one dense conv whose kernel is w_pw[o,c] * w_dw[c]
    r = np.random.default_rng(8)
    x = T(r.standard_normal((2, 3, 6, 6)), grad=True)
    dw = T(r.standard_normal((3, 1, 3, 3)), grad=True)
    pw = T(r.standard_normal((4, 3, 1, 1)), grad=True)
    y = conv2d(conv2d(x, dw, padding=2, dilation=2, groups=3), pw)
    dense = pw.data[:, :, 0, 0][:, :, None, None] * dw.data[:, 0][None]
    np.testing.assert_allclose(y.data, conv_oracle(x.data, dense, None, 1, 2, 2, 1), rtol=1e-12, atol=1e-12)
    f = lambda _t: sum_all(conv2d(conv2d(x, dw, padding=2, dilation=2, groups=3), pw))
    for t in (x, dw, pw):
        assert finite_diff_check(f, t) <= 1e-4


def test_conv_transpose_examples():
    y = conv_transpose2d(T(np.zeros((1, 2, 16, 16))), T(np.zeros((2, 3, 4, 4))), stride=4)
    assert y.shape == (1, 3, 64, 64)
    y = conv_transpose2d(T(np.zeros((1, 2, 16, 16))), T(np.zeros((2, 3, 3, 3))), stride=1, padding=1)
    assert y.shape == (1, 3, 16, 16)
    y = conv_transpose2d(T([[[[1.0, 2.0], [3.0, 4.0]]]]), T(np.ones((1, 1, 2, 2))), stride=2)
    expect = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
    assert np.array_equal(y.data[0, 0], expect)


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (4, 4, 0), (4, 2, 1), (3, 2, 0)])
def test_conv_transpose_matches_scatter_oracle(each_backend, k, s, p):
    r = np.random.default_rng(4)
    x = r.standard_normal((2, 3, 4, 5))
    w = r.standard_normal((3, 2, k, k))
    np.testing.assert_allclose(conv_transpose2d(T(x), T(w), stride=s, padding=p).data, deconv_oracle(x, w, s, p), rtol=1e-12, atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv(each_backend):
    r = np.random.default_rng(5)
    w = r.standard_normal((3, 2, 3, 3))  # conv: 2 -> 3 channels; transpose: 3 -> 2
    x = r.standard_normal((1, 2, 8, 8))
    yc = conv2d(T(x), T(w), stride=2, padding=1)
    g = r.standard_normal(yc.shape)
    xt = conv_transpose2d(T(g), T(w), stride=2, padding=1)
    # the transpose may be one row short of the input; compare on its extent
    lhs = np.sum(yc.data * g)
    rhs = np.sum(x[:, :, : xt.shape[2], : xt.shape[3]] * xt.data)
    if xt.shape[2:] == x.shape[2:]:
        assert lhs == pytest.approx(rhs, rel=1e-12)
    else:
        assert xt.shape[2] == x.shape[2] - 1


# ------------------------------------------------------------- batch norm


def test_batch_norm_training_standardizes(rng):
    x = T(rng.standard_normal((4, 3, 5, 5)) * 5 + 2)
    y = batch_norm(x, T(np.ones((1, 3, 1, 1))), T(np.zeros((1, 3, 1, 1))), np.zeros(3), np.ones(3), True)
    assert np.all(np.abs(y.data.mean(axis=(0, 2, 3))) <= 1e-9)
    # eps shrinks the variance to s2 / (s2 + eps); within 1e-6 of 1 once s2 >= 10
    s2 = x.data.var(axis=(0, 2, 3))
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), s2 / (s2 + 1e-5), rtol=1e-12)
    assert np.all(s2 >= 10)
    assert np.all(np.abs(y.data.var(axis=(0, 2, 3)) - 1) <= 1e-6)


def test_batch_norm_inference_identity_statistics(rng):
    x = T(rng.standard_normal((2, 3, 4, 4)))
    y = batch_norm(x, T(np.ones((1, 3, 1, 1))), T(np.zeros((1, 3, 1, 1))), np.zeros(3), np.ones(3), False)
    np.testing.assert_allclose(y.data, x.data / np.sqrt(1 + 1e-5), rtol=1e-15)
    np.testing.assert_allclose(y.data, x.data, atol=1e-5 * np.abs(x.data).max())


def test_batch_norm_two_values_eps_zero():
    y = batch_norm(T(np.array([0.0, 2.0]).reshape(2, 1, 1, 1)), T(np.ones((1, 1, 1, 1))), T(np.zeros((1, 1, 1, 1))), np.zeros(1), np.ones(1), True, eps=0.0)
    assert y.data.reshape(-1).tolist() == [-1.0, 1.0]


def test_batch_norm_running_stats_update(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    batch_norm(T(x), T(np.ones((1, 2, 1, 1))), T(np.zeros((1, 2, 1, 1))), rm, rv, True, momentum=0.1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    assert np.all(rv > 0)


def test_batch_norm_channel_mismatch():
    with pytest.raises(ShapeError):
        batch_norm(T(np.zeros((1, 3, 2, 2))), T(np.ones((1, 2, 1, 1))), T(np.zeros((1, 2, 1, 1))), np.zeros(2), np.ones(2), False)


# ----------------------------------------------------------------- resize


def test_resize_same_size_is_identity(rng):
    x = T(rng.standard_normal((1, 2, 5, 3)))
    assert np.array_equal(resize_bilinear(x, 5, 3).data, x.data)


@given(st.floats(-100, 100), st.integers(1, 9), st.integers(1, 9))
def test_resize_of_constant_is_constant(c, h, w):
    y = resize_bilinear(T(np.full((1, 1, 3, 4), c)), h, w).data
    np.testing.assert_allclose(y, c, rtol=1e-14, atol=1e-12)


def test_resize_2x2_to_4x4_hand_grid():
    # half-pixel centres: destination rows/cols sample source coordinate [0, .25, .75, 1]
    y = resize_bilinear(T([[[[0.0, 1.0], [2.0, 3.0]]]]), 4, 4).data[0, 0]
    expect = np.array(
        [
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ]
    )
    np.testing.assert_allclose(y, expect, rtol=0, atol=1e-15)


# ---------------------------------------------------------------- autodiff


def test_sum_gradient_is_ones(rng):
    x = T(rng.standard_normal((2, 3, 2, 2)), grad=True)
    sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones(x.shape))


def test_square_gradient(rng):
    x = T(rng.standard_normal((1, 2, 3, 3)), grad=True)
    sum_all(mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_shared_subexpression_gradients_accumulate(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)), grad=True)
    y = sigmoid(x)
    sum_all(add(mul(y, y), y)).backward()
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, (2 * s + 1) * s * (1 - s), rtol=1e-12)


def test_backward_twice_is_a_usage_error(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)), grad=True)
    loss = sum_all(relu(x))
    loss.backward()
    with pytest.raises(UsageError):
        loss.backward()


def test_backward_needs_scalar(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)), grad=True)
    with pytest.raises(ShapeError):
        relu(x).backward()


def test_no_grad_records_nothing(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)), grad=True)
    with no_grad():
        y = sum_all(relu(x))
    assert not y.requires_grad
    with pytest.raises(UsageError):
        y.backward()


def test_detect_anomaly_names_the_op():
    x = T(np.ones((1, 1, 1, 1)), grad=True)

    def bad(t):
        return record("explode", t.data * np.inf, (t,), lambda g: (g,))

    with detect_anomaly(), pytest.raises(NumericError, match="explode"):
        bad(x)


def test_custom_op_via_record(rng):
    x = T(rng.standard_normal((1, 2, 2, 2)), grad=True)
    cube = lambda t: record("cube", t.data**3, (t,), lambda g: (3 * t.data**2 * g,))
    sum_all(cube(x)).backward()
    np.testing.assert_allclose(x.grad, 3 * x.data**2)


# ------------------------------------------------------ finite differences


def test_fd_of_sum_is_exact(rng):
    x = T(rng.standard_normal((2, 2, 3, 3)))
    assert finite_diff_check(sum_all, x) <= 1e-10


def test_fd_of_sigmoid(rng):
    x = T(rng.uniform(-3, 3, (1, 2, 3, 3)))
    assert finite_diff_check(lambda t: sum_all(sigmoid(t)), x, eps=1e-5) <= 1e-6


def test_fd_of_conv(rng):
    x = T(rng.standard_normal((1, 2, 5, 5)))
    w = T(rng.standard_normal((3, 2, 3, 3)))
    assert finite_diff_check(lambda t: sum_all(conv2d(t, w, padding=1)), x) <= 1e-4
    assert finite_diff_check(lambda t: sum_all(conv2d(x, t, padding=1)), w) <= 1e-4


def test_fd_rejects_non_scalar_and_bad_eps(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)))
    with pytest.raises(ShapeError):
        finite_diff_check(relu, x)
    with pytest.raises(ConfigError):
        finite_diff_check(sum_all, x, eps=1e-2)


def test_fd_detects_a_wrong_gradient(rng):
    x = T(rng.standard_normal((1, 1, 2, 2)))
    wrong = lambda t: sum_all(record("wrong", t.data**2, (t,), lambda g: (g * t.data,)))
    assert finite_diff_check(wrong, x) > 1e-2


small = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))


@given(small, st.integers(0, 2**31))
def test_fd_property_elementwise_ops(shape, seed):
    r = np.random.default_rng(seed)
    x = T(r.standard_normal(shape))
    y = T(r.standard_normal(shape))
    proj = T(r.standard_normal(shape))
    for f in (
        lambda t: sum_all(mul(sigmoid(t), proj)),
        lambda t: sum_all(mul(mul(t, y), proj)),
        lambda t: sum_all(mul(add(t, y), proj)),
        lambda t: sum_all(mul(relu(t), proj)),
    ):
        assert finite_diff_check(f, x, eps=1e-5) <= 1e-4


@given(small, st.integers(1, 4), st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 2), st.integers(0, 2**31))
def test_fd_property_conv(shape, cout, k, s, p, seed):
    n, c, h, w = shape
    if (h + 2 * p - k) < 0 or (w + 2 * p - k) < 0:
        return
    r = np.random.default_rng(seed)
    x = T(r.standard_normal(shape))
    wt = T(r.standard_normal((cout, c, k, k)))
    y = conv2d(x, wt, stride=s, padding=p)
    proj = T(r.standard_normal(y.shape))
    assert finite_diff_check(lambda t: sum_all(mul(conv2d(t, wt, stride=s, padding=p), proj)), x) <= 1e-4
    assert finite_diff_check(lambda t: sum_all(mul(conv2d(x, t, stride=s, padding=p), proj)), wt) <= 1e-4


@given(small, st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_fd_property_resize_and_bn(shape, oh, ow, seed):
    r = np.random.default_rng(seed)
    x = T(r.standard_normal(shape))
    proj = T(r.standard_normal((shape[0], shape[1], oh, ow)))
    assert finite_diff_check(lambda t: sum_all(mul(resize_bilinear(t, oh, ow), proj)), x) <= 1e-4
    c = shape[1]
    if shape[0] * shape[2] * shape[3] < 2:
        return
    g, b = T(np.ones((1, c, 1, 1))), T(np.zeros((1, c, 1, 1)))
    proj2 = T(r.standard_normal(shape))
    f = lambda t: sum_all(mul(batch_norm(t, g, b, np.zeros(c), np.ones(c), True), proj2))
    assert finite_diff_check(f, x) <= 1e-4


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    a = conv2d(T(x), T(w), padding=1).data
    b = conv2d(T(x), T(w), padding=1).data
    assert np.array_equal(a, b)


def test_nan_propagates_through_relu_and_sigmoid():
    x = T([[[[np.nan, 1.0]]]])
    assert np.isnan(relu(x).data[0, 0, 0, 0])
    assert np.isnan(sigmoid(x).data[0, 0, 0, 0])
