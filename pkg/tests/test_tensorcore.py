import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyfadet import tensorcore as tc
from dyfadet.errors import ConfigurationError, ContractError, DimensionError
from oracles import conv_loops, depthwise_loops


def T(a, grad=False):
    return tc.Tensor(np.asarray(a, dtype=float), requires_grad=grad)


# --- pointwise / depthwise / pooling fixtures -------------------------------------------


def test_pointwise_identity_and_sum():
    x = T([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(tc.pointwise_conv(x, T(np.eye(2))).data, x.data)
    assert np.array_equal(tc.pointwise_conv(x, T([[1.0, 1.0]])).data, [[4.0, 6.0]])


def test_pointwise_bias_only():
    out = tc.pointwise_conv(T(np.ones((2, 3))), T(np.zeros((1, 2))), T([5.0]))
    assert np.array_equal(out.data, [[5.0, 5.0, 5.0]])


def test_pointwise_shape_mismatch():
    with pytest.raises(DimensionError):
        tc.pointwise_conv(T(np.ones((3, 4))), T(np.ones((2, 2))))


def test_depthwise_fixture():
    out = tc.depthwise_conv1d(T([[1.0, 2.0, 3.0, 4.0]]), T([[1.0, 1.0, 1.0]]))
    assert np.array_equal(out.data, [[3.0, 6.0, 9.0, 7.0]])


def test_depthwise_identity_and_zero():
    x = T(np.random.default_rng(0).standard_normal((3, 5)))
    assert np.array_equal(tc.depthwise_conv1d(x, T(np.ones((3, 1)))).data, x.data)
    assert not tc.depthwise_conv1d(T(np.zeros((3, 5))), T(np.ones((3, 3)))).data.any()


def test_even_kernel_rejected():
    with pytest.raises(ConfigurationError):
        tc.depthwise_conv1d(T(np.ones((1, 4))), T(np.ones((1, 2))))


def test_max_pool_fixtures():
    assert np.array_equal(tc.max_pool_ds2(T([[1.0, 3.0, 2.0, 0.0]])).data, [[3.0, 2.0]])
    assert np.array_equal(tc.max_pool_ds2(T([[7.0]])).data, [[7.0]])
    assert np.array_equal(tc.max_pool_ds2(T([[1.0, 5.0, 4.0]])).data, [[5.0, 4.0]])


def test_upsample_alignment_fixture():
    # align-corners: endpoints map to endpoints
    out = tc.linear_upsample_x2(T([[0.0, 2.0]]), 4)
    assert np.allclose(out.data, [[0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0]], atol=1e-15)
    assert np.array_equal(tc.linear_upsample_x2(T([[3.0]]), 2).data, [[3.0, 3.0]])


def test_upsample_target_checked():
    with pytest.raises(DimensionError):
        tc.linear_upsample_x2(T(np.ones((1, 4))), 5)


def test_layer_norm_fixture():
    out = tc.layer_norm(T([[1.0], [3.0]]), T(np.ones(2)), T(np.zeros(2)))
    assert np.allclose(out.data, [[-1.0], [1.0]], atol=1e-5)
    flat = tc.layer_norm(T(np.full((4, 3), 2.5)), T(np.ones(4)), T(np.zeros(4)))
    assert np.array_equal(flat.data, np.zeros((4, 3)))


def test_group_norm_rejects_bad_groups():
    with pytest.raises(ConfigurationError):
        tc.group_norm(T(np.ones((3, 2))), 2, T(np.ones(3)), T(np.zeros(3)))


def test_group_norm_one_group_per_channel_matches_per_channel_stats():
    x = np.random.default_rng(1).standard_normal((4, 6))
    out = tc.group_norm(T(x), 4, T(np.ones(4)), T(np.zeros(4))).data
    ref = (x - x.mean(axis=1, keepdims=True)) / np.sqrt(x.var(axis=1, keepdims=True) + 1e-5)
    assert np.allclose(out, ref, atol=1e-12)


def test_activations():
    assert np.array_equal(tc.relu(T([-1.0, 2.0])).data, [0.0, 2.0])
    assert tc.restricted_tanh(T([-5.0])).data[0] == 0.0
    assert np.allclose(tc.softmax(T(np.zeros((4, 2)))).data, 0.25)


# --- autodiff --------------------------------------------------------------------------


def test_backward_simple_laws():
    x = T(np.arange(6.0).reshape(2, 3), grad=True)
    tc.backward(tc.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    x.grad = None
    tc.backward(tc.tsum(x * x) * 0.5)
    assert np.array_equal(x.grad, x.data)


def test_backward_accumulates():
    x = T([1.0, 2.0], grad=True)
    loss = tc.tsum(x * 3.0)
    tc.backward(loss)
    tc.backward(loss)
    assert np.array_equal(x.grad, [6.0, 6.0])


def test_shared_subgraph_counted_once_per_path():
    x = T([2.0], grad=True)
    y = x * x
    tc.backward(tc.tsum(y + y))
    assert x.grad[0] == pytest.approx(8.0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        tc.backward(T(np.ones(3), grad=True) * 2.0)


def test_no_grad_builds_no_graph():
    x = T([1.0], grad=True)
    with tc.no_grad():
        y = x * 2.0
    assert not y.requires_grad


@pytest.mark.parametrize(
    "name,fn",
    [
        ("exp", lambda a: tc.exp(a)),
        ("log", lambda a: tc.log(tc.exp(a))),
        ("sigmoid", tc.sigmoid),
        ("tanh", tc.tanh),
        ("softmax", lambda a: tc.softmax(a)),
        ("div", lambda a: a / (a * a + 1.0)),
        ("power", lambda a: (a * a + 0.5) ** 1.5),
        ("mean", lambda a: tc.mean(a, axis=-1, keepdims=True) * a),
        ("transpose", lambda a: tc.transpose(a, (1, 0))),
        ("concat", lambda a: tc.concat([a, a * 2.0], axis=-1)),
        ("stack", lambda a: tc.stack([a, -a], axis=0)),
        ("slice", lambda a: a[..., 1]),
        ("maxpool", tc.max_pool_ds2),
        ("upsample", lambda a: tc.linear_upsample_x2(a, 2 * a.shape[-1] - 1)),
        ("shift", lambda a: tc.shift_stack(a, [-2, 0, 1])),
    ],
)
def test_gradients_of_elementary_ops(name, fn):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    x = T(rng.standard_normal((3, 5)) + 0.01 * np.arange(5), grad=True)
    w = rng.standard_normal(fn(x).shape)
    assert tc.gradcheck(lambda: tc.tsum(fn(x) * w), [x]) < 1e-6


def test_gradients_of_conv_and_norm_ops():
    rng = np.random.default_rng(3)
    x = T(rng.standard_normal((2, 3, 7)), grad=True)
    Wd = T(rng.standard_normal((3, 3)), grad=True)
    Wc = T(rng.standard_normal((4, 3, 3)), grad=True)
    Wp = T(rng.standard_normal((4, 3)), grad=True)
    b3, b4 = T(rng.standard_normal(3), grad=True), T(rng.standard_normal(4), grad=True)
    g, o = T(rng.uniform(0.5, 2, 3), grad=True), T(rng.standard_normal(3), grad=True)
    M = T(rng.uniform(0.2, 1, (2, 3, 7)), grad=True)
    cases = [
        (lambda: tc.depthwise_conv1d(x, Wd, b3, offsets=[-3, 0, 2]), [x, Wd, b3]),
        (lambda: tc.conv1d(x, Wc, b4), [x, Wc, b4]),
        (lambda: tc.pointwise_conv(x, Wp, b4), [x, Wp, b4]),
        (lambda: tc.layer_norm(x, g, o), [x, g, o]),
        (lambda: tc.group_norm(x, 3, g, o), [x, g, o]),
        (lambda: tc.masked_depthwise_conv1d(x, M, Wd, b3, [-2, 0, 3]), [x, M, Wd, b3]),
    ]
    for fn, leaves in cases:
        w = rng.standard_normal(fn().shape)
        assert tc.gradcheck(lambda: tc.tsum(fn() * w), leaves) < 1e-6


# --- oracles & properties ----------------------------------------------------------------


def test_conv1d_matches_loop_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 9))
    W = rng.standard_normal((2, 3, 5))
    b = rng.standard_normal(2)
    out = tc.conv1d(T(x), T(W), T(b)).data
    assert np.allclose(out, conv_loops(x, W, b, tc.tap_offsets(5)), atol=1e-12)


def test_masked_depthwise_matches_loop_oracle_under_unit_mask():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 11))
    W = rng.standard_normal((3, 3))
    out = tc.masked_depthwise_conv1d(T(x), T(np.ones((3, 11))), T(W), None, [-4, 0, 4]).data
    assert np.allclose(out, depthwise_loops(x, W, None, [-4, 0, 4]), atol=1e-12)


arrays = st.integers(1, 4).flatmap(
    lambda C: st.integers(1, 12).flatmap(
        lambda T_: st.lists(st.floats(-10, 10), min_size=C * T_, max_size=C * T_).map(
            lambda v: np.array(v).reshape(C, T_)
        )
    )
)


@settings(max_examples=60, deadline=None)
@given(arrays, arrays, st.floats(-3, 3), st.floats(-3, 3))
def test_pointwise_linearity(x, y, a, b):
    if x.shape != y.shape:
        y = np.resize(y, x.shape)
    W = T(np.random.default_rng(x.shape[0]).standard_normal((2, x.shape[0])))
    lhs = tc.pointwise_conv(T(a * x + b * y), W).data
    rhs = a * tc.pointwise_conv(T(x), W).data + b * tc.pointwise_conv(T(y), W).data
    assert np.allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(lhs).max()), rtol=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 20), st.floats(-5, 5))
def test_pool_then_upsample_constant(C, T_, c):
    # T is always 2 * ceil(T/2) or 2 * ceil(T/2) - 1, so it is a legal target
    down = tc.max_pool_ds2(T(np.full((C, T_), c)))
    assert np.array_equal(tc.linear_upsample_x2(down, T_).data, np.full((C, T_), c))


@settings(max_examples=60, deadline=None)
@given(arrays)
def test_layer_norm_moments(x):
    if x.shape[0] < 2 or np.any(x.std(axis=0) < 0.5):
        return
    out = tc.layer_norm(T(x), T(np.ones(x.shape[0])), T(np.zeros(x.shape[0]))).data
    assert np.all(np.abs(out.mean(axis=0)) <= 1e-6)
    assert np.all(np.abs(out.var(axis=0) - 1) <= 1e-4)


@settings(max_examples=40, deadline=None)
@given(arrays)
def test_outputs_stay_finite(x):
    t = T(x * 100)
    for y in (tc.sigmoid(t), tc.restricted_tanh(t), tc.softmax(t), tc.log(tc.sigmoid(t), floor=1e-8)):
        assert np.all(np.isfinite(y.data))
