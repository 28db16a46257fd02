import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcmnet import tensor as T
from fcmnet.errors import ConfigError, ShapeError, UsageError
from fcmnet.tensor import BnParams, ConvSpec, Tape, Tensor4
from fcmnet.verification import naive_broadcast_mul, naive_conv2d, naive_global_avg_pool


def rand(rng, shape):
    return Tensor4(rng.uniform(-1, 1, size=shape))


# --- Tensor4 ---------------------------------------------------------------

def test_tensor_rejects_wrong_rank_and_empty_dims():
    with pytest.raises(ShapeError):
        Tensor4(np.zeros((2, 3)))
    with pytest.raises(ShapeError) as exc:
        Tensor4(np.zeros((1, 0, 2, 2)))
    assert exc.value.dim == "c"


def test_integer_input_is_promoted_to_float64():
    t = Tensor4(np.ones((1, 1, 2, 2), dtype=int))
    assert t.dtype == np.float64


# --- conv2d ----------------------------------------------------------------

def test_identity_1x1_conv_returns_input():
    rng = np.random.default_rng(0)
    x = rand(rng, (2, 3, 4, 5))
    w = Tensor4(np.eye(3).reshape(3, 3, 1, 1))
    y = T.conv2d(x, ConvSpec(3, 3, 1), w)
    np.testing.assert_array_equal(y.data, x.data)


def test_delta_kernel_is_identity_and_zero_kernel_gives_bias():
    rng = np.random.default_rng(1)
    x = rand(rng, (1, 2, 6, 6))
    spec = ConvSpec(2, 2, 3, 1, 1, groups=2, has_bias=True)
    w = np.zeros(spec.weight_shape)
    w[:, 0, 1, 1] = 1.0
    bias = Tensor4(np.array([0.5, -2.0]).reshape(1, 2, 1, 1))
    y = T.conv2d(x, spec, Tensor4(w), Tensor4(np.zeros((1, 2, 1, 1))))
    np.testing.assert_array_equal(y.data, x.data)
    z = T.conv2d(x, spec, Tensor4(np.zeros(spec.weight_shape)), bias)
    np.testing.assert_array_equal(z.data, np.broadcast_to(bias.data, z.shape))


def test_conv_output_shape_stride_and_padding():
    x = Tensor4(np.zeros((1, 4, 13, 8)))
    spec = ConvSpec(4, 6, 3, 2, 1)
    y = T.conv2d(x, spec, Tensor4(np.zeros(spec.weight_shape)))
    assert y.shape == (1, 6, 7, 4)


def test_conv_argument_errors():
    x = Tensor4(np.zeros((1, 3, 5, 5)))
    with pytest.raises(ConfigError):
        ConvSpec(3, 4, 3, 1, 1, groups=2)
    with pytest.raises(ShapeError):
        T.conv2d(x, ConvSpec(4, 4, 3, 1, 1), Tensor4(np.zeros((4, 4, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(x, ConvSpec(3, 4, 3, 1, 1), Tensor4(np.zeros((4, 3, 5, 5))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor4(np.zeros((1, 3, 2, 2))), ConvSpec(3, 4, 5), Tensor4(np.zeros((4, 3, 5, 5))))


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 2), groups=st.sampled_from([1, 2, 3]), cpg=st.integers(1, 3), opg=st.integers(1, 3),
    h=st.integers(3, 9), w=st.integers(3, 9), k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 2),
    seed=st.integers(0, 2**31 - 1),
)
def test_conv_matches_naive_oracle(n, groups, cpg, opg, h, w, k, stride, seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(groups * cpg, groups * opg, k, stride, k // 2, groups=groups, has_bias=True)
    x = rand(rng, (n, spec.in_channels, h, w))
    wt = rand(rng, spec.weight_shape)
    b = rand(rng, (1, spec.out_channels, 1, 1))
    fast = T.conv2d(x, spec, wt, b).data
    slow = naive_conv2d(x, spec, wt, b).data
    assert np.abs(fast - slow).max() <= 1e-12, f"seed={seed}"


@settings(max_examples=25, deadline=None)
@given(groups=st.sampled_from([2, 3, 4]), cpg=st.integers(1, 3), opg=st.integers(1, 2), seed=st.integers(0, 2**31 - 1))
def test_grouped_conv_equals_block_diagonal_dense(groups, cpg, opg, seed):
    rng = np.random.default_rng(seed)
    cin, cout = groups * cpg, groups * opg
    gspec = ConvSpec(cin, cout, 3, 1, 1, groups=groups)
    wg = rng.uniform(-1, 1, size=gspec.weight_shape)
    dense = np.zeros((cout, cin, 3, 3))
    for g in range(groups):
        dense[g * opg:(g + 1) * opg, g * cpg:(g + 1) * cpg] = wg[g * opg:(g + 1) * opg]
    x = rand(rng, (2, cin, 6, 5))
    a = T.conv2d(x, gspec, Tensor4(wg)).data
    b = T.conv2d(x, ConvSpec(cin, cout, 3, 1, 1), Tensor4(dense)).data
    assert np.abs(a - b).max() <= 1e-12


def test_conv_spec_counts():
    assert ConvSpec(64, 128, 3).param_count == 73728
    assert ConvSpec(8, 8, 3, groups=8).is_depthwise
    assert ConvSpec(8, 4, 1).is_pointwise
    assert ConvSpec(4, 4, 3, has_bias=True).param_count == 4 * 4 * 9 + 4


# --- batch norm ------------------------------------------------------------

def test_batch_norm_training_normalises_each_channel():
    rng = np.random.default_rng(2)
    x = Tensor4(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))
    p = BnParams.identity(3)
    y = T.batch_norm(x, p, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)


def test_batch_norm_updates_running_stats_only_in_training():
    rng = np.random.default_rng(3)
    x = Tensor4(rng.normal(1.0, 1.0, size=(2, 2, 4, 4)))
    p = BnParams.identity(2)
    T.batch_norm(x, p, training=False)
    np.testing.assert_array_equal(p.running_mean, 0.0)
    T.batch_norm(x, p, training=True)
    expected = p.momentum * x.data.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(p.running_mean, expected, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31 - 1))
def test_batch_norm_inference_is_affine(a, b, seed):
    rng = np.random.default_rng(seed)
    p = BnParams.identity(3)
    p.gamma.data = rng.uniform(0.5, 2, size=(1, 3, 1, 1))
    p.beta.data = rng.uniform(-1, 1, size=(1, 3, 1, 1))
    p.running_mean = rng.uniform(-1, 1, size=3)
    p.running_var = rng.uniform(0.5, 2, size=3)
    x, y = rand(rng, (1, 3, 4, 4)), rand(rng, (1, 3, 4, 4))
    bn = lambda v: T.batch_norm(Tensor4(v), p, training=False).data
    # f(a x + b y) - f(0) == a (f(x) - f(0)) + b (f(y) - f(0))
    zero = bn(np.zeros_like(x.data))
    lhs = bn(a * x.data + b * y.data) - zero
    rhs = a * (bn(x.data) - zero) + b * (bn(y.data) - zero)
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, abs(a) + abs(b)) * 10


def test_bn_params_validation():
    with pytest.raises(ConfigError):
        BnParams(Tensor4(np.ones((1, 2, 1, 1))), Tensor4(np.zeros((1, 3, 1, 1))), np.zeros(2), np.ones(2))


# --- activations, pooling, channel ops -------------------------------------

@settings(max_examples=200)
@given(st.floats(-36, 36, allow_nan=False))
def test_sigmoid_strictly_inside_unit_interval(v):
    s = T.sigmoid(Tensor4(np.full((1, 1, 1, 1), v))).item()
    assert 0.0 < s < 1.0


def test_sigmoid_is_finite_at_extremes_and_silu_matches_definition():
    v = np.array([-1e300, -745.0, 0.0, 745.0, 1e300]).reshape(1, 1, 1, 5)
    s = T.sigmoid(Tensor4(v)).data
    assert np.isfinite(s).all() and (s >= 0).all() and (s <= 1).all()
    assert s[0, 0, 0, 2] == 0.5
    x = np.linspace(-5, 5, 11).reshape(1, 1, 1, 11)
    np.testing.assert_allclose(T.silu(Tensor4(x)).data, x / (1 + np.exp(-x)), rtol=1e-14)


def test_global_avg_pool_matches_oracle_and_constant_input():
    rng = np.random.default_rng(4)
    x = rand(rng, (2, 3, 5, 7))
    assert np.abs(T.global_avg_pool(x).data - naive_global_avg_pool(x)).max() <= 1e-12
    c = Tensor4(np.full((1, 2, 3, 3), 4.5))
    np.testing.assert_array_equal(T.global_avg_pool(c).data, 4.5)


@pytest.mark.parametrize("wshape", [(1, 4, 1, 1), (2, 1, 3, 3), (2, 4, 3, 3), (1, 1, 1, 1)])
def test_broadcast_mul_matches_oracle(wshape):
    rng = np.random.default_rng(5)
    x, w = rand(rng, (2, 4, 3, 3)), rand(rng, wshape)
    np.testing.assert_array_equal(T.eltwise_mul_broadcast(x, w).data, naive_broadcast_mul(x, w))


def test_broadcast_mul_rejects_incompatible_shapes():
    with pytest.raises(ShapeError):
        T.eltwise_mul_broadcast(Tensor4(np.ones((1, 4, 3, 3))), Tensor4(np.ones((1, 3, 1, 1))))


@pytest.mark.parametrize("c, ratio, k", [(4, 0.75, 3), (8, 0.25, 2), (6, 0.5, 3), (5, 0.5, 3), (10, 0.25, 3)])
def test_split_point_rounds_half_toward_part_one(c, ratio, k):
    assert T.split_point(c, ratio) == k


def test_split_rejects_empty_part():
    with pytest.raises(ConfigError):
        T.split_channels(Tensor4(np.zeros((1, 2, 2, 2))), 0.1)


@settings(max_examples=50, deadline=None)
@given(c=st.integers(2, 16), ratio=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_split_concat_round_trip(c, ratio, seed):
    k = T.split_point(c, ratio)
    if not 0 < k < c:
        return
    x = rand(np.random.default_rng(seed), (2, c, 3, 2))
    a, b = T.split_channels(x, ratio)
    assert a.c == k and b.c == c - k
    np.testing.assert_array_equal(T.concat_channels([a, b]).data, x.data)
    again = T.split_channels(T.concat_channels([a, b]), ratio)
    np.testing.assert_array_equal(again[0].data, a.data)
    np.testing.assert_array_equal(again[1].data, b.data)


# --- tape --------------------------------------------------------------------

def test_gradient_of_sum_and_sum_of_squares():
    rng = np.random.default_rng(6)
    x = Tensor4(rng.uniform(-1, 1, size=(2, 3, 2, 2)), requires_grad=True)
    with Tape() as tape:
        s = T.sum_all(x)
    tape.backward(s)
    np.testing.assert_array_equal(x.grad, 1.0)
    x.grad = None
    with Tape() as tape:
        q = T.sum_all(T.eltwise_mul_broadcast(x, x))
    tape.backward(q)
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)


def test_gradients_accumulate_when_a_leaf_is_reused():
    x = Tensor4(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    with Tape() as tape:
        y = T.eltwise_add(T.sum_all(x), T.sum_all(x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, 2.0)


def test_backward_on_unrecorded_value_raises():
    x = Tensor4(np.ones((1, 1, 2, 2)))
    y = T.sum_all(x)
    with pytest.raises(UsageError):
        T.backward(y)


def test_no_recording_without_tape():
    x = Tensor4(np.ones((1, 1, 2, 2)), requires_grad=True)
    y = T.sum_all(x)
    assert y._tape is None


# --- dumps -----------------------------------------------------------------

def test_dump_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(7)
    x = rand(rng, (2, 3, 4, 5))
    blob = T.dumps(x)
    assert len(blob) == 16 + 8 * x.data.size
    y, used = T.loads(blob)
    assert used == len(blob)
    assert y.data.tobytes() == x.data.tobytes()
    path = tmp_path / "x.bin"
    T.save_tensor(path, x)
    assert T.load_tensor(path).data.tobytes() == x.data.tobytes()


def test_truncated_dump_is_rejected():
    blob = T.dumps(Tensor4(np.ones((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        T.loads(blob[:-3])
