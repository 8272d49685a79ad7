import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mssr import tensor as te
from oracles import direct_conv2d, numeric_grad


def f64(a, grad=True):
    return te.Tensor(np.asarray(a, np.float64), requires_grad=grad, dtype=np.float64)


def conv_params(rng, c, o, k, stride, dtype=np.float64):
    p = te.ConvParams.create(c, o, k, stride, dtype=dtype)
    p.weight.data[...] = rng.standard_normal(p.weight.shape)
    p.bias.data[...] = rng.standard_normal(p.bias.shape)
    return p


# ---------------------------------------------------------------------------
# tensors and parameters


def test_tensor_requires_rank_four():
    with pytest.raises(te.ShapeError):
        te.Tensor(np.zeros((3, 4, 4)))


def test_tensor_default_dtype_is_float32():
    assert te.Tensor(np.zeros((1, 1, 2, 2), np.float64)).dtype == np.float32


@pytest.mark.parametrize("shape", [(4, 3, 2, 2), (4, 3, 3, 5)])
def test_conv_params_reject_non_square_or_even_kernels(shape):
    with pytest.raises(te.ShapeError):
        te.ConvParams(te.Tensor(np.zeros(shape)), te.Tensor(np.zeros((1, 4, 1, 1))), 1)


def test_conv_params_reject_bad_stride():
    with pytest.raises(te.ShapeError):
        te.ConvParams.create(3, 4, 3, stride=3)


def test_conv_params_count():
    assert te.ConvParams.create(3, 16, 3).count == 448


# ---------------------------------------------------------------------------
# conv2d


def test_conv_all_ones_hand_sums():
    p = te.ConvParams.create(1, 1, 3)
    p.weight.data[...] = 1.0
    out = te.conv2d(te.Tensor(np.ones((1, 1, 3, 3))), p).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(0)
    p = te.ConvParams.create(3, 3, 3)
    for c in range(3):
        p.weight.data[c, c, 1, 1] = 1.0
    x = rng.random((2, 3, 5, 6)).astype(np.float32)
    np.testing.assert_array_equal(te.conv2d(te.Tensor(x), p).data, x)


def test_conv_stride_two_shape():
    p = te.ConvParams.create(3, 8, 3, stride=2)
    assert te.conv2d(te.Tensor(np.zeros((1, 3, 4, 4))), p).shape == (1, 8, 2, 2)


def test_conv_channel_mismatch():
    p = te.ConvParams.create(3, 8, 3)
    with pytest.raises(te.ShapeError):
        te.conv2d(te.Tensor(np.zeros((1, 2, 4, 4))), p)


def test_conv_stride_two_needs_even_size():
    p = te.ConvParams.create(3, 8, 3, stride=2)
    with pytest.raises(te.ShapeError):
        te.conv2d(te.Tensor(np.zeros((1, 3, 5, 4))), p)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 4), o=st.integers(1, 4),
    k=st.sampled_from([1, 3, 5]), stride=st.sampled_from([1, 2]),
    hh=st.integers(1, 5), ww=st.integers(1, 5), seed=st.integers(0, 2**16),
)
def test_conv_matches_direct_loops(n, c, o, k, stride, hh, ww, seed):
    rng = np.random.default_rng(seed)
    p = conv_params(rng, c, o, k, stride, dtype=np.float32)
    x = rng.standard_normal((n, c, hh * stride, ww * stride)).astype(np.float32)
    got = te.conv2d(te.Tensor(x), p).data
    want = direct_conv2d(x, p.weight.data, p.bias.data, stride)
    np.testing.assert_allclose(got, want, atol=1e-5)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_backward_matches_finite_differences(stride, k):
    rng = np.random.default_rng(k + stride)
    p = conv_params(rng, 2, 3, k, stride)
    x = f64(rng.standard_normal((2, 2, 6, 4)))
    target = rng.standard_normal((2, 3, 6 // stride, 4 // stride))

    def value():
        with te.no_grad():
            out = te.conv2d(x, p).data
        return 0.5 * float(np.sum((out - target) ** 2))

    out = te.conv2d(x, p)
    root = te.loss("L2", out, te.Tensor(target, dtype=np.float64))
    te.backward(root)
    # the mean-squared loss scales the seed by 2/N
    scale = 2.0 / out.data.size
    want = numeric_grad(value, [x.data, p.weight.data, p.bias.data])
    for got, ref in zip((x.grad, p.weight.grad, p.bias.grad), want):
        np.testing.assert_allclose(got, scale * ref, rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------------------
# elementwise and layout ops


def test_relu_values():
    out = te.relu(te.Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))).data
    np.testing.assert_array_equal(out.ravel(), [0, 0, 2])


def test_relu_identity_on_nonnegative():
    x = np.abs(np.random.default_rng(0).standard_normal((1, 2, 3, 3))).astype(np.float32)
    np.testing.assert_array_equal(te.relu(te.Tensor(x)).data, x)


def test_add_values_and_zero():
    a = te.Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
    b = te.Tensor(np.array([3.0, 4.0]).reshape(1, 1, 1, 2))
    np.testing.assert_array_equal(te.add([a, b]).data.ravel(), [4, 6])
    np.testing.assert_array_equal(te.add([a, te.Tensor(np.zeros((1, 1, 1, 2)))]).data, a.data)


def test_add_shape_mismatch():
    with pytest.raises(te.ShapeError):
        te.add([te.Tensor(np.zeros((1, 1, 2, 2))), te.Tensor(np.zeros((1, 2, 2, 2)))])


def test_concat_shapes():
    a, b = te.Tensor(np.zeros((1, 2, 3, 3))), te.Tensor(np.ones((1, 3, 3, 3)))
    out = te.concat_channels([a, b])
    assert out.shape == (1, 5, 3, 3)
    np.testing.assert_array_equal(te.concat_channels([a]).data, a.data)


def test_concat_spatial_mismatch():
    with pytest.raises(te.ShapeError):
        te.concat_channels([te.Tensor(np.zeros((1, 2, 3, 3))), te.Tensor(np.zeros((1, 2, 3, 4)))])


def test_depth_to_space_convention():
    x = te.Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
    np.testing.assert_array_equal(te.depth_to_space(x, 2).data[0, 0], [[1, 2], [3, 4]])


def test_depth_to_space_shape_and_channel_check():
    assert te.depth_to_space(te.Tensor(np.zeros((1, 8, 2, 2))), 2).shape == (1, 2, 4, 4)
    with pytest.raises(te.ShapeError):
        te.depth_to_space(te.Tensor(np.zeros((1, 6, 2, 2))), 2)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4), seed=st.integers(0, 999))
def test_depth_to_space_inverse(c, h, w, seed):
    x = np.random.default_rng(seed).random((2, 4 * c, h, w)).astype(np.float32)
    y = te.depth_to_space(te.Tensor(x), 2)
    np.testing.assert_array_equal(te.space_to_depth(y, 2).data, x)


def test_depth_to_space_channel_groups_land_on_sub_pixels():
    x = np.arange(8, dtype=np.float32).reshape(1, 8, 1, 1)
    y = te.depth_to_space(te.Tensor(x), 2).data
    # channel 4q + 2di + dj goes to offset (di, dj) of output channel q
    for q in range(2):
        for di in range(2):
            for dj in range(2):
                assert y[0, q, di, dj] == 4 * q + 2 * di + dj


# ---------------------------------------------------------------------------
# losses


@pytest.mark.parametrize("mode", ["L1", "L2"])
def test_loss_zero_on_match(mode):
    x = te.Tensor(np.random.default_rng(0).random((1, 3, 4, 4)))
    value, grad = te.compute_loss(mode, x, x)
    assert value == 0.0
    assert not grad.any()


def test_l2_constant_offset():
    p, t = te.Tensor(np.full((1, 3, 4, 4), 0.75)), te.Tensor(np.full((1, 3, 4, 4), 0.25))
    assert te.compute_loss("L2", p, t)[0] == pytest.approx(0.25)


def test_l1_constant_offset_gradient():
    p, t = te.Tensor(np.full((1, 3, 4, 4), 0.25)), te.Tensor(np.full((1, 3, 4, 4), 0.75))
    value, grad = te.compute_loss("L1", p, t)
    assert value == pytest.approx(0.5)
    np.testing.assert_allclose(grad, -1.0 / 48)


def test_loss_shape_mismatch_and_mode():
    a, b = te.Tensor(np.zeros((1, 3, 4, 4))), te.Tensor(np.zeros((1, 3, 4, 2)))
    with pytest.raises(te.ShapeError):
        te.compute_loss("L1", a, b)
    with pytest.raises(ValueError):
        te.compute_loss("L3", a, a)


# ---------------------------------------------------------------------------
# backward


def test_unused_parameter_gets_zero_gradient():
    rng = np.random.default_rng(0)
    used, unused = conv_params(rng, 2, 2, 3, 1), conv_params(rng, 2, 2, 3, 1)
    x = f64(rng.random((1, 2, 4, 4)), grad=False)
    root = te.loss("L2", te.conv2d(x, used), te.Tensor(np.zeros((1, 2, 4, 4)), dtype=np.float64))
    grads = te.backward(root, params=[used.weight, unused.weight])
    assert grads[used.weight].any()
    assert not grads[unused.weight].any()


def test_two_paths_sum():
    # loss = (x + x + x)^2 on one element, d/dx = 18x
    x = f64(np.full((1, 1, 1, 1), 0.5))
    three = te.add([x, x, x])
    root = te.loss("L2", three, te.Tensor(np.zeros((1, 1, 1, 1)), dtype=np.float64))
    te.backward(root)
    assert x.grad[0, 0, 0, 0] == pytest.approx(9.0)


def test_residual_gradient_is_sum_of_paths():
    rng = np.random.default_rng(3)
    p = conv_params(rng, 2, 2, 3, 1)
    x = f64(rng.random((1, 2, 4, 4)))
    target = te.Tensor(np.zeros((1, 2, 4, 4)), dtype=np.float64)
    out = te.add([x, te.conv2d(x, p)])
    g_out = te.compute_loss("L2", out, target)[1]
    te.backward(te.loss("L2", out, target))
    # identity path passes g_out through; the conv path is linear in x
    conv_path = numeric_grad(
        lambda: float(np.sum(g_out * te.conv2d(te.Tensor(x.data, dtype=np.float64), p).data)), [x.data]
    )[0]
    np.testing.assert_allclose(x.grad, g_out + conv_path, rtol=1e-6, atol=1e-10)


def test_backward_requires_scalar_root():
    x = f64(np.ones((1, 1, 2, 2)))
    with pytest.raises(te.ShapeError):
        te.backward(te.relu(x))


def test_cycle_detection():
    x = f64(np.ones((1, 1, 1, 1)))
    y = te.relu(x)
    z = te.relu(y)
    y.node.inputs = (z,)
    with pytest.raises(te.GraphError):
        te.topological_order(z)


def test_no_grad_builds_no_graph():
    x = f64(np.ones((1, 1, 2, 2)))
    with te.no_grad():
        y = te.relu(x)
    assert y.node is None


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_rejects_float32():
    x = te.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(TypeError):
        te.gradcheck(lambda x: te.loss("L2", x, x), [x])


def test_gradcheck_linear_op_is_exact():
    rng = np.random.default_rng(0)
    a, b = f64(rng.standard_normal((1, 2, 3, 3))), f64(rng.standard_normal((1, 2, 3, 3)))
    w = te.Tensor(rng.standard_normal((1, 2, 3, 3)), dtype=np.float64)
    # L2 against a fixed target is quadratic, so central differences are exact up to rounding
    assert te.gradcheck(lambda a, b: te.loss("L2", te.add([a, b]), w), [a, b]) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_relu_away_from_zero(seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((1, 2, 4, 4))
    v[np.abs(v) < 1e-3] = 0.5
    x = f64(v)
    t = te.Tensor(rng.standard_normal((1, 2, 4, 4)), dtype=np.float64)
    assert te.gradcheck(lambda x: te.loss("L2", te.relu(x), t), [x]) < 1e-4


def test_gradcheck_masks_relu_kink():
    v = np.full((1, 1, 2, 2), 0.7)
    v[0, 0, 0, 0] = 1e-5  # a perturbation of 1e-3 crosses zero
    x = f64(v)
    t = te.Tensor(np.zeros((1, 1, 2, 2)), dtype=np.float64)
    assert te.gradcheck(lambda x: te.loss("L2", te.relu(x), t), [x]) < 1e-6


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride", [1, 2])
def test_gradcheck_conv(seed, stride):
    rng = np.random.default_rng(seed)
    p = conv_params(rng, 3, 2, 3, stride)
    x = f64(rng.standard_normal((1, 3, 4, 6)))
    t = te.Tensor(rng.standard_normal((1, 2, 4 // stride, 6 // stride)), dtype=np.float64)
    assert te.gradcheck(lambda x, w, b: te.loss("L1", te.conv2d(x, p), t), [x, p.weight, p.bias]) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_layout_ops(seed):
    rng = np.random.default_rng(seed)
    a, b = f64(rng.standard_normal((1, 4, 2, 3))), f64(rng.standard_normal((1, 4, 2, 3)))
    t = te.Tensor(rng.standard_normal((1, 2, 4, 6)), dtype=np.float64)

    def fn(a, b):
        return te.loss("L2", te.depth_to_space(te.concat_channels([a, b]), 2), t)

    assert te.gradcheck(fn, [a, b]) < 1e-4
    t2 = te.Tensor(rng.standard_normal((1, 16, 1, 1)), dtype=np.float64)
    c = f64(rng.standard_normal((1, 4, 2, 2)))
    assert te.gradcheck(lambda c: te.loss("L2", te.space_to_depth(c, 2), t2), [c]) < 1e-4
