"""Autodiff engine: forward values against numpy, gradients against central
differences, and graph semantics (accumulation, shared nodes, detach)."""

import numpy as np
import pytest

from patchwalk import ndcore as nd
from patchwalk.ndcore import ShapeError, Tensor, finite_diff_check
from patchwalk.ndcore import ops


def _t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# -- forward values -----------------------------------------------------------

def test_elementwise_forward_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    ta, tb = _t(a), _t(b)
    np.testing.assert_array_equal(nd.add(ta, tb).data, a + b)
    np.testing.assert_array_equal(nd.sub(ta, tb).data, a - b)
    np.testing.assert_array_equal(nd.mul(ta, tb).data, a * b)
    np.testing.assert_array_equal(nd.neg(ta).data, -a)
    np.testing.assert_array_equal(nd.scale(ta, 2.5).data, a * 2.5)
    np.testing.assert_array_equal(nd.add_scalar(ta, -1.5).data, a - 1.5)
    np.testing.assert_allclose(nd.exp(ta).data, np.exp(a), rtol=1e-15)
    np.testing.assert_allclose(nd.tanh(ta).data, np.tanh(a), rtol=1e-15)
    np.testing.assert_allclose(nd.sigmoid(ta).data, 1 / (1 + np.exp(-a)), rtol=1e-14)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        nd.add(_t(np.zeros(3)), _t(np.zeros(4)))
    with pytest.raises(ShapeError):
        nd.mul(_t(np.zeros((2, 2))), _t(np.zeros(4)))


def test_dtype_mismatch_raises():
    a = Tensor(np.zeros(3, dtype=np.float64))
    b = Tensor(np.zeros(3, dtype=np.float32))
    with pytest.raises(ShapeError):
        nd.add(a, b)


def test_sigmoid_extreme_arguments_stay_finite():
    x = _t([-1000.0, 1000.0])
    out = nd.sigmoid(x).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-300)


# -- gradients against central differences ------------------------------------

def test_smooth_elementwise_grads():
    rng = np.random.default_rng(1)
    a = _t(rng.standard_normal(6))
    b = _t(rng.standard_normal(6))

    def f():
        return nd.sum_all(nd.mul(nd.sigmoid(a), nd.tanh(b)))

    assert finite_diff_check(f, {"a": a, "b": b}) < 1e-8


def test_log_exp_grads():
    rng = np.random.default_rng(2)
    a = _t(rng.uniform(0.5, 2.0, 5))

    def f():
        return nd.sum_all(nd.log(nd.exp(a)))

    assert finite_diff_check(f, {"a": a}) < 1e-8


def test_leaky_relu_grad_is_exact_slope():
    x = _t([-2.0, -0.5, 0.5, 3.0])
    y = nd.sum_all(nd.leaky_relu(x, 0.2))
    y.backward()
    np.testing.assert_array_equal(x.grad, [0.2, 0.2, 1.0, 1.0])


def test_softmax_normalization_and_shift_invariance():
    rng = np.random.default_rng(3)
    z = rng.standard_normal(9) * 20.0
    p = nd.softmax(_t(z)).data
    assert abs(p.sum() - 1.0) < 1e-12
    p_shift = nd.softmax(_t(z + 123.4)).data
    np.testing.assert_allclose(p, p_shift, atol=1e-14)


def test_softmax_grad():
    rng = np.random.default_rng(4)
    z = _t(rng.standard_normal(7))
    c = rng.standard_normal(7)  # fixed projection keeps the loss scalar

    def f():
        return nd.sum_all(nd.mul(nd.softmax(z), Tensor(c)))

    assert finite_diff_check(f, {"z": z}) < 1e-8


def test_softmax_rejects_non_vector():
    with pytest.raises(ShapeError):
        nd.softmax(_t(np.zeros((2, 3))))


# -- reductions and shape surgery ----------------------------------------------

def test_sum_mean_grads_are_exact():
    a = _t(np.arange(12, dtype=np.float64).reshape(3, 4))
    nd.sum_all(a).backward()
    np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
    a.zero_grad()
    nd.mean_all(a).backward()
    np.testing.assert_array_equal(a.grad, np.full((3, 4), 1.0 / 12.0))


def test_reshape_round_trips_gradient():
    a = _t(np.arange(6, dtype=np.float64))
    y = nd.reshape(a, (2, 3))
    nd.sum_all(nd.mul(y, y)).backward()
    np.testing.assert_allclose(a.grad, 2.0 * a.data)


def test_concat_splits_gradient():
    a = _t([1.0, 2.0])
    b = _t([3.0, 4.0, 5.0])
    y = nd.concat([a, b], axis=0)
    y.backward(np.array([10.0, 20.0, 30.0, 40.0, 50.0]))
    np.testing.assert_array_equal(a.grad, [10.0, 20.0])
    np.testing.assert_array_equal(b.grad, [30.0, 40.0, 50.0])


def test_crop_scatters_gradient_into_zero_field():
    a = _t(np.zeros((4, 5)))
    y = nd.crop(a, (1, 2), (2, 2))
    y.backward(np.ones((2, 2)))
    want = np.zeros((4, 5))
    want[1:3, 2:4] = 1.0
    np.testing.assert_array_equal(a.grad, want)


def test_crop_outside_raises():
    with pytest.raises(ShapeError):
        nd.crop(_t(np.zeros((4, 4))), (3, 3), (2, 2))


def test_pick_gradient_is_one_hot():
    a = _t([5.0, 6.0, 7.0])
    y = nd.pick(a, 1)
    assert float(y.data) == 6.0
    y.backward(np.asarray(3.0))
    np.testing.assert_array_equal(a.grad, [0.0, 3.0, 0.0])


# -- affine layers ----------------------------------------------------------------

def test_fully_connected_matches_matmul():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(4)
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    out = nd.fully_connected(_t(x), _t(w), _t(b))
    np.testing.assert_allclose(out.data, w @ x + b, rtol=1e-15)


def test_fully_connected_grads():
    rng = np.random.default_rng(6)
    x = _t(rng.standard_normal(4))
    w = _t(rng.standard_normal((3, 4)))
    b = _t(rng.standard_normal(3))

    def f():
        return nd.sum_all(nd.tanh(nd.fully_connected(x, w, b)))

    assert finite_diff_check(f, {"x": x, "w": w, "b": b}) < 1e-8


def test_fully_connected_shape_errors():
    with pytest.raises(ShapeError):
        nd.fully_connected(_t(np.zeros(4)), _t(np.zeros((3, 5))))
    with pytest.raises(ShapeError):
        nd.fully_connected(_t(np.zeros(4)), _t(np.zeros((3, 4))), _t(np.zeros(2)))


def test_add_channel_bias_grad_sums_spatially():
    rng = np.random.default_rng(7)
    x = _t(rng.standard_normal((2, 3, 4)))
    b = _t(np.zeros(2))
    g = rng.standard_normal((2, 3, 4))
    nd.add_channel_bias(x, b).backward(g)
    np.testing.assert_array_equal(x.grad, g)
    np.testing.assert_allclose(b.grad, g.sum(axis=(1, 2)), rtol=1e-15)


# -- convolution -------------------------------------------------------------------

def _conv_loop(x, k, stride, pad):
    """Reference cross-correlation, written as the plainest possible loop."""
    co, ci, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                win = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(win * k[o])
    return out


@pytest.mark.parametrize("shape,kshape,stride,pad", [
    ((1, 8, 8), (2, 1, 3, 3), 1, 1),
    ((2, 9, 11), (3, 2, 3, 3), 2, 1),
    ((3, 7, 7), (1, 3, 5, 5), 2, 2),
])
def test_conv2d_matches_loop_oracle(shape, kshape, stride, pad):
    rng = np.random.default_rng(8)
    x = rng.standard_normal(shape)
    k = rng.standard_normal(kshape)
    got = nd.conv2d(_t(x), _t(k), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, _conv_loop(x, k, stride, pad), atol=1e-12)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        nd.conv2d(_t(np.zeros((2, 4, 4))), _t(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        nd.conv2d(_t(np.zeros((1, 2, 2))), _t(np.zeros((1, 1, 5, 5))), pad=0)


def test_conv_deconv_adjoint_identity():
    # <conv(x;K), y> == <x, deconv(y;K)> for the same kernel array, which is
    # the property the training graph relies on when the enhancer upsamples
    rng = np.random.default_rng(9)
    for _ in range(5):
        x = rng.standard_normal((2, 7, 7))
        k = rng.standard_normal((3, 2, 3, 3))
        y = rng.standard_normal((3, 4, 4))
        lhs = float(np.sum(nd.conv2d(_t(x), _t(k), stride=2, pad=1).data * y))
        rhs = float(np.sum(x * nd.deconv2d(_t(y), _t(k), stride=2, pad=1).data))
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_deconv2d_output_extent():
    x = _t(np.zeros((1, 5, 6)))
    k = _t(np.zeros((1, 2, 3, 3)))
    out = nd.deconv2d(x, k, stride=2, pad=0)
    assert out.data.shape == (2, 2 * 4 + 3, 2 * 5 + 3)


def test_conv2d_grads():
    rng = np.random.default_rng(10)
    x = _t(rng.standard_normal((2, 6, 6)))
    k = _t(rng.standard_normal((2, 2, 3, 3)) * 0.5)

    def f():
        return nd.mean_all(nd.tanh(nd.conv2d(x, k, stride=2, pad=1)))

    assert finite_diff_check(f, {"x": x, "k": k}) < 1e-7


def test_deconv2d_grads():
    rng = np.random.default_rng(11)
    x = _t(rng.standard_normal((2, 4, 4)))
    k = _t(rng.standard_normal((2, 3, 3, 3)) * 0.5)

    def f():
        return nd.mean_all(nd.tanh(nd.deconv2d(x, k, stride=2, pad=0)))

    assert finite_diff_check(f, {"x": x, "k": k}) < 1e-7


# -- GRU cell -----------------------------------------------------------------------

def test_gru_zero_parameters_halve_the_state():
    # all-zero weights give r = z = 1/2 and candidate n = tanh(0) = 0, so the
    # update (1-z)*n + z*h collapses to h/2 exactly
    rng = np.random.default_rng(12)
    p = nd.gru_param_init(rng, 3, 4, np.float64)
    for t in p.tensors().values():
        t.data = np.zeros_like(t.data)
    h = rng.standard_normal(4)
    out = nd.gru_cell(_t(rng.standard_normal(3)), _t(h), p)
    np.testing.assert_allclose(out.data, 0.5 * h, rtol=1e-15)


def test_gru_grads():
    rng = np.random.default_rng(13)
    p = nd.gru_param_init(rng, 5, 4, np.float64)
    for t in p.tensors().values():
        t.data = t.data + 0.2 * rng.standard_normal(t.data.shape)
    x = _t(rng.standard_normal(5))
    h = _t(rng.standard_normal(4))

    def f():
        return nd.sum_all(nd.gru_cell(x, h, p))

    params = dict(p.tensors())
    params["x"] = x
    params["h"] = h
    assert finite_diff_check(f, params) < 1e-7


# -- graph semantics ------------------------------------------------------------------

def test_gradients_accumulate_across_backward_calls():
    a = _t([2.0, 3.0])
    y = nd.sum_all(nd.mul(a, a))
    y.backward()
    first = a.grad.copy()
    y.backward()
    np.testing.assert_array_equal(a.grad, 2.0 * first)


def test_shared_subgraph_counts_every_path():
    x = _t([3.0])
    u = nd.add(x, x)          # u = 2x
    v = nd.mul(u, u)          # v = 4x^2, dv/dx = 8x
    v.backward()
    np.testing.assert_allclose(x.grad, [24.0])


def test_scalar_seed_scales_the_sweep():
    x = _t([1.0, 2.0])
    y = nd.sum_all(nd.mul(x, x))
    y.backward(np.asarray(-0.5))
    np.testing.assert_allclose(x.grad, [-1.0, -2.0])


def test_detach_blocks_gradient_flow():
    x = _t([1.5])
    y = nd.mul(x.detach(), x)
    y.backward()
    np.testing.assert_allclose(x.grad, [1.5])  # only the live factor


def test_constant_inputs_produce_no_graph():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones(3))
    out = nd.add(a, b)
    assert not out.requires_grad


def test_finite_check_traps_bad_values():
    nd.set_check_finite(True)
    try:
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            nd.log(Tensor(np.array([-1.0])))
    finally:
        nd.set_check_finite(False)


def test_gradcheck_flags_a_corrupted_backward():
    rng = np.random.default_rng(14)
    w = _t(rng.standard_normal(5))

    def f():
        return nd.sum_all(nd.mul(w, w))

    assert finite_diff_check(f, {"w": w}) < 1e-9

    def f_doubled():
        loss = f()
        # identity node whose backward doubles the gradient on purpose
        return ops._make(np.array(loss.data, copy=True), (loss,),
                         lambda g: ((loss, 2.0 * g),))

    err = finite_diff_check(f_doubled, {"w": w})
    assert 0.2 < err < 0.45  # |2g - g| / (|2g| + |g|) = 1/3
