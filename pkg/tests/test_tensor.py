import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from windcast.errors import GraphError, NumericError, ShapeError
from windcast.tensor import (
    Tensor,
    batchnorm,
    conv3d,
    conv3d_naive,
    grad_check,
    mul,
    pad_crop_spatial,
    relu,
    sigmoid,
    spatial_mean,
    upsample2x_spatial,
)
from windcast.tensor import kernels
from windcast.tensor.core import make_node


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def rand(rng, shape, lo=-1.0, hi=1.0, dtype=np.float64):
    return rng.uniform(lo, hi, shape).astype(dtype)


# conv3d


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = rand(rng, (2, 1, 3, 4, 5), dtype=np.float32)
    w = np.ones((1, 1, 1, 1, 1), np.float32)
    out = conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_kernel_counts_27c():
    c = 1.75
    x = np.full((1, 1, 5, 5, 5), c)
    out = conv3d(Tensor(x), Tensor(np.ones((1, 1, 3, 3, 3))), padding=1).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1, 1:-1], 27 * c)
    # a corner sees only the 2x2x2 in-bounds block
    assert out[0, 0, 0, 0, 0] == pytest.approx(8 * c)


def test_conv_matches_naive_small_case():
    rng = np.random.default_rng(2)
    x = rand(rng, (1, 2, 4, 5, 5), -0.5, 0.5, np.float32)
    w = rand(rng, (3, 2, 3, 3, 3), -0.5, 0.5, np.float32)
    b = rand(rng, (3,), -0.5, 0.5, np.float32)
    fast = conv3d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    ref = conv3d_naive(x, w, b, padding=1)
    assert np.max(np.abs(fast - ref)) <= 1e-6


@pytest.mark.parametrize("stride,padding", [(1, 1), ((1, 2, 2), 1), (2, 0), ((1, 2, 1), (0, 1, 2))])
def test_backends_agree_bitwise(stride, padding):
    if "compiled" not in kernels.available_backends():
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(3)
    x = rand(rng, (2, 3, 5, 7, 6), dtype=np.float32)
    w = rand(rng, (4, 3, 3, 3, 3), dtype=np.float32)
    fc, cc = kernels.conv3d_forward(x, w, None, stride, padding, backend="compiled")
    fp, cp = kernels.conv3d_forward(x, w, None, stride, padding, backend="python")
    np.testing.assert_array_equal(fc, fp)
    np.testing.assert_array_equal(cc, cp)
    g = rand(rng, fc.shape, dtype=np.float32)
    dc = kernels.conv3d_backward(g, x.shape, w, cc, stride, padding, backend="compiled")
    dp = kernels.conv3d_backward(g, x.shape, w, cp, stride, padding, backend="python")
    for a, b in zip(dc, dp):
        np.testing.assert_array_equal(a, b)


def test_same_padding_preserves_dims():
    x = Tensor(np.zeros((1, 2, 6, 7, 9)))
    out = conv3d(x, Tensor(np.zeros((3, 2, 3, 5, 3))), padding=(1, 2, 1))
    assert out.shape == (1, 3, 6, 7, 9)


def test_conv_shape_error_prints_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4, 4\).*\(3, 5, 3, 3, 3\)"):
        conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((3, 5, 3, 3, 3))))


def test_conv_gradients():
    rng = np.random.default_rng(4)
    x, w, b = t64(rand(rng, (2, 2, 3, 5, 4))), t64(rand(rng, (3, 2, 3, 3, 3))), t64(rand(rng, (3,)))
    g = rand(rng, (2, 3, 3, 3, 2))
    err = grad_check(lambda: (conv3d(x, w, b, stride=(1, 2, 2), padding=1) * g).sum(), [x, w, b])
    assert err <= 1e-6


# batchnorm


def test_batchnorm_standardises_channels():
    rng = np.random.default_rng(5)
    x = rng.normal(3.0, 2.5, (4, 3, 5, 6, 6))
    rm, rv = np.zeros(3), np.ones(3)
    out = batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3, 4))) <= 1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3, 4)), 1.0, atol=1e-4)
    # running stats moved 10% toward the batch statistics
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3, 4)))


def test_batchnorm_zero_gamma_gives_beta():
    rng = np.random.default_rng(6)
    beta = np.array([0.5, -2.0])
    out = batchnorm(Tensor(rng.normal(size=(2, 2, 3, 3, 3))), Tensor(np.zeros(2)), Tensor(beta),
                    np.zeros(2), np.ones(2), training=True).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta.reshape(1, 2, 1, 1, 1), out.shape))


def test_batchnorm_infer_uses_running_stats():
    x = np.full((1, 1, 2, 2, 2), 5.0)
    out = batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                    np.array([1.0]), np.array([4.0 - 1e-5]), training=False).data
    np.testing.assert_allclose(out, 2.0)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(training):
    rng = np.random.default_rng(7)
    x = t64(rng.normal(1.0, 2.0, (2, 3, 3, 4, 4)))
    gamma, beta = t64(rng.uniform(0.5, 1.5, 3)), t64(rng.normal(size=3))
    g = rng.normal(size=x.shape)
    rm, rv = np.zeros(3), np.ones(3)
    err = grad_check(lambda: (batchnorm(x, gamma, beta, rm.copy(), rv.copy(), training) * g).sum(),
                     [x, gamma, beta])
    assert err <= 1e-4


# elementwise and structural


def test_sigmoid_zero_and_range():
    assert sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]
    s = sigmoid(Tensor(np.linspace(-30, 30, 101))).data
    assert np.all((s > 0) & (s < 1))


def test_sigmoid_large_inputs_do_not_overflow():
    s = sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert s[0] >= 0 and s[1] == 1.0


def test_spatial_mean_of_constant():
    out = spatial_mean(Tensor(np.full((2, 3, 4, 5, 6), -1.25))).data
    assert out.shape == (2, 3, 4, 1, 1)
    np.testing.assert_array_equal(out, -1.25)


def test_upsample_then_avgpool_is_identity():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 4, 5, 7))
    up = upsample2x_spatial(Tensor(x)).data
    assert up.shape == (2, 3, 4, 10, 14)
    pooled = up.reshape(2, 3, 4, 5, 2, 7, 2).mean(axis=(4, 6))
    np.testing.assert_array_equal(pooled, x)


def test_pad_crop_round_trip():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 1, 2, 9, 9))
    padded = pad_crop_spatial(Tensor(x), 12, 12).data
    assert padded.shape == (1, 1, 2, 12, 12)
    assert padded[..., 0, :].sum() == 0
    back = pad_crop_spatial(Tensor(padded), 9, 9).data
    np.testing.assert_array_equal(back, x)


def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeError):
        mul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


def test_non_finite_forward_raises():
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        mul(Tensor(np.array([1e308])), Tensor(np.array([1e308])))


def test_scalar_operands_keep_float32():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    assert (x * 0.5 + 1.0).dtype == np.float32


# backward


def test_backward_of_sum_is_ones():
    x = t64(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_square_is_2x():
    x = t64(np.array([-1.5, 0.0, 2.0]))
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_second_backward_is_an_error():
    x = t64(np.ones(3))
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_non_scalar_backward_is_an_error():
    with pytest.raises(GraphError):
        (t64(np.ones(3)) * 2.0).backward()


def test_shared_subexpression_accumulates():
    x = t64(np.array([3.0]))
    y = x * x
    (y + y * x).sum().backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [6.0 + 27.0])


# grad_check itself


def test_grad_check_quadratic():
    rng = np.random.default_rng(10)
    x = t64(rng.normal(size=(4, 5)))
    assert grad_check(lambda: (x * x * 3.0).sum(), [x]) <= 1e-9


def test_grad_check_sigmoid_sum():
    rng = np.random.default_rng(11)
    x = t64(rng.normal(size=(3, 7)))
    assert grad_check(lambda: sigmoid(x).sum(), [x]) <= 1e-7


def _wrong_square(x):
    def backward(g):
        return (g * 3.0 * x.data,)  # true derivative is 2x
    return make_node(x.data ** 2, (x,), backward, "wrong_square")


def test_grad_check_flags_wrong_backward():
    x = t64(np.linspace(0.5, 2.0, 6))
    assert grad_check(lambda: _wrong_square(x).sum(), [x]) > 1e-2


def test_grad_check_samples_large_tensors():
    x = t64(np.random.default_rng(12).normal(size=5000))
    calls = []

    def f():
        calls.append(1)
        return (x * x).sum()

    grad_check(f, [x], n_samples=50)
    assert len(calls) == 1 + 2 * 50


_shapes = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3),
                    st.integers(2, 4), st.integers(2, 4))


@settings(max_examples=25, deadline=None)
@given(shape=_shapes, seed=st.integers(0, 2**16))
def test_every_op_passes_grad_check(shape, seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=shape))
    y = t64(rng.normal(size=(1, shape[1], 1, 1, 1)))
    # keep relu inputs away from the kink
    xr = t64(np.where(rng.random(shape) < 0.5, -1, 1) * rng.uniform(0.1, 1.0, shape))
    g = rng.normal(size=shape)
    pc_shape = shape[:3] + (shape[3] + 1, max(1, shape[4] - 1))
    gpc = rng.normal(size=pc_shape)
    cases = [
        (lambda: ((x + y) * g).sum(), [x, y]),
        (lambda: ((x - y) * g).sum(), [x, y]),
        (lambda: (x * y * g).sum(), [x, y]),
        (lambda: (sigmoid(x) * g).sum(), [x]),
        (lambda: (relu(xr) * g).sum(), [xr]),
        (lambda: (spatial_mean(x) * x).sum(), [x]),
        (lambda: (upsample2x_spatial(x) * upsample2x_spatial(t64(g, False))).sum(), [x]),
        (lambda: (pad_crop_spatial(x, *pc_shape[3:]) * gpc).sum(), [x]),
    ]
    for f, params in cases:
        assert grad_check(f, params) <= 1e-4
