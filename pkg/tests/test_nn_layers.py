"""Layer kernels against naive loop oracles and finite differences."""

import numpy as np
import pytest
from scipy.special import expit

from posekd.nn.layers import Conv1x1, Conv2d, Dense, ReLU, Sigmoid, Upsample2x


def conv_oracle(x, w, b, stride, pad):
    # Quadruple-loop cross-correlation; the reference the fast kernel must match.
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    y = np.zeros((B, O, ho, wo))
    for n in range(B):
        for o in range(O):
            for r in range(ho):
                for c in range(wo):
                    patch = xp[n, :, r * stride : r * stride + kh, c * stride : c * stride + kw]
                    y[n, o, r, c] = np.sum(patch * w[o]) + b[o]
    return y


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("ksize", [1, 3])
def test_conv2d_forward_matches_loop_oracle(rng, stride, ksize):
    layer = Conv2d(3, 4, ksize, stride=stride)
    params = layer.init_params(rng)
    x = rng.standard_normal((2, 3, 8, 6))
    got = layer.forward(x, params)
    want = conv_oracle(x, params["w"], params["b"], stride, layer.padding)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv1x1_is_channel_mixing_only(rng):
    layer = Conv1x1(4, 3)
    params = layer.init_params(rng)
    x = rng.standard_normal((2, 4, 5, 7))
    got = layer.forward(x, params)
    want = np.einsum("oc,bchw->bohw", params["w"][:, :, 0, 0], x) + params["b"][None, :, None, None]
    np.testing.assert_allclose(got, want, atol=1e-12)


def layer_fd_check(layer, params, x, rng, step=1e-6, tol=1e-6):
    """Scalar probe loss sum(y * g) checks gx and every param grad."""
    g = rng.standard_normal(layer.forward(x, params).shape)
    gx, gp = layer.backward(x, params, g)

    num = np.zeros_like(x)
    flat, nflat = x.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = np.sum(layer.forward(x, params) * g)
        flat[i] = orig - step
        lo = np.sum(layer.forward(x, params) * g)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2 * step)
    np.testing.assert_allclose(gx, num, atol=tol)

    for name, arr in params.items():
        num_p = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num_p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = np.sum(layer.forward(x, params) * g)
            flat[i] = orig - step
            lo = np.sum(layer.forward(x, params) * g)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * step)
        np.testing.assert_allclose(gp[name], num_p, atol=tol)


@pytest.mark.parametrize(
    "layer,in_shape",
    [
        (Conv2d(2, 3, 3, stride=1), (2, 2, 4, 4)),
        (Conv2d(2, 2, 3, stride=2), (2, 2, 4, 4)),
        (Conv1x1(3, 2), (2, 3, 3, 3)),
        (Dense(12, 5), (2, 3, 2, 2)),
        (Upsample2x(), (2, 2, 3, 3)),
    ],
)
def test_layer_backward_matches_finite_differences(rng, layer, in_shape):
    params = layer.init_params(rng)
    x = rng.standard_normal(in_shape)
    layer_fd_check(layer, params, x, rng)


def test_relu_backward_masks_negative_inputs(rng):
    layer = ReLU()
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 0.1] += 0.2  # keep away from the kink where FD is undefined
    layer_fd_check(layer, {}, x, rng)
    g = np.ones_like(x)
    gx, _ = layer.backward(x, {}, g)
    assert (gx[x <= 0] == 0).all()
    assert (gx[x > 0] == 1).all()


def test_sigmoid_forward_backward(rng):
    layer = Sigmoid()
    x = rng.standard_normal((1, 2, 3, 3))
    np.testing.assert_allclose(layer.forward(x, {}), expit(x), atol=1e-15)
    layer_fd_check(layer, {}, x, rng)


def test_upsample2x_repeats_pixels(rng):
    layer = Upsample2x()
    x = rng.standard_normal((1, 1, 2, 2))
    y = layer.forward(x, {})
    assert y.shape == (1, 1, 4, 4)
    assert (y[0, 0, :2, :2] == x[0, 0, 0, 0]).all()
    assert (y[0, 0, 2:, 2:] == x[0, 0, 1, 1]).all()


def test_forward_is_pure(rng):
    layer = Conv2d(2, 2, 3)
    params = layer.init_params(rng)
    x = rng.standard_normal((1, 2, 4, 4))
    x0, w0 = x.copy(), params["w"].copy()
    y1 = layer.forward(x, params)
    y2 = layer.forward(x, params)
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(x, x0)
    np.testing.assert_array_equal(params["w"], w0)


def test_conv2d_rejects_even_kernel_and_bad_stride():
    with pytest.raises(ValueError):
        Conv2d(1, 1, 2)
    with pytest.raises(ValueError):
        Conv2d(1, 1, 3, stride=0)
    with pytest.raises(ValueError):
        Conv2d(0, 1, 3)


def test_out_shapes():
    assert Conv2d(3, 8, 3, stride=2).out_shape((3, 64, 48)) == (8, 32, 24)
    assert Conv2d(8, 5, 3).out_shape((8, 32, 24)) == (5, 32, 24)
    assert Conv1x1(4, 3).out_shape((4, 64, 48)) == (3, 64, 48)
    assert Dense(6, 2).out_shape((6,)) == (2,)
    assert Upsample2x().out_shape((5, 16, 12)) == (5, 32, 24)
    with pytest.raises(ValueError):
        Conv2d(3, 8, 3).out_shape((4, 64, 48))
