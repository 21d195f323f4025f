import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demsr.exceptions import ContractError, DimensionError
from demsr.ops import (
    conv2d,
    depthwise_conv2d,
    global_avg_pool,
    leaky_relu,
    mse_loss,
    pixel_shuffle,
    pixel_unshuffle,
    se_block,
    sigmoid,
)
from demsr.tensor import Graph, Tensor, backward, grad_check


def T(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype=dtype))


def naive_conv(x, w, b, stride, pad):
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else b[0, o, 0, 0]
                    for c in range(ci):
                        for di in range(k):
                            for dj in range(k):
                                s += w[o, c, di, dj] * xp[a, c, i * stride + di, j * stride + dj]
                    out[a, o, i, j] = s
    return out


# conv2d ---------------------------------------------------------------------


def test_conv_1x1_identity(rng):
    x = rng.normal(size=(2, 1, 5, 4))
    out = conv2d(T(x), T(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_hand_sum():
    out = conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_keeps_25x25():
    out = conv2d(T(np.zeros((1, 3, 25, 25))), T(np.zeros((5, 3, 3, 3))), stride=1, padding=1)
    assert out.shape == (1, 5, 25, 25)


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (5, 1, 2), (3, 1, 0)])
def test_conv_matches_naive_loop(rng, k, stride, pad):
    h = 7 if (7 + 2 * pad - k) % stride == 0 else 8
    x = rng.normal(size=(2, 3, h, h))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=(1, 4, 1, 1))
    out = conv2d(T(x), T(w), T(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(out, naive_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_same_padding_preserves_dims(k):
    out = conv2d(T(np.zeros((1, 2, 9, 11))), T(np.zeros((3, 2, k, k))), padding=(k - 1) // 2)
    assert out.shape == (1, 3, 9, 11)


def test_conv_errors():
    with pytest.raises(DimensionError, match="input channels"):
        conv2d(T(np.zeros((1, 2, 5, 5))), T(np.zeros((1, 3, 3, 3))))
    with pytest.raises(DimensionError, match="stride"):
        conv2d(T(np.zeros((1, 1, 6, 6))), T(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
    with pytest.raises(DimensionError, match="odd"):
        conv2d(T(np.zeros((1, 1, 6, 6))), T(np.zeros((1, 1, 2, 2))))


# depthwise --------------------------------------------------------------------


def test_depthwise_per_channel_scaling():
    w = np.array([2.0, 3.0]).reshape(2, 1, 1, 1)
    out = depthwise_conv2d(T(np.ones((1, 2, 3, 3))), T(w)).data
    assert np.all(out[0, 0] == 2) and np.all(out[0, 1] == 3)


def test_depthwise_equals_block_diagonal_dense(rng):
    c = 4
    x = rng.normal(size=(2, c, 6, 5))
    w = rng.normal(size=(c, 1, 3, 3))
    b = rng.normal(size=(1, c, 1, 1))
    dense = np.zeros((c, c, 3, 3))
    for g in range(c):
        dense[g, g] = w[g, 0]
    got = depthwise_conv2d(T(x), T(w), T(b), 1, 1).data
    ref = conv2d(T(x), T(dense), T(b), 1, 1).data
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-12)


def test_depthwise_keeps_25x25():
    assert depthwise_conv2d(T(np.zeros((1, 6, 25, 25))), T(np.zeros((6, 1, 3, 3))), None, 1, 1).shape == (1, 6, 25, 25)


def test_depthwise_channel_mismatch():
    with pytest.raises(DimensionError):
        depthwise_conv2d(T(np.zeros((1, 3, 5, 5))), T(np.zeros((2, 1, 3, 3))))


# activations ------------------------------------------------------------------


def test_leaky_relu_values():
    x = np.abs(np.arange(6.0)).reshape(1, 1, 2, 3)
    np.testing.assert_array_equal(leaky_relu(T(x), 0.2).data, x)
    assert leaky_relu(T(np.full((1, 1, 1, 1), -2.0)), 0.2).item() == pytest.approx(-0.4)


def test_leaky_relu_gradient_negative_side():
    x = T(np.full((1, 1, 1, 1), -1.0))
    x.requires_grad = True
    with Graph() as g:
        y = leaky_relu(x, 0.2)
    backward(y, g)
    eps = 1e-6
    fd = (leaky_relu(T(np.full((1, 1, 1, 1), -1.0 + eps)), 0.2).item()
          - leaky_relu(T(np.full((1, 1, 1, 1), -1.0 - eps)), 0.2).item()) / (2 * eps)
    assert x.grad.item() == pytest.approx(0.2)
    assert fd == pytest.approx(0.2, rel=1e-9)


def test_leaky_relu_subgradient_at_zero_is_one():
    x = T(np.zeros((1, 1, 1, 1)))
    x.requires_grad = True
    with Graph() as g:
        y = leaky_relu(x, 0.2)
    backward(y, g)
    assert x.grad.item() == 1.0


def test_sigmoid_values():
    assert sigmoid(T(np.zeros((1, 1, 1, 1)))).item() == 0.5
    with np.errstate(over="raise"):
        assert abs(sigmoid(T(np.full((1, 1, 1, 1), 40.0))).item() - 1.0) < 1e-12
        assert sigmoid(T(np.full((1, 1, 1, 1), -800.0))).item() >= 0.0


def test_sigmoid_grad_at_one():
    assert grad_check(sigmoid, T(np.ones((1, 1, 1, 1))), 1e-5) < 1e-8


# pooling and SE -----------------------------------------------------------------


def test_global_avg_pool_values(rng):
    assert global_avg_pool(T(np.full((1, 2, 3, 3), 4.5))).data.ravel().tolist() == [4.5, 4.5]
    assert global_avg_pool(T(np.array([[1, 3], [5, 7]]).reshape(1, 1, 2, 2))).item() == 4.0
    x = rng.normal(size=(2, 3, 4, 5))
    ref = np.zeros((2, 3, 1, 1))
    for a in range(2):
        for c in range(3):
            s = 0.0
            for i in range(4):
                for j in range(5):
                    s += x[a, c, i, j]
            ref[a, c] = s / 20
    np.testing.assert_allclose(global_avg_pool(T(x)).data, ref, rtol=1e-6)


def _se_params(c, cr, zero=True, rng=None):
    if zero:
        return (T(np.zeros((cr, c, 1, 1))), T(np.zeros((1, cr, 1, 1))), T(np.zeros((c, cr, 1, 1))), T(np.zeros((1, c, 1, 1))))
    return tuple(T(rng.normal(size=s)) for s in [(cr, c, 1, 1), (1, cr, 1, 1), (c, cr, 1, 1), (1, c, 1, 1)])


def test_se_zero_weights_halve(rng):
    x = rng.normal(size=(2, 4, 3, 3))
    np.testing.assert_allclose(se_block(T(x), *_se_params(4, 1)).data, x / 2)


def test_se_open_gate(rng):
    x = rng.normal(size=(1, 4, 3, 3))
    wr, br, we, _ = _se_params(4, 1)
    out = se_block(T(x), wr, br, we, T(np.full((1, 4, 1, 1), 40.0))).data
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_se_matches_composed_oracle(rng):
    x = rng.normal(size=(2, 6, 4, 4))
    wr, br, we, be = (rng.normal(size=s) for s in [(3, 6, 1, 1), (1, 3, 1, 1), (6, 3, 1, 1), (1, 6, 1, 1)])
    pooled = x.mean(axis=(2, 3))  # (n, c)
    z = pooled @ wr[:, :, 0, 0].T + br[0, :, 0, 0]
    z = np.where(z >= 0, z, 0.2 * z)
    gate = 1.0 / (1.0 + np.exp(-(z @ we[:, :, 0, 0].T + be[0, :, 0, 0])))
    ref = x * gate[:, :, None, None]
    got = se_block(T(x), T(wr), T(br), T(we), T(be)).data
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_se_output_bounded_by_input(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 4, 3, 3))
    out = se_block(T(x), *_se_params(4, 2, zero=False, rng=rng)).data
    assert np.all(np.abs(out) <= np.abs(x))


def test_se_channel_mismatch():
    with pytest.raises(DimensionError):
        se_block(T(np.zeros((1, 4, 3, 3))), *_se_params(3, 1))


# pixel shuffle ---------------------------------------------------------------------


def shuffle_oracle(x, r):
    n, crr, h, w = x.shape
    c = crr // (r * r)
    out = np.empty((n, c, h * r, w * r), dtype=x.dtype)
    for a in range(n):
        for oc in range(c):
            for oy in range(h * r):
                for ox in range(w * r):
                    out[a, oc, oy, ox] = x[a, oc * r * r + (oy % r) * r + (ox % r), oy // r, ox // r]
    return out


def test_shuffle_r1_identity(rng):
    x = rng.normal(size=(1, 3, 4, 4))
    np.testing.assert_array_equal(pixel_shuffle(T(x), 1).data, x)
    np.testing.assert_array_equal(pixel_unshuffle(T(x), 1).data, x)


def test_shuffle_four_channels_hand():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(pixel_shuffle(T(x), 2).data[0, 0], [[1, 2], [3, 4]])


def test_unshuffle_inverts_shuffle_bitwise(rng):
    x = rng.normal(size=(1, 32, 5, 5)).astype(np.float32)
    back = pixel_unshuffle(pixel_shuffle(T(x, np.float32), 4), 4).data
    assert back.tobytes() == x.tobytes()
    y = rng.normal(size=(1, 2, 8, 8))
    assert pixel_shuffle(pixel_unshuffle(T(y), 2), 2).data.tobytes() == y.tobytes()


def test_unshuffle_matches_oracle(rng):
    y = rng.normal(size=(2, 2, 6, 4))
    # unshuffle is the inverse of the brute-force shuffle formula
    got = pixel_unshuffle(T(y), 2).data
    np.testing.assert_array_equal(shuffle_oracle(got, 2), y)


def test_shuffle_errors():
    with pytest.raises(DimensionError):
        pixel_shuffle(T(np.zeros((1, 6, 2, 2))), 2)
    with pytest.raises(DimensionError):
        pixel_unshuffle(T(np.zeros((1, 1, 5, 4))), 2)


# loss ------------------------------------------------------------------------------


def test_mse_values():
    p = T(np.zeros((1, 1, 1, 2)))
    assert mse_loss(p, np.zeros((1, 1, 1, 2))).item() == 0.0
    assert mse_loss(p, np.array([1.0, 3.0]).reshape(1, 1, 1, 2)).item() == 5.0


def test_mse_gradient_fd(rng):
    target = rng.normal(size=(2, 1, 3, 3))
    assert grad_check(lambda t: mse_loss(t, target), T(rng.normal(size=(2, 1, 3, 3))), 1e-5) < 1e-6


def test_mse_errors():
    with pytest.raises(DimensionError):
        mse_loss(T(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))
    tgt = T(np.zeros((1, 1, 2, 2)))
    tgt.requires_grad = True
    with pytest.raises(ContractError):
        mse_loss(T(np.zeros((1, 1, 2, 2))), tgt)


# finiteness -----------------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_ops_keep_finite_inputs_finite(seed):
    rng = np.random.default_rng(seed)
    x = T(rng.normal(scale=50.0, size=(1, 4, 4, 4)))
    outs = [
        conv2d(x, T(rng.normal(size=(2, 4, 3, 3))), None, 1, 1),
        depthwise_conv2d(x, T(rng.normal(size=(4, 1, 3, 3))), None, 1, 1),
        leaky_relu(x),
        sigmoid(x),
        global_avg_pool(x),
        pixel_shuffle(x, 2),
        pixel_unshuffle(x, 2),
    ]
    assert all(np.all(np.isfinite(o.data)) for o in outs)
