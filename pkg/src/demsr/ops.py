"""Differentiable network operations: convolutions, activations, SE, pixel shuffle, loss."""

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import interp
from .exceptions import ContractError, DimensionError
from .tensor import Tensor, apply, mul

DEFAULT_SLOPE = 0.2


def _output_size(size, k, stride, padding, axis):
    span = size + 2 * padding - k
    if span < 0:
        raise DimensionError(f"{axis} {size} with padding {padding} is smaller than kernel {k}")
    if span % stride:
        raise DimensionError(f"{axis} {size} (padding {padding}, kernel {k}) is not divisible by stride {stride}")
    return span // stride + 1


def _check_conv_args(x, weight, bias, stride, padding, depthwise):
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"kernels must be square and odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if depthwise:
        if ci != 1 or co != c:
            raise DimensionError(f"depthwise weight must be ({c}, 1, k, k) for {c} channels, got {weight.shape}")
    elif ci != c:
        raise DimensionError(f"weight expects {ci} input channels but input {x.shape} has {c}")
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise DimensionError(f"bias must have shape (1, {co}, 1, 1), got {bias.shape}")
    ho = _output_size(h, kh, stride, padding, "height")
    wo = _output_size(w, kw, stride, padding, "width")
    return kh, ho, wo


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _unpad(x, padding):
    if padding == 0:
        return x
    return x[:, :, padding:-padding, padding:-padding]


def _window(xp, i, j, ho, wo, stride):
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    ``x`` is ``(n, ci, h, w)``, ``weight`` is ``(co, ci, k, k)`` and ``bias``
    (optional) is ``(1, co, 1, 1)``.
    """
    k, ho, wo = _check_conv_args(x, weight, bias, stride, padding, depthwise=False)
    X, W = x.data, weight.data
    n, ci, h, w = X.shape
    co = W.shape[0]

    if k == 1 and stride == 1 and padding == 0:
        W2 = W.reshape(co, ci)
        Xf = X.reshape(n, ci, h * w)
        out = np.matmul(W2, Xf).reshape(n, co, h, w)

        def grad_fn(g):
            gf = g.reshape(n, co, h * w)
            gx = np.matmul(W2.T, gf).reshape(X.shape)
            gw = np.tensordot(gf, Xf, axes=([0, 2], [0, 2])).reshape(W.shape)
            return gx, gw, _bias_grad(g, bias)

    else:
        Xp = _pad(X, padding)
        cols = sliding_window_view(Xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(cols, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)

        def grad_fn(g):
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gcols = np.tensordot(g, W, axes=([1], [0]))  # (n, ho, wo, ci, k, k)
            gxp = np.zeros_like(Xp)
            for i in range(k):
                for j in range(k):
                    _window(gxp, i, j, ho, wo, stride)[...] += gcols[..., i, j].transpose(0, 3, 1, 2)
            return _unpad(gxp, padding), gw, _bias_grad(g, bias)

    if bias is not None:
        out = out + bias.data
    out = out.astype(X.dtype, copy=False)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply("conv2d", out, inputs, grad_fn)


def _bias_grad(g, bias):
    if bias is None:
        return None
    return g.sum(axis=(0, 2, 3)).reshape(bias.shape)


def depthwise_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Per-channel convolution: output channel g sees only input channel g."""
    k, ho, wo = _check_conv_args(x, weight, bias, stride, padding, depthwise=True)
    X, W = x.data, weight.data
    Xp = _pad(X, padding)
    taps = W[:, 0][None, :, :, :, None, None]  # (1, c, k, k, 1, 1)
    out = np.zeros((X.shape[0], X.shape[1], ho, wo), dtype=X.dtype)
    for i in range(k):
        for j in range(k):
            out += taps[:, :, i, j] * _window(Xp, i, j, ho, wo, stride)
    if bias is not None:
        out += bias.data

    def grad_fn(g):
        gxp = np.zeros_like(Xp)
        gw = np.zeros_like(W)
        for i in range(k):
            for j in range(k):
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, _window(Xp, i, j, ho, wo, stride))
                _window(gxp, i, j, ho, wo, stride)[...] += g * taps[:, :, i, j]
        return _unpad(gxp, padding), gw, _bias_grad(g, bias)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply("depthwise_conv2d", out, inputs, grad_fn)


class _MaskTape:
    def __init__(self):
        self.masks = []
        self.cursor = 0
        self.replaying = False

    def rewind(self, replay=True):
        self.cursor = 0
        self.replaying = replay

    def mask(self, X):
        if not self.replaying:
            m = X >= 0
            self.masks.append(m)
            return m
        m = self.masks[self.cursor]
        self.cursor += 1
        if m.shape != X.shape:
            raise DimensionError("frozen activation mask does not match the replayed forward pass")
        return m


_mask_tape = None


@contextmanager
def frozen_activation_masks():
    """Record LeakyReLU sign masks on the first forward pass, then replay them.

    Call ``tape.rewind()`` before each replayed pass.  Used by finite-difference
    checks so that probes never straddle an activation kink.
    """
    global _mask_tape
    saved, _mask_tape = _mask_tape, _MaskTape()
    try:
        yield _mask_tape
    finally:
        _mask_tape = saved


def leaky_relu(x, negative_slope=DEFAULT_SLOPE):
    if not 0.0 < negative_slope < 1.0:
        raise ValueError(f"negative_slope must lie in (0, 1), got {negative_slope}")
    X = x.data
    pos = X >= 0 if _mask_tape is None else _mask_tape.mask(X)
    slope = X.dtype.type(negative_slope)
    out = np.where(pos, X, slope * X)

    def grad_fn(g):
        return (np.where(pos, g, slope * g),)

    return apply("leaky_relu", out, (x,), grad_fn)


def sigmoid(x):
    X = x.data
    z = np.exp(-np.abs(X))
    out = np.where(X >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(X.dtype, copy=False)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return apply("sigmoid", out, (x,), grad_fn)


def global_avg_pool(x):
    X = x.data
    n, c, h, w = X.shape
    out = X.mean(axis=(2, 3), keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g / (h * w), X.shape).astype(X.dtype),)

    return apply("global_avg_pool", out, (x,), grad_fn)


def se_block(x, w_reduce, b_reduce, w_expand, b_expand, negative_slope=DEFAULT_SLOPE):
    """Squeeze-and-excite channel gating.

    pool -> 1x1 reduce -> LeakyReLU -> 1x1 expand -> sigmoid, then the
    per-channel gate rescales ``x``.
    """
    c = x.shape[1]
    cr = w_reduce.shape[0]
    if cr < 1 or w_reduce.shape != (cr, c, 1, 1):
        raise DimensionError(f"reduce weight must be (cr, {c}, 1, 1), got {w_reduce.shape}")
    if w_expand.shape != (c, cr, 1, 1):
        raise DimensionError(f"expand weight must be ({c}, {cr}, 1, 1), got {w_expand.shape}")
    s = global_avg_pool(x)
    s = leaky_relu(conv2d(s, w_reduce, b_reduce), negative_slope)
    s = sigmoid(conv2d(s, w_expand, b_expand))
    return mul(x, s)


def pixel_shuffle(x, r):
    """Rearrange ``(n, c*r*r, h, w)`` into ``(n, c, h*r, w*r)``.

    ``out[n, c, r*i + a, r*j + b] == in[n, c*r*r + a*r + b, i, j]``.
    """
    n, crr, h, w = x.shape
    if r < 1 or crr % (r * r):
        raise DimensionError(f"pixel_shuffle: {crr} channels not divisible by r^2 = {r * r}")
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def grad_fn(g):
        return (_unshuffle_array(g, r),)

    return apply("pixel_shuffle", out, (x,), grad_fn)


def _unshuffle_array(X, r):
    n, c, H, W = X.shape
    h, w = H // r, W // r
    return X.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def pixel_unshuffle(x, r):
    """Exact inverse of :func:`pixel_shuffle`."""
    n, c, H, W = x.shape
    if r < 1 or H % r or W % r:
        raise DimensionError(f"pixel_unshuffle: spatial dims {H}x{W} not divisible by r = {r}")
    out = _unshuffle_array(x.data, r)

    def grad_fn(g):
        n_, crr, h, w = g.shape
        return (g.reshape(n_, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n_, c, H, W),)

    return apply("pixel_unshuffle", out, (x,), grad_fn)


def mse_loss(pred, target):
    """Mean squared error over all elements; gradients flow into ``pred`` only."""
    if isinstance(target, Tensor):
        if target.requires_grad:
            raise ContractError("mse_loss target must not require a gradient")
        T = target.data
    else:
        T = np.asarray(target)
    if pred.shape != T.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} and target {T.shape} differ")
    P = pred.data
    diff = P - T.astype(P.dtype, copy=False)
    out = np.asarray(np.mean(diff * diff), dtype=P.dtype).reshape(1, 1, 1, 1)
    scale = P.dtype.type(2.0 / diff.size)

    def grad_fn(g):
        return (diff * (scale * g.reshape(())),)

    return apply("mse_loss", out, (pred,), grad_fn)


def upsample(x, out_h, out_w, method="bicubic"):
    """Differentiable separable resize of every channel (see :mod:`demsr.interp`)."""
    n, c, h, w = x.shape
    Wr = interp.resize_weights(h, out_h, method).astype(x.dtype)
    Wc = interp.resize_weights(w, out_w, method).astype(x.dtype)
    out = Wr @ x.data @ Wc.T

    def grad_fn(g):
        return (Wr.T @ g @ Wc,)

    return apply("upsample", out, (x,), grad_fn)
