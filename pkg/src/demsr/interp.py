"""Classical bilinear and bicubic resampling.

Both methods use half-pixel centre alignment, ``src = (dst + 0.5) * in / out - 0.5``,
and replicate the edge for neighbours that fall outside the grid.  Resampling
is separable.  Each output sample is written as its heaviest neighbour plus a
weighted sum of differences from that neighbour, so flat regions come back
bit-for-bit.  ``resize_weights`` exposes the equivalent dense matrix for
callers that need ``Wr @ grid @ Wc.T`` (the differentiable upsampler).
"""

from functools import lru_cache

import numpy as np

from .exceptions import ContractError, DimensionError

METHODS = ("bilinear", "bicubic")

KEYS_A = -0.5


def keys_kernel(t, a=KEYS_A):
    """Keys cubic-convolution kernel evaluated at offsets ``t``."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2 = t * t
    t3 = t2 * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _linear_kernel(t):
    return np.maximum(0.0, 1.0 - np.abs(t))


@lru_cache(maxsize=64)
def _taps_cached(n_in, n_out, method):
    if method == "bilinear":
        offsets, kernel = (0, 1), _linear_kernel
    else:
        offsets, kernel = (-1, 0, 1, 2), keys_kernel
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src)
    pos = base[:, None] + np.array(offsets, dtype=np.float64)
    wts = kernel(src[:, None] - pos)
    idx = np.clip(pos, 0, n_in - 1).astype(np.intp)
    anchor = idx[np.arange(n_out), np.argmax(wts, axis=1)]
    for a in (idx, wts, anchor):
        a.setflags(write=False)
    return idx, wts, anchor


@lru_cache(maxsize=64)
def _weights_cached(n_in, n_out, method):
    idx, wts, _ = _taps_cached(n_in, n_out, method)
    W = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in range(idx.shape[1]):
        np.add.at(W, (rows, idx[:, k]), wts[:, k])
    W.setflags(write=False)
    return W


def _resample_rows(arr, n_out, method):
    # anchor + sum_k w_k * (x_k - anchor): differences vanish exactly on flat input
    idx, wts, anchor = _taps_cached(arr.shape[-2], n_out, method)
    ref = arr[..., anchor, :]
    out = ref.copy()
    for k in range(idx.shape[1]):
        # taps on the anchor or with zero weight add nothing; skipping them keeps -0.0 intact
        live = np.flatnonzero((wts[:, k] != 0) & (idx[:, k] != anchor))
        if live.size:
            out[..., live, :] += wts[live, k, None] * (arr[..., idx[live, k], :] - ref[..., live, :])
    return out


def resize_weights(n_in, n_out, method="bicubic"):
    """Return the ``(n_out, n_in)`` matrix that resamples one axis."""
    if method not in METHODS:
        raise ValueError(f"unknown interpolation method {method!r}; expected one of {METHODS}")
    if n_out < 1:
        raise DimensionError(f"output size must be >= 1, got {n_out}")
    if n_in < 1:
        raise DimensionError(f"input size must be >= 1, got {n_in}")
    return _weights_cached(int(n_in), int(n_out), method)


def resize(grid, out_h, out_w, method="bicubic"):
    """Resample a 2-D array (or a stack of them on the last two axes).

    Parameters
    ----------
    grid : array_like, shape (..., h, w)
    out_h, out_w : int
        Output size.  Must be positive.
    method : {"bilinear", "bicubic"}
        Bicubic is Keys cubic convolution with ``a = -0.5``.

    Returns
    -------
    ndarray of float64, shape (..., out_h, out_w)
    """
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim < 2:
        raise DimensionError(f"expected at least 2 dimensions, got shape {arr.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output dims must be positive, got ({out_h}, {out_w})")
    h, w = arr.shape[-2:]
    if h < 2 or w < 2:
        raise DimensionError(f"input grid must be at least 2x2, got {h}x{w}")
    if method not in METHODS:
        raise ValueError(f"unknown interpolation method {method!r}; expected one of {METHODS}")
    out = _resample_rows(arr, int(out_h), method)
    out = _resample_rows(np.swapaxes(out, -1, -2), int(out_w), method)
    return np.ascontiguousarray(np.swapaxes(out, -1, -2))


def upscale(grid, factor, method="bicubic"):
    """Resize by an integer factor along both axes."""
    arr = np.asarray(grid)
    h, w = arr.shape[-2:]
    return resize(arr, h * factor, w * factor, method)


def baseline_mse(pairs, method="bicubic"):
    """Mean squared error of an interpolation baseline over tile pairs.

    Each pair's low-resolution grid is resized to its high-resolution grid's
    shape and compared pixel by pixel.  The mean runs over every pixel of
    every pair, so the result is in squared elevation units.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("baseline_mse needs at least one tile pair")
    total = 0.0
    count = 0
    for pair in pairs:
        hr = np.asarray(pair.hr.values, dtype=np.float64)
        pred = resize(pair.lr.values, hr.shape[0], hr.shape[1], method)
        total += float(np.sum((pred - hr) ** 2))
        count += hr.size
    return total / count
