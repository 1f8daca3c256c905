"""Network building blocks with explicit backward passes.

All activations are batched ``(N, H, W, C)``. Per-sample work is the unit of
parallelism: every sample is processed by the same code path whatever the
worker count, and batch-level sums (weight gradients) are combined in sample
order, so results are bitwise independent of ``workers``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError
from .numeric import parallel_map


def im2col(x: np.ndarray) -> np.ndarray:
    """``(N, H, W, C) -> (N, H*W, 9*C)`` with zero padding 1, tap order ``(dy, dx, c)``."""
    N, H, W, C = x.shape
    xp = np.zeros((N, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N, H, W, C, 3, 3)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(N, H * W, 9 * C)


def _check_conv(x, w, b):
    if x.ndim != 4 or w.shape[:3] != (3, 3, x.shape[-1]) or (b is not None and b.shape != (w.shape[-1],)):
        raise ParameterError(f"conv3x3 shape mismatch: x {x.shape}, w {w.shape}")


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray, workers: int = 1, cols=None) -> np.ndarray:
    """3x3 cross-correlation with zero padding 1. ``w`` is ``(3, 3, Cin, Cout)``.

    ``cols`` may carry a precomputed :func:`im2col` of ``x``.
    """
    _check_conv(x, w, b)
    N, H, W, _ = x.shape
    wm = w.reshape(-1, w.shape[-1])
    if cols is None:
        cols = im2col(x)

    def one(s):
        y = cols[s] @ wm
        if b is not None:
            y += b
        return y

    return np.stack(parallel_map(one, range(N), workers)).reshape(N, H, W, -1)


def conv3x3_backward(x, w, dy, workers: int = 1, need_dx: bool = True, cols=None):
    """Gradients ``(dx, dw, db)`` of :func:`conv3x3`; ``dx`` is None unless requested.

    ``dw`` is accumulated sample by sample in index order.
    """
    N, H, W, Cin = x.shape
    Cout = w.shape[-1]
    if cols is None:
        cols = im2col(x)
    g = dy.reshape(N, H * W, Cout)
    parts = parallel_map(lambda s: cols[s].T @ g[s], range(N), workers)
    dw = parts[0].copy()
    for d in parts[1:]:
        dw += d
    db = g.sum(axis=1)
    db = db.sum(axis=0) if N > 1 else db[0]
    dx = None
    if need_dx:
        # transpose of a same-padded 3x3 correlation: correlate with the flipped kernel
        wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        dx = conv3x3(dy, wf, None, workers)
    return dx, dw.reshape(w.shape), db


def relu(x):
    return np.maximum(x, 0)


def relu_backward(y, dy):
    """Backward of ReLU given its output ``y``."""
    return dy * (y > 0)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """Mean over non-overlapping 2x2 blocks."""
    N, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ParameterError(f"avg_pool2 needs even extents, got {H}x{W}")
    return x.reshape(N, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def avg_pool2_backward(dy: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dy * dy.dtype.type(0.25), 2, axis=1), 2, axis=2)


def _up_axis(x, axis):
    # out[2m] = .75 x[m] + .25 x[m-1], out[2m+1] = .75 x[m] + .25 x[m+1], edges clamped
    x = np.moveaxis(x, axis, 0)
    prev = np.concatenate([x[:1], x[:-1]])
    nxt = np.concatenate([x[1:], x[-1:]])
    out = np.empty((2 * x.shape[0],) + x.shape[1:], dtype=x.dtype)
    out[0::2] = 0.75 * x + 0.25 * prev
    out[1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _up_axis_backward(dy, axis):
    dy = np.moveaxis(dy, axis, 0)
    even, odd = dy[0::2], dy[1::2]
    dx = 0.75 * (even + odd)
    dx[:-1] += 0.25 * even[1:]
    dx[0] += 0.25 * even[0]
    dx[1:] += 0.25 * odd[:-1]
    dx[-1] += 0.25 * odd[-1]
    return np.moveaxis(dx, 0, axis)


def upsample_bilinear_x2(x: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling with half-pixel centers.

    Output index ``k`` samples input coordinate ``(k + 0.5) / 2 - 0.5``,
    clamped to the valid range.
    """
    return _up_axis(_up_axis(x, 1), 2)


def upsample_bilinear_x2_backward(dy: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`upsample_bilinear_x2`."""
    return _up_axis_backward(_up_axis_backward(dy, 2), 1)


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batch_norm(x, scale, offset, running_mean, running_var, mode="train"):
    """Per-channel batch normalization over ``(N, H, W)``.

    Train mode normalizes with batch statistics and returns updated running
    statistics ``momentum * old + (1 - momentum) * batch``. Returns
    ``(y, cache, new_mean, new_var)``; ``cache`` is None in infer mode.
    """
    if x.shape[0] == 0:
        raise ParameterError("batch_norm on an empty batch")
    if mode == "infer":
        xhat = (x - running_mean) / np.sqrt(running_var + BN_EPS)
        return scale * xhat + offset, None, running_mean, running_var
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    y = scale * xhat + offset
    new_mean = BN_MOMENTUM * running_mean + (1 - BN_MOMENTUM) * mean
    new_var = BN_MOMENTUM * running_var + (1 - BN_MOMENTUM) * var
    return y, (xhat, inv, scale), new_mean.astype(x.dtype), new_var.astype(x.dtype)


def batch_norm_backward(cache, dy):
    """Returns ``(dx, dscale, doffset)`` for a train-mode forward."""
    xhat, inv, scale = cache
    axes = (0, 1, 2)
    m = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
    doffset = dy.sum(axis=axes)
    dscale = (dy * xhat).sum(axis=axes)
    dxhat = dy * scale
    dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dscale, doffset
