"""Full-frame interpolation with boundary handling, and dyadic recursion."""
from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .model import Parameters, forward, forward_direct
from .op import replicate_pad, sepconv_forward


def _split(total: int) -> tuple[int, int]:
    return total // 2, total - total // 2


def interpolate(params: Parameters, I1: np.ndarray, I2: np.ndarray, workers: int = 1) -> np.ndarray:
    """Synthesize the midpoint frame of ``I1`` and ``I2`` in one pass.

    Frames are replicate-padded to a multiple of ``2**levels`` for the
    network, and by ``n // 2`` for the local convolution. The result is
    cropped back to the input extent.
    """
    if I1.shape != I2.shape:
        raise ParameterError(f"frame sizes differ: {I1.shape} vs {I2.shape}")
    cfg = params.config
    H, W = I1.shape[-3], I1.shape[-2]
    m = cfg.multiple
    top, bottom = _split(-H % m)
    left, right = _split(-W % m)
    dtype = params[params.trainable()[0]].dtype
    I1 = np.asarray(I1, dtype=dtype)
    I2 = np.asarray(I2, dtype=dtype)
    P1 = replicate_pad(I1, (top, bottom, left, right))
    P2 = replicate_pad(I2, (top, bottom, left, right))
    if cfg.variant == "direct_synthesis":
        out = forward_direct(params, P1, P2, "infer", workers)
        return out[..., top:top + H, left:left + W, :]
    kf = forward(params, P1, P2, "infer", workers).crop(top, left, H, W)
    r = cfg.kernel_size // 2
    return sepconv_forward(replicate_pad(I1, r), replicate_pad(I2, r), kf, workers)


class Interpolator:
    """Callable ``(I1, I2) -> midpoint frame`` bound to trained parameters."""

    def __init__(self, params: Parameters, workers: int = 1):
        self.params = params
        self.workers = workers

    def __call__(self, I1, I2):
        return interpolate(self.params, I1, I2, self.workers)


def multi_interpolate(interpolator, I1, I2, depth: int) -> list[tuple[float, np.ndarray]]:
    """``2**depth - 1`` intermediate frames by recursive midpoint synthesis.

    Returns ``(t, frame)`` pairs in increasing ``t``; ``t`` values are the
    dyadic fractions ``k / 2**depth``.
    """
    if depth < 1:
        raise ParameterError("depth must be >= 1")

    def rec(a, b, t0, t1, d):
        if d == 0:
            return []
        mid = interpolator(a, b)
        tm = (t0 + t1) / 2
        return rec(a, mid, t0, tm, d - 1) + [(tm, mid)] + rec(mid, b, tm, t1, d - 1)

    return rec(I1, I2, 0.0, 1.0, depth)
