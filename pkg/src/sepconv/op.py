"""Position-varying separable local convolution of two frames.

Every output pixel ``(y, x)`` owns four 1D kernels of odd length ``n``. The
synthesized frame is::

    out(y, x, c) = sum_ij k1v[y,x,i] k1h[y,x,j] I1[y+i, x+j, c]
                 + sum_ij k2v[y,x,i] k2h[y,x,j] I2[y+i, x+j, c]

where ``I1``/``I2`` are padded so that the ``n x n`` patch of every output
pixel lies in bounds (padded extent = output extent + n - 1). The same
kernels are applied to every channel.

Kernel fields may carry a leading batch axis; frames then do too.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ParameterError
from .numeric import chunk_ranges, parallel_map


@dataclass
class KernelField:
    """Four per-pixel 1D kernels, each of shape ``(..., H, W, n)``."""

    k1v: np.ndarray
    k1h: np.ndarray
    k2v: np.ndarray
    k2h: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in self.arrays()}
        if len(shapes) != 1:
            raise ParameterError(f"kernel tensors disagree in shape: {sorted(shapes)}")
        shape = self.k1v.shape
        if len(shape) not in (3, 4) or shape[-1] < 1 or shape[-1] % 2 == 0:
            raise ParameterError(f"kernel field needs shape (..., H, W, odd n), got {shape}")

    @property
    def n(self) -> int:
        return self.k1v.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.k1v.shape

    @property
    def batched(self) -> bool:
        return self.k1v.ndim == 4

    def arrays(self) -> tuple:
        return (self.k1v, self.k1h, self.k2v, self.k2h)

    def crop(self, top: int, left: int, height: int, width: int) -> "KernelField":
        sl = (Ellipsis, slice(top, top + height), slice(left, left + width), slice(None))
        return KernelField(*(a[sl] for a in self.arrays()))

    def astype(self, dtype) -> "KernelField":
        return KernelField(*(a.astype(dtype) for a in self.arrays()))


@dataclass
class DenseKernelPair:
    """Per-pixel 2D kernels ``K1``, ``K2`` of shape ``(..., H, W, n, n)``."""

    K1: np.ndarray
    K2: np.ndarray

    def __post_init__(self):
        if self.K1.shape != self.K2.shape:
            raise ParameterError("K1 and K2 shapes differ")
        if self.K1.ndim < 4 or self.K1.shape[-1] != self.K1.shape[-2]:
            raise ParameterError(f"dense kernels need shape (..., H, W, n, n), got {self.K1.shape}")


def replicate_pad(image: np.ndarray, margin) -> np.ndarray:
    """Pad the two spatial axes of ``(H, W, C)`` or ``(N, H, W, C)`` by edge repetition.

    ``margin`` is an int or ``(top, bottom, left, right)``.
    """
    if np.isscalar(margin):
        margin = (margin,) * 4
    top, bottom, left, right = (int(m) for m in margin)
    if min(top, bottom, left, right) < 0:
        raise ParameterError("margin must be non-negative")
    pad = [(top, bottom), (left, right), (0, 0)]
    if image.ndim == 4:
        pad = [(0, 0)] + pad
    elif image.ndim != 3:
        raise ParameterError(f"expected (H, W, C) or (N, H, W, C), got {image.shape}")
    return np.pad(image, pad, mode="edge")


def _check_inputs(I1, I2, kf: KernelField):
    if I1.shape != I2.shape:
        raise ParameterError(f"frame shapes differ: {I1.shape} vs {I2.shape}")
    if I1.ndim != kf.k1v.ndim:
        raise ParameterError("frames and kernel field disagree on batching")
    n = kf.n
    H, W = kf.shape[-3], kf.shape[-2]
    if I1.shape[-3] != H + n - 1 or I1.shape[-2] != W + n - 1:
        raise ParameterError(
            f"frames of extent {I1.shape[-3:-1]} do not match a {H}x{W} output with n={n}; "
            f"expected {(H + n - 1, W + n - 1)}"
        )
    if kf.batched and I1.shape[0] != kf.shape[0]:
        raise ParameterError("batch sizes differ")


def _batched(I1, I2, kf: KernelField):
    # Returns frames as (B, Hp, Wp*C) plus batched kernel arrays.
    if not kf.batched:
        I1, I2 = I1[None], I2[None]
    ks = kf.arrays() if kf.batched else tuple(a[None] for a in kf.arrays())
    B, Hp, Wp, C = I1.shape
    return I1.reshape(B, Hp, Wp * C), I2.reshape(B, Hp, Wp * C), ks


@numba.njit(cache=True, nogil=True)
def _forward_rows(I1, I2, k1v, k1h, k2v, k2h, out, r0, r1):
    # Frames are (B, Hp, Wp*C): a patch row is one contiguous run of n*C values.
    _, H, W, n = k1v.shape
    C = out.shape[3]
    nc = n * C
    vrow = np.empty(nc, dtype=out.dtype)
    acc = np.empty(C, dtype=out.dtype)
    for r in range(r0, r1):
        b = r // H
        y = r % H
        for x in range(W):
            for c in range(C):
                acc[c] = 0
            base = x * C
            for f in range(2):
                I = I1 if f == 0 else I2
                kv = k1v if f == 0 else k2v
                kh = k1h if f == 0 else k2h
                # vertical pass: vrow[j*C + c] = sum_i kv[i] * I[y+i, x+j, c]
                for k in range(nc):
                    vrow[k] = 0
                for i in range(n):
                    wv = kv[b, y, x, i]
                    row = I[b, y + i]
                    for k in range(nc):
                        vrow[k] += wv * row[base + k]
                # horizontal pass
                for j in range(n):
                    wh = kh[b, y, x, j]
                    for c in range(C):
                        acc[c] += wh * vrow[j * C + c]
            for c in range(C):
                out[b, y, x, c] = acc[c]


@numba.njit(cache=True, nogil=True)
def _backward_rows(I1, I2, k1v, k1h, k2v, k2h, g, gk1v, gk1h, gk2v, gk2h, r0, r1):
    _, H, W, n = k1v.shape
    C = g.shape[3]
    gp = np.empty((n, n), dtype=gk1v.dtype)
    for r in range(r0, r1):
        b = r // H
        y = r % H
        for x in range(W):
            base = x * C
            for f in range(2):
                I = I1 if f == 0 else I2
                kv = k1v if f == 0 else k2v
                kh = k1h if f == 0 else k2h
                gv = gk1v if f == 0 else gk2v
                gh = gk1h if f == 0 else gk2h
                # gp[i, j] = sum_c g[c] * I[y+i, x+j, c]
                for i in range(n):
                    row = I[b, y + i]
                    for j in range(n):
                        s = row[base + j * C] * g[b, y, x, 0]
                        for c in range(1, C):
                            s += g[b, y, x, c] * row[base + j * C + c]
                        gp[i, j] = s
                for i in range(n):
                    s = gp[i, 0] * kh[b, y, x, 0]
                    for j in range(1, n):
                        s += gp[i, j] * kh[b, y, x, j]
                    gv[b, y, x, i] = s
                for j in range(n):
                    gh[b, y, x, j] = 0
                for i in range(n):
                    wv = kv[b, y, x, i]
                    for j in range(n):
                        gh[b, y, x, j] += gp[i, j] * wv


def sepconv_forward(I1: np.ndarray, I2: np.ndarray, kf: KernelField, workers: int = 1) -> np.ndarray:
    """Render the interpolated frame from padded frames and a kernel field.

    Work is split over output rows; each pixel is computed identically
    whatever ``workers`` is, so the result is bitwise independent of it.
    """
    _check_inputs(I1, I2, kf)
    dtype = np.result_type(I1.dtype, kf.k1v.dtype)
    b1, b2, ks = _batched(np.ascontiguousarray(I1, dtype), np.ascontiguousarray(I2, dtype), kf)
    ks = tuple(np.ascontiguousarray(k, dtype) for k in ks)
    N, H, W, _ = ks[0].shape
    out = np.empty((N, H, W, I1.shape[-1]), dtype=dtype)

    def run(rng):
        _forward_rows(b1, b2, *ks, out, rng[0], rng[1])

    parallel_map(run, chunk_ranges(N * H, workers), workers)
    return out if kf.batched else out[0]


def sepconv_backward_kernels(I1, I2, kf: KernelField, grad_out: np.ndarray, workers: int = 1) -> KernelField:
    """Gradient of a scalar loss w.r.t. the four kernel tensors.

    ``grad_out`` is the loss gradient w.r.t. the rendered frame. Frames are
    treated as constants.
    """
    _check_inputs(I1, I2, kf)
    expected = kf.shape[:-1] + (I1.shape[-1],)
    if grad_out.shape != expected:
        raise ParameterError(f"grad_out shape {grad_out.shape} != {expected}")
    dtype = np.result_type(I1.dtype, kf.k1v.dtype, grad_out.dtype)
    b1, b2, ks = _batched(np.ascontiguousarray(I1, dtype), np.ascontiguousarray(I2, dtype), kf)
    ks = tuple(np.ascontiguousarray(k, dtype) for k in ks)
    g = np.ascontiguousarray(grad_out if kf.batched else grad_out[None], dtype)
    grads = tuple(np.empty_like(k) for k in ks)
    N, H = ks[0].shape[:2]

    def run(rng):
        _backward_rows(b1, b2, *ks, g, *grads, rng[0], rng[1])

    parallel_map(run, chunk_ranges(N * H, workers), workers)
    if not kf.batched:
        grads = tuple(a[0] for a in grads)
    return KernelField(*grads)


def outer_product_kernels(kf: KernelField) -> DenseKernelPair:
    """Equivalent 2D kernels ``K(y,x)[i,j] = kv[y,x,i] * kh[y,x,j]``."""
    return DenseKernelPair(
        kf.k1v[..., :, None] * kf.k1h[..., None, :],
        kf.k2v[..., :, None] * kf.k2h[..., None, :],
    )


def dense_local_conv_oracle(I1: np.ndarray, I2: np.ndarray, dk: DenseKernelPair) -> np.ndarray:
    """Reference evaluation with full 2D kernels, one tap at a time."""
    n = dk.K1.shape[-1]
    H, W = dk.K1.shape[-4], dk.K1.shape[-3]
    if I1.shape != I2.shape or I1.shape[-3] != H + n - 1 or I1.shape[-2] != W + n - 1:
        raise ParameterError("frame shapes do not match the dense kernels")
    if I1.ndim != dk.K1.ndim - 1:
        raise ParameterError("frames and kernels disagree on batching")
    out = np.zeros(I1.shape[:-3] + (H, W, I1.shape[-1]), dtype=np.result_type(I1, dk.K1))
    for i in range(n):
        for j in range(n):
            out += dk.K1[..., i, j, None] * I1[..., i:i + H, j:j + W, :]
            out += dk.K2[..., i, j, None] * I2[..., i:i + H, j:j + W, :]
    return out


def memory_footprint(width: int, height: int, n: int, mode: str = "separable", bytes_per_coeff: int = 4) -> int:
    """Bytes needed to hold the kernels of every pixel of a frame."""
    if width <= 0 or height <= 0 or n <= 0 or n % 2 == 0:
        raise ParameterError("dimensions must be positive and n odd")
    if mode == "full2d":
        return width * height * 2 * n * n * bytes_per_coeff
    if mode == "separable":
        return width * height * 4 * n * bytes_per_coeff
    raise ParameterError(f"unknown mode {mode!r}")
