"""Numeric core: tensors, seeded random streams, reductions, gradient oracle.

Tensors are plain ``numpy.ndarray`` objects. Images are channels-last
``(H, W, C)`` or batched ``(N, H, W, C)``. Storage defaults to float32;
verification code runs in float64.

Random streams
--------------
``RandomStream`` is xoshiro256** seeded through SplitMix64:

* the 64-bit seed is fed to SplitMix64 (increment ``0x9E3779B97F4A7C15``,
  multipliers ``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB``, shifts
  30/27/31) and its first four outputs become the xoshiro state;
* each xoshiro256** step returns ``rotl(s1 * 5, 7) * 9`` and updates the
  state with the reference shift/rotate sequence (17, 45);
* a uniform double in ``[0, 1)`` is ``(x >> 11) * 2**-53``;
* normal variates use Box-Muller on pairs ``(u1, u2)`` with
  ``r = sqrt(-2 ln(1 - u1))``, emitting ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``. Odd counts discard the last sine.

All arithmetic is exact 64-bit integer math, so the sequence is identical on
every platform.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numba
import numpy as np

from .errors import NumericError, ParameterError

DEFAULT_DTYPE = np.float32

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns ``(new_state, output)``."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


@numba.njit(cache=True, nogil=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True, nogil=True)
def _xoshiro_fill(s, out):
    # s: uint64[4] state (mutated), out: uint64[n]
    for i in range(out.shape[0]):
        s0 = s[0]
        s1 = s[1]
        s2 = s[2]
        s3 = s[3]
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        s[0] = s0
        s[1] = s1
        s[2] = s2
        s[3] = s3


@dataclass(frozen=True)
class Uniform:
    a: float = 0.0
    b: float = 1.0


@dataclass(frozen=True)
class Normal:
    mu: float = 0.0
    sigma: float = 1.0


class RandomStream:
    """Deterministic xoshiro256** stream (see module docstring)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    def child(self, key: int) -> "RandomStream":
        """Independent stream derived from this stream's seed and ``key``.

        Does not advance this stream.
        """
        _, mixed = splitmix64((self.seed ^ ((int(key) * 0xD1B54A32D192ED03) & _MASK64)) & _MASK64)
        return RandomStream(mixed)

    def state(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self._state)

    def next_u64(self, count: int) -> np.ndarray:
        out = np.empty(int(count), dtype=np.uint64)
        _xoshiro_fill(self._state, out)
        return out

    def random(self, count: int) -> np.ndarray:
        """``count`` float64 draws in [0, 1)."""
        bits = self.next_u64(count) >> np.uint64(11)
        return bits.astype(np.float64) * (1.0 / 9007199254740992.0)

    def uniform(self, shape, a=0.0, b=1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return rng_fill(self, shape, Uniform(a, b), dtype=dtype)

    def normal(self, shape, mu=0.0, sigma=1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return rng_fill(self, shape, Normal(mu, sigma), dtype=dtype)

    def integers(self, low: int, high: int, size=None):
        """Integers in the closed range ``[low, high]``.

        Uses ``low + floor(u * span)``; the bias is below 2**-40 for any span
        used in this package.
        """
        if high < low:
            raise ParameterError(f"empty integer range [{low}, {high}]")
        n = 1 if size is None else int(np.prod(size))
        u = self.random(n)
        vals = low + np.floor(u * (high - low + 1)).astype(np.int64)
        if size is None:
            return int(vals[0])
        return vals.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def rng_fill(stream: RandomStream, shape, distribution, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fill a new tensor of ``shape`` from ``distribution`` and advance ``stream``."""
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 0 for s in shape):
        raise ParameterError(f"invalid shape {shape}")
    count = int(np.prod(shape))
    if isinstance(distribution, Uniform):
        if not distribution.a <= distribution.b:
            raise ParameterError(f"uniform bounds out of order: {distribution}")
        u = stream.random(count)
        vals = distribution.a + (distribution.b - distribution.a) * u
    elif isinstance(distribution, Normal):
        if not distribution.sigma >= 0:
            raise ParameterError(f"negative sigma: {distribution}")
        pairs = (count + 1) // 2
        u = stream.random(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:count]
        vals = distribution.mu + distribution.sigma * z
    else:
        raise ParameterError(f"unknown distribution {distribution!r}")
    return vals.reshape(shape).astype(dtype)


def _tree_sum_flat(x: np.ndarray) -> np.ndarray:
    # Pairwise levels: (0,1), (2,3), ...; an odd tail element is carried up.
    while x.shape[0] > 1:
        if x.shape[0] % 2:
            x = np.concatenate([x[:-1:2] + x[1::2], x[-1:]])
        else:
            x = x[0::2] + x[1::2]
    return x[0]


def tree_sum(x: np.ndarray, workers: int = 1, chunk_log2: int = 12):
    """Fixed-order pairwise sum of all elements.

    With ``workers > 1`` the flat array is split into aligned chunks of
    ``2**chunk_log2`` elements. Each aligned chunk is exactly one subtree of
    the serial tree, so the result is bitwise identical to ``workers=1``.
    """
    flat = np.ascontiguousarray(x).reshape(-1)
    if flat.size == 0:
        raise ParameterError("cannot reduce an empty tensor")
    if workers <= 1:
        return _tree_sum_flat(flat)
    size = 1 << chunk_log2
    chunks = [flat[i:i + size] for i in range(0, flat.size, size)]
    partial = parallel_map(_tree_sum_flat, chunks, workers)
    return _tree_sum_flat(np.array(partial, dtype=flat.dtype))


def reduce(t: np.ndarray, kind: str = "sum", workers: int = 1):
    """Reduce a tensor to a scalar with ``sum``, ``mean`` or ``max``.

    Sums use :func:`tree_sum`, so they do not depend on ``workers``.
    """
    t = np.asarray(t)
    if t.size == 0:
        raise ParameterError("cannot reduce an empty tensor")
    if kind == "sum":
        return tree_sum(t, workers)
    if kind == "mean":
        return tree_sum(t, workers) / t.dtype.type(t.size)
    if kind == "max":
        return t.max()
    raise ParameterError(f"unknown reduction {kind!r}")


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` in float64.

    The quotient uses the representable step ``(x + eps) - (x - eps)``
    rather than ``2 * eps``, which removes the step rounding error.
    """
    if not eps > 0:
        raise ParameterError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        hi, lo = orig + eps, orig - eps
        flat[i] = hi
        fp = float(f(x))
        flat[i] = lo
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value at element {i}")
        g[i] = (fp - fm) / (hi - lo)
    return grad


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Ordered map, threaded when ``workers > 1``."""
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def chunk_ranges(total: int, workers: int) -> list[tuple[int, int]]:
    """Split ``range(total)`` into at most ``workers`` contiguous pieces."""
    workers = max(1, min(int(workers), total))
    bounds = np.linspace(0, total, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains NaN or Inf")
    return x
