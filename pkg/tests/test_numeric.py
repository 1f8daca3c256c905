import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepconv.errors import NumericError, ParameterError
from sepconv.numeric import (Normal, RandomStream, Uniform, chunk_ranges, finite_difference_gradient, reduce,
                             rng_fill, splitmix64, tree_sum)

M64 = (1 << 64) - 1


def ref_xoshiro(seed, count):
    """Textbook xoshiro256** in pure Python integers."""
    sm, s = seed, []
    for _ in range(4):
        sm = (sm + 0x9E3779B97F4A7C15) & M64
        z = sm
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        s.append(z ^ (z >> 31))

    def rotl(x, k):
        return ((x << k) | (x >> (64 - k))) & M64

    out = []
    for _ in range(count):
        out.append((rotl((s[1] * 5) & M64, 7) * 9) & M64)
        t = (s[1] << 17) & M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def test_splitmix_known_value():
    # published first output for seed 0
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5, M64])
def test_stream_matches_reference(seed):
    got = RandomStream(seed).next_u64(64)
    assert [int(v) for v in got] == ref_xoshiro(seed, 64)


def test_stream_continues_across_calls():
    a = RandomStream(7)
    joined = np.concatenate([a.next_u64(5), a.next_u64(11)])
    assert np.array_equal(joined, RandomStream(7).next_u64(16))


def test_uniform_bits():
    u = RandomStream(3).random(8)
    ref = [(x >> 11) * 2.0**-53 for x in ref_xoshiro(3, 8)]
    assert u.tolist() == ref


def test_normal_box_muller_oracle():
    z = rng_fill(RandomStream(11), 5, Normal(0.0, 1.0), dtype=np.float64)
    u = [(x >> 11) * 2.0**-53 for x in ref_xoshiro(11, 6)]
    ref = []
    for k in range(3):
        r = math.sqrt(-2 * math.log1p(-u[2 * k]))
        ref += [r * math.cos(2 * math.pi * u[2 * k + 1]), r * math.sin(2 * math.pi * u[2 * k + 1])]
    np.testing.assert_allclose(z, ref[:5], rtol=1e-15)


def test_rng_fill_deterministic_and_shaped():
    a = RandomStream(5).uniform((3, 4), -1, 2)
    b = RandomStream(5).uniform((3, 4), -1, 2)
    assert a.shape == (3, 4) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() < 2


def test_normal_moments():
    z = RandomStream(9).normal(200_000, 1.5, 2.0, dtype=np.float64)
    assert abs(z.mean() - 1.5) < 0.02
    assert abs(z.std() - 2.0) < 0.02


@pytest.mark.parametrize("shape", [(-1,), (2, -3), ()])
def test_rng_fill_rejects_bad_shape(shape):
    with pytest.raises(ParameterError):
        rng_fill(RandomStream(0), shape, Uniform(0, 1))


def test_rng_fill_rejects_bad_distribution():
    with pytest.raises(ParameterError):
        rng_fill(RandomStream(0), 3, Normal(0, -1))
    with pytest.raises(ParameterError):
        rng_fill(RandomStream(0), 3, Uniform(2, 1))


def test_child_streams_independent_of_parent_position():
    a = RandomStream(1)
    c1 = a.child(4).next_u64(4)
    a.next_u64(100)
    assert np.array_equal(c1, a.child(4).next_u64(4))
    assert not np.array_equal(c1, a.child(5).next_u64(4))


def test_integers_inclusive_range():
    v = RandomStream(2).integers(-3, 3, size=5000)
    assert v.min() == -3 and v.max() == 3
    with pytest.raises(ParameterError):
        RandomStream(2).integers(4, 3)


def test_permutation_is_permutation():
    p = RandomStream(8).permutation(100)
    assert sorted(p.tolist()) == list(range(100))


@settings(max_examples=30, deadline=None)
@given(size=st.integers(1, 20000), workers=st.integers(1, 4), seed=st.integers(0, 2**32))
def test_tree_sum_worker_invariant(size, workers, seed):
    x = RandomStream(seed).normal(size, dtype=np.float32)
    s1 = tree_sum(x, 1)
    sw = tree_sum(x, workers, chunk_log2=8)
    assert s1.tobytes() == sw.tobytes()
    assert abs(float(s1) - float(np.sum(x, dtype=np.float64))) <= 1e-4 * (1 + np.abs(x).sum())


def test_reduce_kinds():
    x = np.arange(10, dtype=np.float64)
    assert reduce(x, "sum") == 45
    assert reduce(x, "mean") == 4.5
    assert reduce(x, "max") == 9
    with pytest.raises(ParameterError):
        reduce(np.array([]), "sum")
    with pytest.raises(ParameterError):
        reduce(x, "median")


@pytest.mark.parametrize("seed", range(5))
def test_finite_difference_linear_exact(seed):
    a = RandomStream(seed).normal(20, dtype=np.float64)
    x = RandomStream(seed + 100).normal(20, dtype=np.float64)
    g = finite_difference_gradient(lambda v: float(a @ v), x)
    np.testing.assert_allclose(g, a, atol=1e-10, rtol=0)


def test_finite_difference_sum_and_square():
    np.testing.assert_allclose(finite_difference_gradient(lambda v: v.sum(), np.array([0.3, -2.0, 7.5])), 1.0,
                               atol=1e-10)
    g = finite_difference_gradient(lambda v: float((v ** 2).sum()), np.array([1.0, 2.0]), eps=1e-5)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)


def test_finite_difference_quadratic():
    x = RandomStream(3).normal((4, 5), dtype=np.float64)
    g = finite_difference_gradient(lambda v: float((v ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)


def test_finite_difference_non_finite():
    with pytest.raises(NumericError):
        finite_difference_gradient(lambda v: float("nan"), np.zeros(3))
    with pytest.raises(ParameterError):
        finite_difference_gradient(lambda v: 0.0, np.zeros(3), eps=0)


@pytest.mark.parametrize("total,workers", [(10, 3), (3, 8), (100, 1), (7, 7)])
def test_chunk_ranges_cover(total, workers):
    r = chunk_ranges(total, workers)
    assert r[0][0] == 0 and r[-1][1] == total
    assert all(a[1] == b[0] for a, b in zip(r, r[1:]))
