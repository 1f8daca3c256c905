import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepconv.errors import ParameterError
from sepconv.numeric import RandomStream, finite_difference_gradient
from sepconv.op import (KernelField, dense_local_conv_oracle, memory_footprint, outer_product_kernels,
                        replicate_pad, sepconv_backward_kernels, sepconv_forward)


def random_case(seed, H, W, n, C=3, dtype=np.float64, batch=None):
    r = RandomStream(seed)
    lead = () if batch is None else (batch,)
    I1 = r.uniform(lead + (H + n - 1, W + n - 1, C), dtype=dtype)
    I2 = r.uniform(lead + (H + n - 1, W + n - 1, C), dtype=dtype)
    kf = KernelField(*(r.normal(lead + (H, W, n), dtype=dtype) for _ in range(4)))
    return I1, I2, kf


def naive(I1, I2, kf):
    # per-pixel einsum over the n x n patch
    n = kf.n
    H, W = kf.shape[:2]
    out = np.zeros((H, W, I1.shape[-1]))
    for y in range(H):
        for x in range(W):
            p1 = I1[y:y + n, x:x + n]
            p2 = I2[y:y + n, x:x + n]
            out[y, x] = (np.einsum("i,j,ijc->c", kf.k1v[y, x], kf.k1h[y, x], p1)
                         + np.einsum("i,j,ijc->c", kf.k2v[y, x], kf.k2h[y, x], p2))
    return out


@pytest.mark.parametrize("H,W,n", [(1, 1, 1), (4, 5, 3), (7, 3, 5), (6, 6, 9)])
def test_forward_matches_naive(H, W, n):
    I1, I2, kf = random_case(H * 100 + n, H, W, n)
    np.testing.assert_allclose(sepconv_forward(I1, I2, kf), naive(I1, I2, kf), rtol=1e-12, atol=1e-12)


def test_dense_oracle_matches_naive():
    I1, I2, kf = random_case(5, 5, 4, 5)
    got = dense_local_conv_oracle(I1, I2, outer_product_kernels(kf))
    np.testing.assert_allclose(got, naive(I1, I2, kf), rtol=1e-12, atol=1e-12)


def test_delta_kernels_copy_centre_pixels():
    # one-hot centre taps on k1, zeros on k2 -> output is the unpadded I1
    H, W, n = 6, 7, 5
    img = RandomStream(1).uniform((H, W, 3), dtype=np.float64)
    e = np.zeros((H, W, n))
    e[..., n // 2] = 1
    kf = KernelField(e, e, np.zeros_like(e), np.zeros_like(e))
    out = sepconv_forward(replicate_pad(img, n // 2), replicate_pad(img, n // 2), kf)
    np.testing.assert_array_equal(out, img)


def test_half_centre_kernels_average_frames():
    H, W, n = 4, 4, 3
    r = RandomStream(2)
    a, b = r.uniform((H, W, 3), dtype=np.float64), r.uniform((H, W, 3), dtype=np.float64)
    e = np.zeros((H, W, n))
    e[..., 1] = np.sqrt(0.5)
    kf = KernelField(e, e, e, e)
    out = sepconv_forward(replicate_pad(a, 1), replicate_pad(b, 1), kf)
    np.testing.assert_allclose(out, (a + b) / 2, rtol=1e-15)


def test_shifted_delta_translates():
    # tap (i, j) = (c, c + 2) reads I1 two columns to the right
    H, W, n = 5, 5, 5
    img = RandomStream(3).uniform((H + n - 1, W + n - 1, 3), dtype=np.float64)
    v = np.zeros((H, W, n)); v[..., 2] = 1
    h = np.zeros((H, W, n)); h[..., 4] = 1
    kf = KernelField(v, h, np.zeros_like(v), np.zeros_like(v))
    np.testing.assert_array_equal(sepconv_forward(img, img, kf), img[2:2 + H, 4:4 + W])


def test_batched_equals_per_sample():
    I1, I2, kf = random_case(4, 5, 6, 3, batch=3)
    out = sepconv_forward(I1, I2, kf)
    for s in range(3):
        ks = KernelField(*(a[s] for a in kf.arrays()))
        np.testing.assert_array_equal(out[s], sepconv_forward(I1[s], I2[s], ks))


def test_worker_count_is_bitwise_invariant():
    I1, I2, kf = random_case(6, 17, 9, 5, dtype=np.float32)
    a = sepconv_forward(I1, I2, kf, workers=1)
    b = sepconv_forward(I1, I2, kf, workers=3)
    assert a.tobytes() == b.tobytes()
    g = RandomStream(7).normal(a.shape, dtype=np.float32)
    ga = sepconv_backward_kernels(I1, I2, kf, g, workers=1)
    gb = sepconv_backward_kernels(I1, I2, kf, g, workers=4)
    for x, y in zip(ga.arrays(), gb.arrays()):
        assert x.tobytes() == y.tobytes()


@pytest.mark.parametrize("seed", range(4))
def test_backward_matches_finite_differences(seed):
    H, W, n = 3, 4, 3
    I1, I2, kf = random_case(seed, H, W, n)
    w = RandomStream(seed + 50).normal((H, W, 3), dtype=np.float64)
    grads = sepconv_backward_kernels(I1, I2, kf, w)
    names = ("k1v", "k1h", "k2v", "k2h")
    for name, g in zip(names, grads.arrays()):
        def f(t, name=name):
            parts = dict(zip(names, kf.arrays()))
            parts[name] = t
            return float((sepconv_forward(I1, I2, KernelField(**parts)) * w).sum())
        fd = finite_difference_gradient(f, getattr(kf, name))
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_backward_is_linear_in_grad_out():
    I1, I2, kf = random_case(9, 4, 4, 3)
    r = RandomStream(10)
    g1, g2 = r.normal((4, 4, 3), dtype=np.float64), r.normal((4, 4, 3), dtype=np.float64)
    a = sepconv_backward_kernels(I1, I2, kf, g1)
    b = sepconv_backward_kernels(I1, I2, kf, g2)
    c = sepconv_backward_kernels(I1, I2, kf, 2 * g1 - g2)
    for x, y, z in zip(a.arrays(), b.arrays(), c.arrays()):
        np.testing.assert_allclose(z, 2 * x - y, rtol=1e-10, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(H=st.integers(1, 8), W=st.integers(1, 8), half=st.integers(0, 3), seed=st.integers(0, 10**6))
def test_forward_property_vs_dense(H, W, half, seed):
    n = 2 * half + 1
    I1, I2, kf = random_case(seed, H, W, n, dtype=np.float32)
    got = sepconv_forward(I1, I2, kf)
    ref = dense_local_conv_oracle(I1.astype(np.float64), I2.astype(np.float64),
                                  outer_product_kernels(kf.astype(np.float64)))
    scale = np.abs(ref).max() + 1
    assert np.abs(got - ref).max() <= 1e-5 * scale


def test_shape_errors():
    I1, I2, kf = random_case(0, 4, 4, 3)
    with pytest.raises(ParameterError):
        sepconv_forward(I1[:-1], I2[:-1], kf)
    with pytest.raises(ParameterError):
        sepconv_forward(I1, I2[:, :-1], kf)
    with pytest.raises(ParameterError):
        sepconv_backward_kernels(I1, I2, kf, np.zeros((4, 4, 2)))
    with pytest.raises(ParameterError):
        KernelField(*(np.zeros((2, 2, 4)) for _ in range(4)))
    with pytest.raises(ParameterError):
        KernelField(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_memory_footprint_formula():
    assert memory_footprint(10, 20, 3, "separable") == 10 * 20 * 4 * 3 * 4
    assert memory_footprint(10, 20, 3, "full2d") == 10 * 20 * 2 * 9 * 4
    assert memory_footprint(1, 1, 1, "separable", bytes_per_coeff=8) == 32
    with pytest.raises(ParameterError):
        memory_footprint(10, 10, 4)
    with pytest.raises(ParameterError):
        memory_footprint(10, 10, 3, "tiled")


def test_replicate_pad_edges():
    img = np.arange(12, dtype=np.float64).reshape(2, 2, 3)
    p = replicate_pad(img, (1, 0, 2, 1))
    assert p.shape == (3, 5, 3)
    np.testing.assert_array_equal(p[0, 0], img[0, 0])
    np.testing.assert_array_equal(p[-1, -1], img[-1, -1])
    with pytest.raises(ParameterError):
        replicate_pad(img, -1)
