"""Image-quality metrics, the withheld-frame protocol, kernel inspection and benchmarks."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ParameterError
from .op import DenseKernelPair, KernelField, dense_local_conv_oracle, memory_footprint, outer_product_kernels, sepconv_forward

PSNR_CAP = 100.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
LUMA = np.array([0.299, 0.587, 0.114])


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    return img


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    """Mean SSIM of two single-channel images.

    Gaussian 11x11 window (sigma 1.5), K1=0.01, K2=0.03. Local statistics
    use edge-replicated filtering; when both extents exceed the window the
    half-window border is discarded, as in the usual valid-filter form.
    """
    g = _gaussian_window()

    def blur(x):
        return correlate1d(correlate1d(x, g, axis=0, mode="nearest"), g, axis=1, mode="nearest")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a * mu_a
    sbb = blur(b * b) - mu_b * mu_b
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    smap = num / den
    r = SSIM_WINDOW // 2
    if smap.shape[0] > SSIM_WINDOW - 1 and smap.shape[1] > SSIM_WINDOW - 1:
        smap = smap[r:-r, r:-r]
    return float(np.clip(smap.mean(), -1.0, 1.0))


def psnr_from_rmse(rmse: float) -> float:
    if rmse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(255.0 / rmse))


def metrics(pred: np.ndarray, truth: np.ndarray) -> dict:
    """MAE, RMSE, PSNR (dB) and SSIM of frames given in [0, 1], scored on the 0-255 scale."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ParameterError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    d = (pred - truth) * 255.0
    mae = float(np.abs(d).mean())
    rmse = float(np.sqrt((d * d).mean()))
    return {
        "MAE": mae,
        "RMSE": rmse,
        "PSNR": psnr_from_rmse(rmse),
        "SSIM": ssim(_luma(pred) * 255.0, _luma(truth) * 255.0),
    }


METRIC_KEYS = ("MAE", "RMSE", "PSNR", "SSIM")


@dataclass
class MetricsReport:
    frames: list = field(default_factory=list)  # (index, metrics dict)
    seconds_per_frame: float = 0.0

    @property
    def count(self) -> int:
        return len(self.frames)

    def aggregate(self) -> dict:
        if not self.frames:
            raise ParameterError("empty report")
        return {k: float(np.mean([m[k] for _, m in self.frames])) for k in METRIC_KEYS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("frame",) + METRIC_KEYS)
        for idx, m in self.frames:
            w.writerow([idx] + [f"{m[k]:.6f}" for k in METRIC_KEYS])
        agg = self.aggregate()
        w.writerow(["mean"] + [f"{agg[k]:.6f}" for k in METRIC_KEYS])
        return buf.getvalue()

    def to_text(self) -> str:
        agg = self.aggregate()
        lines = [f"frames evaluated: {self.count}"]
        lines += [f"{k:>5}: {agg[k]:.4f}" for k in METRIC_KEYS]
        lines.append(f"seconds/frame: {self.seconds_per_frame:.4f}")
        return "\n".join(lines) + "\n"


def overlay_baseline(I1: np.ndarray, I2: np.ndarray) -> np.ndarray:
    """Per-pixel average of the two inputs."""
    if I1.shape != I2.shape:
        raise ParameterError("frame shapes differ")
    return (I1 + I2) / 2


def withheld_frame_eval(frames, interpolator) -> MetricsReport:
    """Score reconstructions of every odd-indexed frame from its two neighbours.

    The interpolator only ever sees even-indexed frames.
    """
    if len(frames) < 3:
        raise ParameterError("need at least 3 frames")
    report = MetricsReport()
    elapsed = 0.0
    for k in range(1, len(frames) - 1, 2):
        t0 = time.perf_counter()
        pred = interpolator(frames[k - 1], frames[k + 1])
        elapsed += time.perf_counter() - t0
        report.frames.append((k, metrics(pred, frames[k])))
    report.seconds_per_frame = elapsed / report.count
    return report


# Kernel inspection ---------------------------------------------------------


def _com(kv, kh):
    # centre of mass of |outer(kv, kh)| relative to the kernel centre; |K| factorizes
    n = kv.shape[-1]
    taps = np.arange(n) - n // 2
    av, ah = np.abs(kv), np.abs(kh)
    sv, sh = av.sum(-1), ah.sum(-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cy = (av * taps).sum(-1) / sv
        cx = (ah * taps).sum(-1) / sh
    mass = sv * sh
    return np.nan_to_num(cy), np.nan_to_num(cx), mass


@dataclass
class KernelOffsets:
    """Per-pixel centre-of-mass offsets ``(dy, dx)`` of the 2D kernels."""

    first: np.ndarray  # (..., 2) for K1
    second: np.ndarray  # (..., 2) for K2
    combined: np.ndarray  # (..., 2) over |K1| + |K2|
    mass1: np.ndarray
    mass2: np.ndarray

    @property
    def motion(self) -> np.ndarray:
        """Displacement between the two kernels' centres, ``second - first``."""
        return self.second - self.first


def kernel_offsets(kf: KernelField) -> KernelOffsets:
    y1, x1, m1 = _com(kf.k1v, kf.k1h)
    y2, x2, m2 = _com(kf.k2v, kf.k2h)
    tot = m1 + m2
    with np.errstate(invalid="ignore", divide="ignore"):
        cy = np.nan_to_num((m1 * y1 + m2 * y2) / tot)
        cx = np.nan_to_num((m1 * x1 + m2 * x2) / tot)
    return KernelOffsets(np.stack([y1, x1], -1), np.stack([y2, x2], -1), np.stack([cy, cx], -1), m1, m2)


def center_mass_fraction(kf: KernelField, radius: int = 1) -> np.ndarray:
    """Share of ``|K1| + |K2|`` inside the central ``(2r+1)^2`` window, per pixel."""
    n = kf.n
    c = slice(n // 2 - radius, n // 2 + radius + 1)
    inner = (np.abs(kf.k1v[..., c]).sum(-1) * np.abs(kf.k1h[..., c]).sum(-1)
             + np.abs(kf.k2v[..., c]).sum(-1) * np.abs(kf.k2h[..., c]).sum(-1))
    total = (np.abs(kf.k1v).sum(-1) * np.abs(kf.k1h).sum(-1) + np.abs(kf.k2v).sum(-1) * np.abs(kf.k2h).sum(-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.nan_to_num(inner / total)


@dataclass
class KernelView:
    k1_image: np.ndarray  # (n, n) in [0, 1]
    k2_image: np.ndarray
    offset: tuple  # (dy, dx) centre of mass of |K1| + |K2|
    offset1: tuple
    offset2: tuple


def kernel_visualize(kf: KernelField, x: int, y: int) -> KernelView:
    """Equivalent 2D kernels at pixel ``(x, y)``, scaled jointly to [0, 1] for display."""
    if kf.batched:
        raise ParameterError("kernel_visualize takes an unbatched kernel field")
    H, W = kf.shape[:2]
    if not (0 <= x < W and 0 <= y < H):
        raise ParameterError(f"pixel ({x}, {y}) outside {W}x{H}")
    pix = KernelField(*(a[y:y + 1, x:x + 1] for a in kf.arrays()))
    dk = outer_product_kernels(pix)
    K1, K2 = np.abs(dk.K1[0, 0]), np.abs(dk.K2[0, 0])
    peak = max(K1.max(), K2.max())
    scale = 1.0 / peak if peak > 0 else 0.0
    off = kernel_offsets(pix)
    return KernelView(
        (K1 * scale).astype(np.float32),
        (K2 * scale).astype(np.float32),
        tuple(float(v) for v in off.combined[0, 0]),
        tuple(float(v) for v in off.first[0, 0]),
        tuple(float(v) for v in off.second[0, 0]),
    )


# Benchmarks ----------------------------------------------------------------


@dataclass
class BenchResult:
    width: int
    height: int
    n: int
    mode: str
    seconds: float
    bytes: int


BENCH_FIELDS = ("width", "height", "n", "mode", "seconds", "bytes")


def bench_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_FIELDS)
    for r in results:
        w.writerow([r.width, r.height, r.n, r.mode, f"{r.seconds:.6f}", r.bytes])
    return buf.getvalue()


def _layer_stride(name: str, levels: int) -> int:
    block = name.split(".", 1)[0]
    if block == "mid":
        return 2 ** levels
    if block.startswith("enc"):
        return 2 ** int(block[3:])
    if block.startswith("dec"):
        lvl = int(block[3:])
        return 2 ** (lvl + 1) if name.endswith(".up") else 2 ** lvl
    return 1


def activation_bytes(config, width: int, height: int, bytes_per_value: int = 4) -> int:
    """Sum of all conv outputs of one forward pass at the padded frame size."""
    m = config.multiple
    H, W = -(-height // m) * m, -(-width // m) * m
    total = 0
    for name, _, cout in config.conv_layers():
        s = _layer_stride(name, config.levels)
        total += (H // s) * (W // s) * cout * bytes_per_value
    return total


def _median_time(fn, repetitions):
    times = []
    for _ in range(max(1, repetitions)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench(interpolator, width: int, height: int, repetitions: int = 3, n: int | None = None, seed: int = 0) -> BenchResult:
    """Median wall time of one full-frame interpolation and a working-set estimate.

    The estimate is the separable kernel storage plus, when the interpolator
    carries network parameters, the activations of one forward pass.
    """
    if width <= 0 or height <= 0:
        raise ParameterError("dimensions must be positive")
    params = getattr(interpolator, "params", None)
    if n is None:
        n = params.config.kernel_size if params is not None else 51
    rng = np.random.default_rng(seed)
    I1 = rng.random((height, width, 3)).astype(np.float32)
    I2 = rng.random((height, width, 3)).astype(np.float32)
    secs = _median_time(lambda: interpolator(I1, I2), repetitions)
    nbytes = memory_footprint(width, height, n, "separable")
    if params is not None:
        nbytes += activation_bytes(params.config, width, height)
    return BenchResult(width, height, n, "interpolate", secs, nbytes)


def bench_operator(width: int, height: int, n: int, repetitions: int = 5, modes=("separable", "full2d"), seed: int = 0):
    """Median time of the separable operator and of the dense reference on random data."""
    rng = np.random.default_rng(seed)
    Hp, Wp = height + n - 1, width + n - 1
    I1 = rng.random((Hp, Wp, 3)).astype(np.float32)
    I2 = rng.random((Hp, Wp, 3)).astype(np.float32)
    kf = KernelField(*(rng.standard_normal((height, width, n)).astype(np.float32) for _ in range(4)))
    results = []
    for mode in modes:
        if mode == "separable":
            secs = _median_time(lambda: sepconv_forward(I1, I2, kf), repetitions)
        else:
            dk = outer_product_kernels(kf)
            secs = _median_time(lambda: dense_local_conv_oracle(I1, I2, dk), repetitions)
            del dk
        results.append(BenchResult(width, height, n, mode, secs, memory_footprint(width, height, n, mode)))
    return results
