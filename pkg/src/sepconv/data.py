"""Training-set construction: triplet extraction, motion annotation,
flow-weighted selection and on-the-fly augmentation.

Also hosts the synthetic generators (band-limited translating textures) used
by the tests and the toy training runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .numeric import RandomStream

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class PipelineConfig:
    crop_size: int = 150
    train_size: int = 128
    stride: int = 25
    shot_threshold: float = 0.25
    texture_threshold: float = 0.02
    block: int = 8
    search_radius: int = 24
    weight_floor: float = 0.05
    max_shift: int = 6


@dataclass
class TripletSample:
    first: np.ndarray
    middle: np.ndarray
    last: np.ndarray
    mean_flow: float
    source: str = ""
    frame_index: int = 0

    def __post_init__(self):
        if not (self.first.shape == self.middle.shape == self.last.shape):
            raise ParameterError("triplet patches differ in extent")
        if not self.mean_flow >= 0:
            raise ParameterError("mean_flow must be non-negative")


@dataclass
class SampleRecord:
    offset: int
    mean_flow: float
    source: str
    frame_index: int


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    patch_size: int = 150

    def __post_init__(self):
        offs = [r.offset for r in self.records]
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise ParameterError("record offsets must be strictly increasing")

    @property
    def count(self) -> int:
        return len(self.records)

    def flows(self) -> np.ndarray:
        return np.array([r.mean_flow for r in self.records], dtype=np.float64)


@dataclass(frozen=True)
class TransformLog:
    origin: tuple  # (row, col) of the ground-truth crop
    shift: tuple  # relative first->last window displacement, even components
    hflip: bool
    vflip: bool
    swap: bool


@dataclass
class AugmentedPair:
    first: np.ndarray
    truth: np.ndarray
    last: np.ndarray
    log: TransformLog


# Image measures ------------------------------------------------------------


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img[..., :3] @ LUMA


def mean_gradient(gray: np.ndarray) -> float:
    """Mean central-difference gradient magnitude over the interior."""
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        return 0.0
    gy = (gray[2:, 1:-1] - gray[:-2, 1:-1]) / 2
    gx = (gray[1:-1, 2:] - gray[1:-1, :-2]) / 2
    return float(np.sqrt(gx * gx + gy * gy).mean())


def is_shot_boundary(a: np.ndarray, b: np.ndarray, threshold: float = 0.25) -> bool:
    return float(np.abs(to_gray(a) - to_gray(b)).mean()) > threshold


# Motion annotation ---------------------------------------------------------


def mean_flow_block_match(first: np.ndarray, last: np.ndarray, block: int = 8, radius: int = 24,
                          texture_threshold: float = 0.02) -> float:
    """Mean displacement magnitude from exhaustive SAD block matching.

    ``first`` is tiled into non-overlapping ``block x block`` blocks; blocks
    whose mean gradient is below ``texture_threshold`` are skipped. Only
    blocks whose whole ``+-radius`` search window fits inside the patch are
    used (all in-bounds blocks if none fit). Ties go to the smaller
    displacement, then to raster order. Returns 0 when no block qualifies.
    """
    if first.shape != last.shape:
        raise ParameterError("patches differ in extent")
    g1, g2 = to_gray(first), to_gray(last)
    H, W = g1.shape
    ys = list(range(0, H - block + 1, block))
    xs = list(range(0, W - block + 1, block))
    blocks = [(y, x) for y in ys for x in xs
              if y - radius >= 0 and x - radius >= 0 and y + block + radius <= H and x + block + radius <= W]
    full_window = bool(blocks)
    if not full_window:
        blocks = [(y, x) for y in ys for x in xs]
    blocks = [(y, x) for (y, x) in blocks if mean_gradient(g1[y:y + block, x:x + block]) >= texture_threshold]
    if not blocks:
        return 0.0
    by = np.array([b[0] for b in blocks])
    bx = np.array([b[1] for b in blocks])
    offs = np.arange(block)
    rows = by[:, None, None] + offs[None, :, None]
    cols = bx[:, None, None] + offs[None, None, :]
    ref = g1[rows, cols]
    best = np.full(len(blocks), np.inf)
    best_d = np.zeros((len(blocks), 2))
    # candidate order: increasing |d|, then raster; strict < keeps the first minimum
    cand = sorted(((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
                  key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    for dy, dx in cand:
        r = rows + dy
        c = cols + dx
        ok = (by + dy >= 0) & (bx + dx >= 0) & (by + dy + block <= H) & (bx + dx + block <= W)
        if not ok.any():
            continue
        sad = np.full(len(blocks), np.inf)
        sad[ok] = np.abs(g2[r[ok], c[ok]] - ref[ok]).sum(axis=(1, 2))
        better = sad < best
        best[better] = sad[better]
        best_d[better] = (dy, dx)
    return float(np.hypot(best_d[:, 0], best_d[:, 1]).mean())


# Extraction and selection --------------------------------------------------


def extract_triplets(frames, stride: int, rng: RandomStream, cfg: PipelineConfig = PipelineConfig(),
                     source: str = "") -> list[TripletSample]:
    """Candidate samples from a frame sequence.

    Windows of three consecutive frames start every ``stride`` frames. Each
    window gets one random ``crop_size`` crop shared by its three frames.
    Windows spanning a shot boundary (judged on full frames) or whose middle
    crop lacks texture are dropped.
    """
    frames = [np.asarray(f) for f in frames]
    if len(frames) < 3:
        raise ParameterError("need at least 3 frames")
    H, W = frames[0].shape[:2]
    if any(f.shape != frames[0].shape for f in frames):
        raise ParameterError("frames differ in size")
    c = cfg.crop_size
    if H < c or W < c:
        raise ParameterError(f"frames of {H}x{W} are smaller than the {c}x{c} crop")
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    out = []
    for t in range(0, len(frames) - 2, stride):
        y = rng.integers(0, H - c)
        x = rng.integers(0, W - c)
        a, b, d = frames[t], frames[t + 1], frames[t + 2]
        if is_shot_boundary(a, b, cfg.shot_threshold) or is_shot_boundary(b, d, cfg.shot_threshold):
            continue
        crops = [f[y:y + c, x:x + c].astype(np.float32) for f in (a, b, d)]
        if mean_gradient(to_gray(crops[1])) < cfg.texture_threshold:
            continue
        flow = mean_flow_block_match(crops[0], crops[2], cfg.block, cfg.search_radius, cfg.texture_threshold)
        out.append(TripletSample(*crops, mean_flow=flow, source=source, frame_index=t))
    return out


def weighted_select(flows, target_count: int, rng: RandomStream, floor: float = 0.05) -> np.ndarray:
    """Indices of ``target_count`` candidates drawn without replacement.

    Candidate ``i`` has weight ``flows[i] + floor``. Implemented with
    exponential keys (Efraimidis-Spirakis): ``key = -log(u) / weight``, the
    smallest keys win. Returned indices are sorted ascending.
    """
    flows = np.asarray(flows, dtype=np.float64)
    if target_count > flows.size or target_count < 0:
        raise ParameterError(f"cannot select {target_count} of {flows.size} candidates")
    if np.any(flows < 0):
        raise ParameterError("flows must be non-negative")
    u = rng.random(flows.size)
    keys = -np.log1p(-u) / (flows + floor)
    return np.sort(np.argsort(keys, kind="stable")[:target_count])


def build_manifest(candidates: list[TripletSample], target_count: int, rng: RandomStream,
                   cfg: PipelineConfig = PipelineConfig()):
    """Select candidates and lay them out as contiguous records.

    Returns ``(manifest, samples)`` where ``samples`` are in record order.
    """
    idx = weighted_select([c.mean_flow for c in candidates], target_count, rng, cfg.weight_floor)
    samples = [candidates[i] for i in idx]
    size = 3 * cfg.crop_size * cfg.crop_size * 3 * 4
    records = [SampleRecord(k * size, s.mean_flow, s.source, s.frame_index) for k, s in enumerate(samples)]
    return DatasetManifest(records, cfg.crop_size), samples


def flow_percentiles(manifest_or_flows) -> dict:
    """Nearest-rank 90th/95th percentile and maximum of per-sample flows."""
    flows = manifest_or_flows.flows() if isinstance(manifest_or_flows, DatasetManifest) else np.asarray(manifest_or_flows, dtype=np.float64)
    if flows.size == 0:
        raise ParameterError("empty manifest")
    s = np.sort(flows)

    def rank(p):
        return float(s[max(1, math.ceil(p / 100.0 * s.size)) - 1])

    return {"p90": rank(90), "p95": rank(95), "max": float(s[-1])}


# Augmentation --------------------------------------------------------------


def draw_transform(rng: RandomStream, crop: int = 150, size: int = 128, max_shift: int = 6) -> TransformLog:
    """Random crop origin, even relative shift in ``[-max_shift, max_shift]``, flips, swap."""
    half = max_shift // 2
    lo, hi = half, crop - size - half
    if hi < lo:
        raise ParameterError("crop too small for the requested size and shift")
    oy = rng.integers(lo, hi)
    ox = rng.integers(lo, hi)
    sy = 2 * rng.integers(-half, half)
    sx = 2 * rng.integers(-half, half)
    u = rng.random(3)
    return TransformLog((oy, ox), (sy, sx), bool(u[0] < 0.5), bool(u[1] < 0.5), bool(u[2] < 0.5))


def apply_transform(first, middle, last, log: TransformLog, size: int = 128) -> AugmentedPair:
    """Deterministically reproduce an augmentation from its log.

    The first-frame window moves by ``+shift/2`` and the last-frame window by
    ``-shift/2`` around the untouched ground-truth window, so content moving
    linearly still has the ground truth as its exact midpoint.
    """
    oy, ox = log.origin
    hy, hx = log.shift[0] // 2, log.shift[1] // 2
    if log.shift[0] % 2 or log.shift[1] % 2:
        raise ParameterError("shift components must be even")

    def win(img, dy, dx):
        y, x = oy + dy, ox + dx
        if y < 0 or x < 0 or y + size > img.shape[0] or x + size > img.shape[1]:
            raise ParameterError("augmentation window out of bounds")
        return img[y:y + size, x:x + size]

    a, t, b = win(first, hy, hx), win(middle, 0, 0), win(last, -hy, -hx)
    if log.hflip:
        a, t, b = a[:, ::-1], t[:, ::-1], b[:, ::-1]
    if log.vflip:
        a, t, b = a[::-1], t[::-1], b[::-1]
    if log.swap:
        a, b = b, a
    return AugmentedPair(np.ascontiguousarray(a), np.ascontiguousarray(t), np.ascontiguousarray(b), log)


def augment(sample: TripletSample, rng: RandomStream, size: int = 128, max_shift: int = 6) -> AugmentedPair:
    log = draw_transform(rng, sample.first.shape[0], size, max_shift)
    return apply_transform(sample.first, sample.middle, sample.last, log, size)


def temporal_swap(pair: AugmentedPair) -> AugmentedPair:
    log = TransformLog(pair.log.origin, pair.log.shift, pair.log.hflip, pair.log.vflip, not pair.log.swap)
    return AugmentedPair(pair.last, pair.truth, pair.first, log)


class TripletDataset:
    """Stored 150x150 samples served as augmented 128x128 training triplets."""

    def __init__(self, samples: list[TripletSample], size: int = 128, max_shift: int = 6):
        self.samples = samples
        self.size = size
        self.max_shift = max_shift

    def __len__(self):
        return len(self.samples)

    def sample(self, index: int, rng: RandomStream):
        p = augment(self.samples[index], rng, self.size, self.max_shift)
        return p.first, p.truth, p.last


# Synthetic material --------------------------------------------------------


class Texture:
    """Band-limited RGB texture: a squashed sum of random plane waves.

    The wave sum is normalized to unit variance per channel and passed
    through ``0.5 + 0.5 * tanh(contrast * s)``. Both steps are pointwise, so
    any sub-pixel translation still renders exactly.
    """

    def __init__(self, rng: RandomStream, waves: int = 16, fmin: float = 0.02, fmax: float = 0.12,
                 contrast: float = 1.5):
        self.freq = rng.uniform(waves, fmin, fmax, dtype=np.float64)
        self.angle = rng.uniform(waves, 0.0, 2 * np.pi, dtype=np.float64)
        self.phase = rng.uniform((waves, 3), 0.0, 2 * np.pi, dtype=np.float64)
        amp = rng.uniform((waves, 3), 0.2, 1.0, dtype=np.float64)
        # a random-phase cosine has variance 1/2
        self.amp = amp / np.sqrt((amp * amp).sum(axis=0, keepdims=True) / 2)
        self.contrast = contrast

    def render(self, height: int, width: int, dy: float = 0.0, dx: float = 0.0) -> np.ndarray:
        """Texture content translated by ``(dy, dx)``: ``out(y, x) = T(y - dy, x - dx)``."""
        y = np.arange(height)[:, None] - dy
        x = np.arange(width)[None, :] - dx
        fy = self.freq * np.sin(self.angle)
        fx = self.freq * np.cos(self.angle)
        acc = np.zeros((height, width, 3))
        for k in range(len(self.freq)):
            arg = 2 * np.pi * (fy[k] * y + fx[k] * x)
            acc += self.amp[k] * np.cos(arg[..., None] + self.phase[k])
        return (0.5 + 0.5 * np.tanh(self.contrast * acc)).astype(np.float32)


def translating_triplet(rng: RandomStream, size: int = 64, motion=None, max_motion: float = 5.0):
    """``(first, middle, last)`` of a texture moving by ``motion`` from first to last.

    ``motion`` is ``(dy, dx)`` in pixels; if omitted a random direction and a
    magnitude uniform in ``[0, max_motion]`` are drawn.
    """
    tex = Texture(rng)
    if motion is None:
        mag = float(rng.random(1)[0]) * max_motion
        ang = float(rng.random(1)[0]) * 2 * np.pi
        motion = (mag * math.sin(ang), mag * math.cos(ang))
    dy, dx = motion
    return (tex.render(size, size, -dy / 2, -dx / 2), tex.render(size, size), tex.render(size, size, dy / 2, dx / 2))


class SyntheticTranslationDataset:
    """Deterministic translating-texture triplets; sample ``i`` depends only on ``(seed, i)``."""

    def __init__(self, count: int, size: int = 64, max_motion: float = 5.0, seed: int = 0, flips: bool = True):
        self.count = count
        self.size = size
        self.max_motion = max_motion
        self.seed = seed
        self.flips = flips

    def __len__(self):
        return self.count

    def triplet(self, index: int):
        return translating_triplet(RandomStream(self.seed).child(index), self.size, max_motion=self.max_motion)

    def sample(self, index: int, rng: RandomStream):
        a, t, b = self.triplet(index)
        if self.flips:
            u = rng.random(3)
            if u[0] < 0.5:
                a, t, b = a[:, ::-1], t[:, ::-1], b[:, ::-1]
            if u[1] < 0.5:
                a, t, b = a[::-1], t[::-1], b[::-1]
            if u[2] < 0.5:
                a, b = b, a
        return a, t, b


def translating_sequence(rng: RandomStream, frames: int, height: int, width: int, velocity=(0.0, 2.0)):
    """Frames of one texture moving ``velocity`` pixels per frame."""
    tex = Texture(rng)
    return [tex.render(height, width, k * velocity[0], k * velocity[1]) for k in range(frames)]
