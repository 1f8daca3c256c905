"""Losses, the AdaMax optimizer and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import NumericError, ParameterError
from .layers import conv3x3, conv3x3_backward, relu, relu_backward
from .model import Parameters, backward, backward_direct, forward, forward_direct
from .numeric import RandomStream, ensure_finite
from .op import KernelField, sepconv_backward_kernels, sepconv_forward

log = logging.getLogger(__name__)


class Region(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    def slices(self):
        return (slice(self.top, self.top + self.height), slice(self.left, self.left + self.width))


def valid_region(frame_extent, n: int) -> Region:
    """Centered region where every ``n x n`` patch of an unpadded frame is in bounds."""
    H, W = frame_extent
    if H < n or W < n:
        raise ParameterError(f"frame {H}x{W} is smaller than the {n}-pixel kernel")
    r = n // 2
    return Region(r, r, H - n + 1, W - n + 1)


def l1_loss(pred: np.ndarray, truth: np.ndarray):
    """Mean absolute difference and its (sub)gradient w.r.t. ``pred``."""
    if pred.shape != truth.shape:
        raise ParameterError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    d = pred - truth
    return float(np.abs(d).mean()), np.sign(d) / d.size


# Feature extractors ------------------------------------------------------


class FeatureExtractor:
    """Frozen image -> feature map used by the feature loss.

    ``kind`` is ``identity``, ``seeded_random_pyramid`` (stride-2 conv + ReLU
    stages with seed-pinned He weights) or ``external_weights`` (same stage
    structure, tensors ``phi{k}.w`` / ``phi{k}.b`` loaded from a weights
    container).
    """

    def __init__(self, kind: str = "identity", tensors: dict | None = None):
        if kind not in ("identity", "seeded_random_pyramid", "external_weights"):
            raise ParameterError(f"unknown extractor {kind!r}")
        self.kind = kind
        self.tensors = dict(tensors or {})
        self.stages = 0
        while f"phi{self.stages}.w" in self.tensors:
            self.stages += 1
        if kind != "identity" and self.stages == 0:
            raise ParameterError("feature extractor has no stages")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def seeded_random_pyramid(cls, seed: int = 19, widths=(8, 16, 32, 32), dtype=np.float64):
        rng = RandomStream(seed)
        tensors, cin = {}, 3
        for k, c in enumerate(widths):
            tensors[f"phi{k}.w"] = (rng.normal((3, 3, cin, c), dtype=np.float64) * math.sqrt(2.0 / (9 * cin))).astype(dtype)
            tensors[f"phi{k}.b"] = np.zeros(c, dtype=dtype)
            cin = c
        return cls("seeded_random_pyramid", tensors)

    @classmethod
    def from_weights(cls, tensors: dict):
        return cls("external_weights", {k: v for k, v in tensors.items() if k.startswith("phi")})

    def forward(self, x: np.ndarray):
        """Features of a batch ``(N, H, W, 3)`` plus a cache for :meth:`backward`."""
        if self.kind == "identity":
            return x, None
        cache = []
        for k in range(self.stages):
            w, b = self.tensors[f"phi{k}.w"], self.tensors[f"phi{k}.b"]
            full = conv3x3(x, w.astype(x.dtype), b.astype(x.dtype))
            y = relu(full[:, ::2, ::2])
            cache.append((x, full.shape, y))
            x = y
        return x, cache

    def backward(self, cache, dfeat: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return dfeat
        d = dfeat
        for k in reversed(range(self.stages)):
            x, full_shape, y = cache[k]
            dfull = np.zeros(full_shape, dtype=d.dtype)
            dfull[:, ::2, ::2] = relu_backward(y, d)
            d, _, _ = conv3x3_backward(x, self.tensors[f"phi{k}.w"].astype(x.dtype), dfull)
        return d


def feature_loss(pred: np.ndarray, truth: np.ndarray, phi: FeatureExtractor):
    """Mean squared feature difference and its gradient w.r.t. ``pred``."""
    if pred.shape != truth.shape:
        raise ParameterError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    single = pred.ndim == 3
    p = pred[None] if single else pred
    t = truth[None] if single else truth
    fp, cache = phi.forward(p)
    ft, _ = phi.forward(t)
    d = fp - ft
    loss = float((d * d).mean())
    grad = phi.backward(cache, 2.0 * d / d.size)
    return loss, grad[0] if single else grad


# Optimizer -----------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)


def adamax_step(params: Parameters, grads: dict, state: OptimizerState) -> Parameters:
    """One in-place AdaMax update.

    ``m <- b1 m + (1 - b1) g``, ``u <- max(b2 u, |g|)``,
    ``theta <- theta - lr / (1 - b1**t) * m / max(u, eps)``.
    A non-finite gradient raises ``NumericError`` before anything changes.
    """
    names = params.trainable()
    for k in names:
        if k not in grads:
            raise ParameterError(f"missing gradient for {k}")
        if grads[k].shape != params[k].shape:
            raise ParameterError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(grads[k])):
            raise NumericError(f"non-finite gradient for {k}; step rejected")
    state.t += 1
    step = state.lr / (1.0 - state.beta1 ** state.t)
    for k in names:
        g = grads[k].astype(params[k].dtype, copy=False)
        m = state.m.get(k)
        u = state.u.get(k)
        if m is None:
            m = np.zeros_like(params[k])
            u = np.zeros_like(params[k])
        m = state.beta1 * m + (1 - state.beta1) * g
        u = np.maximum(state.beta2 * u, np.abs(g))
        state.m[k], state.u[k] = m.astype(params[k].dtype), u.astype(params[k].dtype)
        params[k] -= (step * m / np.maximum(u, state.eps)).astype(params[k].dtype)
    params.version += 1
    return params


# Training loop -----------------------------------------------------------


@dataclass
class LossConfig:
    phase: str = "l1_only"
    extractor: FeatureExtractor | None = None
    learning_rate: float | None = None

    def __post_init__(self):
        if self.phase not in ("l1_only", "lf_finetune"):
            raise ParameterError(f"unknown phase {self.phase!r}")
        if (self.phase == "lf_finetune") != (self.extractor is not None):
            raise ParameterError("an extractor is required for lf_finetune and only for it")
        if self.learning_rate is None:
            self.learning_rate = 1e-3 if self.phase == "l1_only" else 1e-4

    def __call__(self, pred, truth):
        if self.phase == "l1_only":
            return l1_loss(pred, truth)
        return feature_loss(pred, truth, self.extractor)


def interpolation_loss(params: Parameters, first, truth, last, loss_config: LossConfig, workers: int = 1):
    """Loss and parameter gradients for a batch of unpadded triplets.

    Kernel networks are scored on the valid region only; direct synthesis on
    the full frame.
    """
    if params.config.variant == "direct_synthesis":
        pred, cache = forward_direct(params, first, last, "train", workers)
        loss, g = loss_config(pred, truth)
        ensure_finite(np.asarray(loss), "loss")
        return loss, backward_direct(params, cache, g, workers)
    n = params.config.kernel_size
    region = valid_region(first.shape[1:3], n)
    kf, cache = forward(params, first, last, "train", workers)
    kv = kf.crop(*region)
    pred = sepconv_forward(first, last, kv, workers)
    loss, g = loss_config(pred, truth[:, region.slices()[0], region.slices()[1]])
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    gk = sepconv_backward_kernels(first, last, kv, g.astype(pred.dtype), workers)
    full = []
    for a in gk.arrays():
        z = np.zeros(kf.shape, dtype=a.dtype)
        z[:, region.slices()[0], region.slices()[1]] = a
        full.append(z)
    return loss, backward(params, cache, KernelField(*full), workers)


def _gather(dataset, indices, rng: RandomStream, dtype):
    triples = [dataset.sample(int(i), rng.child(int(i))) for i in indices]
    return tuple(np.stack([t[k] for t in triples]).astype(dtype) for k in range(3))


def train(
    params: Parameters,
    dataset,
    loss_config: LossConfig,
    steps: int,
    batch: int = 16,
    rng: RandomStream | None = None,
    state: OptimizerState | None = None,
    checkpoint_every: int = 0,
    checkpoint: Callable[[int, Parameters], None] | None = None,
    workers: int = 1,
    on_step: Callable[[int, float], None] | None = None,
):
    """Run ``steps`` AdaMax iterations over ``dataset``.

    ``dataset`` exposes ``len()`` and ``sample(index, rng) -> (first, truth,
    last)``. Each epoch visits the samples in a seeded random order; sample
    ``i`` of epoch ``e`` receives the stream ``rng.child(e).child(i)``.
    Returns ``(params, curve)`` where ``curve`` holds ``(step, loss, phase)``.
    """
    if len(dataset) == 0:
        raise ParameterError("empty dataset")
    if batch < 1 or steps < 0:
        raise ParameterError("batch must be >= 1 and steps >= 0")
    rng = rng or RandomStream(0)
    state = state or OptimizerState(lr=loss_config.learning_rate)
    dtype = params[params.trainable()[0]].dtype
    curve = []
    order, epoch, pos = None, -1, 0
    for step in range(1, steps + 1):
        idx = []
        while len(idx) < batch:
            if order is None or pos >= len(order):
                epoch += 1
                order, pos = rng.child(epoch).permutation(len(dataset)), 0
            take = order[pos:pos + batch - len(idx)]
            pos += len(take)
            idx.extend(int(i) for i in take)
        first, truth, last = _gather(dataset, idx, rng.child(epoch), dtype)
        loss, grads = interpolation_loss(params, first, truth, last, loss_config, workers)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        adamax_step(params, grads, state)
        curve.append((step, loss, loss_config.phase))
        if on_step is not None:
            on_step(step, loss)
        if checkpoint is not None and checkpoint_every and step % checkpoint_every == 0:
            checkpoint(step, params)
    return params, curve
