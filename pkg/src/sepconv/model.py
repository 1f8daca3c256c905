"""Encoder-decoder network that predicts four 1D kernels per output pixel.

Layout (``L = levels``, ``w_l`` = channel width of level ``l``)::

    input  = concat(I1, I2)                       6 channels, H x W
    enc{l} = convs_per_block x (conv3x3 + ReLU)   -> skip e_l, then avg_pool2
    mid    = convs_per_block x (conv3x3 + ReLU)   at H / 2**L
    dec{l}, l = L-1 .. 1:
        u = upsample(ReLU(conv3x3(x)))            dec{l}.up maps to w_l
        s = u + e_l                               additive skip
        x = s + stack(s)                          stack = convs_per_block x (conv3x3 + ReLU)
    head_k in (k1v, k1h, k2v, k2h):
        upsample(x) -> conv+ReLU -> conv+ReLU -> conv to n channels (linear)

The direct-synthesis variant replaces the four heads with one 3-channel
head and adds batch normalization after every convolution block.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, StateError
from .layers import (
    avg_pool2,
    avg_pool2_backward,
    batch_norm,
    batch_norm_backward,
    conv3x3,
    conv3x3_backward,
    im2col,
    relu,
    relu_backward,
    upsample_bilinear_x2,
    upsample_bilinear_x2_backward,
)
from .numeric import DEFAULT_DTYPE, RandomStream
from .op import KernelField

HEADS = ("k1v", "k1h", "k2v", "k2h")
HEAD_CONVS = 3
VARIANTS = ("kernel_prediction", "direct_synthesis")


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 5
    widths: tuple = (32, 64, 128, 256, 512)
    convs_per_block: int = 3
    kernel_size: int = 51
    variant: str = "kernel_prediction"
    width_scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.levels < 1:
            raise ParameterError("levels must be >= 1")
        if len(self.widths) != self.levels:
            raise ParameterError(f"{self.levels} levels need {self.levels} widths, got {len(self.widths)}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError("kernel_size must be odd and positive")
        if self.convs_per_block < 1 or self.width_scale < 1:
            raise ParameterError("convs_per_block and width_scale must be >= 1")
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")

    @property
    def channels(self) -> tuple:
        """Effective per-level widths after applying ``width_scale``."""
        return tuple(max(1, w // self.width_scale) for w in self.widths)

    @property
    def head_width(self) -> int:
        ch = self.channels
        return ch[1] if self.levels > 1 else ch[0]

    @property
    def multiple(self) -> int:
        return 2 ** self.levels

    def conv_layers(self) -> list[tuple[str, int, int]]:
        """``(name, c_in, c_out)`` for every conv layer, in initialization order."""
        ch, k, L = self.channels, self.convs_per_block, self.levels
        layers = []
        for lvl in range(L):
            cin = 6 if lvl == 0 else ch[lvl - 1]
            for i in range(k):
                layers.append((f"enc{lvl}.conv{i}", cin if i == 0 else ch[lvl], ch[lvl]))
        for i in range(k):
            layers.append((f"mid.conv{i}", ch[L - 1], ch[L - 1]))
        for lvl in range(L - 1, 0, -1):
            cin = ch[L - 1] if lvl == L - 1 else ch[lvl + 1]
            layers.append((f"dec{lvl}.up", cin, ch[lvl]))
            for i in range(k):
                layers.append((f"dec{lvl}.conv{i}", ch[lvl], ch[lvl]))
        hw = self.head_width
        heads = HEADS if self.variant == "kernel_prediction" else ("rgb",)
        out = self.kernel_size if self.variant == "kernel_prediction" else 3
        for h in heads:
            for i in range(HEAD_CONVS):
                layers.append((f"head_{h}.conv{i}", hw, out if i == HEAD_CONVS - 1 else hw))
        return layers

    def norm_layers(self) -> list[tuple[str, int]]:
        """``(name, channels)`` of batch-norm layers (direct synthesis only)."""
        if self.variant != "direct_synthesis":
            return []
        ch, L = self.channels, self.levels
        return (
            [(f"enc{lvl}.bn", ch[lvl]) for lvl in range(L)]
            + [("mid.bn", ch[L - 1])]
            + [(f"dec{lvl}.bn", ch[lvl]) for lvl in range(L - 1, 0, -1)]
        )


class Parameters(dict):
    """Name -> tensor map for one network, plus its config.

    Trainable tensors end in ``.w``, ``.b``, ``.scale`` or ``.offset``;
    batch-norm running statistics (``.mean``, ``.var``) are state.
    ``version`` increases whenever the tensors are updated in place.
    """

    def __init__(self, config: ModelConfig, tensors=None):
        super().__init__(tensors or {})
        self.config = config
        self.version = 0

    def trainable(self) -> list[str]:
        return [k for k in self if k.rsplit(".", 1)[-1] in ("w", "b", "scale", "offset")]

    def copy(self) -> "Parameters":
        p = Parameters(self.config, {k: v.copy() for k, v in self.items()})
        p.version = self.version
        return p

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.config, {k: v.astype(dtype) for k, v in self.items()})


def expected_shapes(config: ModelConfig) -> dict:
    shapes = {}
    for name, cin, cout in config.conv_layers():
        shapes[name + ".w"] = (3, 3, cin, cout)
        shapes[name + ".b"] = (cout,)
    for name, c in config.norm_layers():
        for suffix in ("scale", "offset", "mean", "var"):
            shapes[f"{name}.{suffix}"] = (c,)
    return shapes


def build(config: ModelConfig, rng: RandomStream, dtype=DEFAULT_DTYPE) -> Parameters:
    """Initialize a network.

    Conv weights are orthogonalized Gaussian matrices of shape
    ``(9 * c_in, c_out)`` rescaled to mean square ``2 / fan_in`` (He
    scaling). Biases start at zero, batch-norm scales at one.
    """
    params = Parameters(config)
    for name, cin, cout in config.conv_layers():
        fan_in = 9 * cin
        g = rng.normal((fan_in, cout), dtype=np.float64)
        u, _, vt = np.linalg.svd(g, full_matrices=False)
        q = u @ vt
        q *= np.sqrt(2.0 / fan_in) / np.sqrt(np.mean(q * q))
        params[name + ".w"] = q.reshape(3, 3, cin, cout).astype(dtype)
        params[name + ".b"] = np.zeros(cout, dtype=dtype)
    for name, c in config.norm_layers():
        params[name + ".scale"] = np.ones(c, dtype=dtype)
        params[name + ".offset"] = np.zeros(c, dtype=dtype)
        params[name + ".mean"] = np.zeros(c, dtype=dtype)
        params[name + ".var"] = np.ones(c, dtype=dtype)
    return params


def validate(params: Parameters):
    want = expected_shapes(params.config)
    if set(want) != set(params):
        missing = sorted(set(want) - set(params))
        extra = sorted(set(params) - set(want))
        raise ParameterError(f"parameter names mismatch; missing {missing}, unexpected {extra}")
    for k, shape in want.items():
        if params[k].shape != shape:
            raise ParameterError(f"{k}: shape {params[k].shape}, expected {shape}")


def infer_config(tensors: dict) -> ModelConfig:
    """Recover the architecture from tensor names and shapes."""
    levels = 0
    while f"enc{levels}.conv0.w" in tensors:
        levels += 1
    if levels == 0:
        raise ParameterError("no encoder layers found")
    cpb = 0
    while f"enc0.conv{cpb}.w" in tensors:
        cpb += 1
    widths = tuple(int(tensors[f"enc{lvl}.conv0.w"].shape[-1]) for lvl in range(levels))
    if "head_rgb.conv0.w" in tensors:
        variant, n = "direct_synthesis", 51
    else:
        variant = "kernel_prediction"
        n = int(tensors[f"head_k1v.conv{HEAD_CONVS - 1}.w"].shape[-1])
    return ModelConfig(levels=levels, widths=widths, convs_per_block=cpb, kernel_size=n, variant=variant)


@dataclass
class ActivationCache:
    """Saved activations of a train-mode forward pass."""

    version: int
    params_id: int
    store: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)


def _as_batch(I1, I2):
    if I1.shape != I2.shape:
        raise ParameterError(f"frame shapes differ: {I1.shape} vs {I2.shape}")
    single = I1.ndim == 3
    if single:
        I1, I2 = I1[None], I2[None]
    if I1.ndim != 4 or I1.shape[-1] != 3:
        raise ParameterError(f"expected RGB frames (H, W, 3) or (N, H, W, 3), got {I1.shape}")
    return np.concatenate([I1, I2], axis=-1), single


class _Runner:
    """Shared forward/backward machinery for both variants."""

    def __init__(self, params: Parameters, mode: str, workers: int):
        if mode not in ("train", "infer"):
            raise ParameterError(f"unknown mode {mode!r}")
        self.p = params
        self.cfg = params.config
        self.mode = mode
        self.workers = workers
        self.bn = self.cfg.variant == "direct_synthesis"
        self.cache = ActivationCache(params.version, id(params)) if mode == "train" else None

    def conv(self, name, x, act=True):
        cols = im2col(x)
        y = conv3x3(x, self.p[name + ".w"], self.p[name + ".b"], self.workers, cols=cols)
        if act:
            y = relu(y)
        if self.cache is not None:
            self.cache.store[name] = (x, y if act else None, cols)
        return y

    def stack(self, prefix, x):
        for i in range(self.cfg.convs_per_block):
            x = self.conv(f"{prefix}.conv{i}", x)
        return x

    def norm(self, name, x):
        if not self.bn:
            return x
        p = self.p
        y, c, m, v = batch_norm(x, p[name + ".scale"], p[name + ".offset"], p[name + ".mean"], p[name + ".var"], self.mode)
        if self.cache is not None:
            self.cache.bn[name] = c
            p[name + ".mean"], p[name + ".var"] = m, v
        return y

    def trunk(self, x):
        cfg = self.cfg
        skips = []
        for lvl in range(cfg.levels):
            if x.shape[1] % 2 or x.shape[2] % 2:
                raise ParameterError(f"input extent not divisible by 2**{cfg.levels}")
            e = self.norm(f"enc{lvl}.bn", self.stack(f"enc{lvl}", x))
            skips.append(e)
            x = avg_pool2(e)
        x = self.norm("mid.bn", self.stack("mid", x))
        for lvl in range(cfg.levels - 1, 0, -1):
            s = upsample_bilinear_x2(self.conv(f"dec{lvl}.up", x)) + skips[lvl]
            x = self.norm(f"dec{lvl}.bn", s + self.stack(f"dec{lvl}", s))
        return upsample_bilinear_x2(x)

    def head(self, name, u):
        for i in range(HEAD_CONVS):
            u = self.conv(f"head_{name}.conv{i}", u, act=i < HEAD_CONVS - 1)
        return u

    # backward ---------------------------------------------------------

    def conv_back(self, name, dy, grads, need_dx=True):
        x, y, cols = self.cache.store[name]
        if y is not None:
            dy = relu_backward(y, dy)
        dx, dw, db = conv3x3_backward(x, self.p[name + ".w"], dy, self.workers, need_dx, cols)
        grads[name + ".w"] = dw
        grads[name + ".b"] = db
        return dx

    def stack_back(self, prefix, dy, grads, need_dx=True):
        for i in reversed(range(self.cfg.convs_per_block)):
            dy = self.conv_back(f"{prefix}.conv{i}", dy, grads, need_dx or i > 0)
        return dy

    def norm_back(self, name, dy, grads):
        if not self.bn:
            return dy
        dx, ds, do = batch_norm_backward(self.cache.bn[name], dy)
        grads[name + ".scale"] = ds
        grads[name + ".offset"] = do
        return dx

    def trunk_back(self, du, grads):
        cfg = self.cfg
        dx = upsample_bilinear_x2_backward(du)
        dskips = [None] * cfg.levels
        for lvl in range(1, cfg.levels):
            ds = self.norm_back(f"dec{lvl}.bn", dx, grads)
            ds = ds + self.stack_back(f"dec{lvl}", ds, grads)
            dskips[lvl] = ds
            dx = self.conv_back(f"dec{lvl}.up", upsample_bilinear_x2_backward(ds), grads)
        dx = self.stack_back("mid", self.norm_back("mid.bn", dx, grads), grads)
        for lvl in range(cfg.levels - 1, -1, -1):
            de = avg_pool2_backward(dx)
            if dskips[lvl] is not None:
                de = de + dskips[lvl]
            de = self.norm_back(f"enc{lvl}.bn", de, grads)
            dx = self.stack_back(f"enc{lvl}", de, grads, need_dx=lvl > 0)
        return grads

    def head_back(self, name, dy, grads):
        for i in reversed(range(HEAD_CONVS)):
            dy = self.conv_back(f"head_{name}.conv{i}", dy, grads)
        return dy


def forward(params: Parameters, I1, I2, mode: str = "infer", workers: int = 1):
    """Predict a kernel field for a frame pair.

    Frames are ``(H, W, 3)`` or batched ``(N, H, W, 3)`` with extents
    divisible by ``2**levels``. Returns the ``KernelField`` in infer mode and
    ``(KernelField, ActivationCache)`` in train mode.
    """
    if params.config.variant != "kernel_prediction":
        raise ParameterError("forward needs a kernel_prediction network; use forward_direct")
    x, single = _as_batch(I1, I2)
    x = x.astype(next(iter(params.values())).dtype, copy=False)
    run = _Runner(params, mode, workers)
    u = run.trunk(x)
    ks = [run.head(h, u) for h in HEADS]
    if single:
        ks = [k[0] for k in ks]
    kf = KernelField(*ks)
    return (kf, run.cache) if mode == "train" else kf


def _check_cache(params, cache):
    if cache is None:
        raise StateError("backward needs the cache of a train-mode forward")
    if cache.params_id != id(params) or cache.version != params.version:
        raise StateError("activation cache is stale: parameters changed since forward")


def backward(params: Parameters, cache: ActivationCache, grad_kf: KernelField, workers: int = 1) -> dict:
    """Gradients of every trainable parameter given d(loss)/d(kernel field)."""
    _check_cache(params, cache)
    run = _Runner(params, "infer", workers)
    run.cache = cache
    grads = {}
    du = None
    for h, g in zip(HEADS, grad_kf.arrays()):
        g = g if g.ndim == 4 else g[None]
        d = run.head_back(h, g.astype(params[f"head_{h}.conv0.w"].dtype, copy=False), grads)
        du = d if du is None else du + d
    run.trunk_back(du, grads)
    return grads


def forward_direct(params: Parameters, I1, I2, mode: str = "infer", workers: int = 1):
    """Direct-synthesis baseline: the network emits the RGB frame itself."""
    if params.config.variant != "direct_synthesis":
        raise ParameterError("forward_direct needs a direct_synthesis network")
    x, single = _as_batch(I1, I2)
    x = x.astype(next(iter(params.values())).dtype, copy=False)
    run = _Runner(params, mode, workers)
    out = run.head("rgb", run.trunk(x))
    if single:
        out = out[0]
    return (out, run.cache) if mode == "train" else out


def backward_direct(params: Parameters, cache: ActivationCache, grad_out, workers: int = 1) -> dict:
    _check_cache(params, cache)
    run = _Runner(params, "infer", workers)
    run.cache = cache
    grad_out = grad_out if grad_out.ndim == 4 else grad_out[None]
    grads = {}
    du = run.head_back("rgb", grad_out, grads)
    run.trunk_back(du, grads)
    return grads

