"""On-disk formats: weights container, frames, run config, dataset records,
loss curves.

Weights container layout (all little-endian)::

    b"SEPW" | version u32 | count u32 |
    count x (name_len u16 | name utf-8 | rank u8 | dims u64 x rank | float32 payload) |
    crc32 u32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import DatasetManifest, PipelineConfig, SampleRecord, apply_transform, draw_transform
from .errors import IntegrityError, ParameterError
from .model import ModelConfig, Parameters, infer_config, validate

MAGIC = b"SEPW"
CONTAINER_VERSION = 1


# Weights container ----------------------------------------------------------


def encode_tensors(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", CONTAINER_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ParameterError(f"tensor {name!r} cannot be stored")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> dict:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise IntegrityError("not a weights container")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("weights container CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != CONTAINER_VERSION:
        raise IntegrityError(f"unsupported container version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            size = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + size > len(body):
                raise IntegrityError("truncated tensor payload")
            out[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except (struct.error, UnicodeDecodeError) as e:
        raise IntegrityError(f"malformed weights container: {e}") from e
    if pos != len(body):
        raise IntegrityError("trailing bytes in weights container")
    return out


def _atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_tensors(path, tensors: dict):
    _atomic_write(path, encode_tensors(tensors))


def read_tensors(path) -> dict:
    return decode_tensors(Path(path).read_bytes())


def save_weights(path, params: Parameters):
    write_tensors(path, params)


def load_weights(path, kernel_size: int | None = None) -> Parameters:
    """Read a container and rebuild :class:`Parameters`.

    The architecture is inferred from tensor names and shapes; ``kernel_size``
    only matters for direct-synthesis weights, which carry no kernel head.
    """
    tensors = read_tensors(path)
    cfg = infer_config(tensors)
    if kernel_size is not None and cfg.variant == "direct_synthesis":
        cfg = ModelConfig(cfg.levels, cfg.widths, cfg.convs_per_block, kernel_size, cfg.variant)
    params = Parameters(cfg, tensors)
    validate(params)
    return params


# Frames ---------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Load a frame as ``(H, W, 3)`` float32 in ``[0, 1]``.

    PFM keeps its float values; 8- and 16-bit formats are scaled by their
    maximum value.
    """
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    if head in (b"PF", b"Pf"):
        return _read_pfm(path)
    if head == b"P6":
        return _read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        return np.asarray(im, dtype=np.float32) / 255


def _tokens(data: bytes, count: int):
    toks, pos = [], 0
    while len(toks) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        toks.append(data[start:pos])
    return toks, pos + 1


def _read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (_, w, h, maxval), pos = _tokens(data, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    dt = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data, dtype=dt, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return arr.astype(np.float32) / maxval


def _read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (kind, w, h, scale), pos = _tokens(data, 4)
    w, h, scale = int(w), int(h), float(scale)
    ch = 3 if kind == b"PF" else 1
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dt, count=w * h * ch, offset=pos).reshape(h, w, ch)
    arr = arr[::-1].astype(np.float32)  # rows are stored bottom-to-top
    return np.repeat(arr, 3, axis=2) if ch == 1 else arr


def write_image(path, img: np.ndarray):
    """Write a frame; the format follows the suffix (``.pfm``, ``.ppm``, else PNG)."""
    path = Path(path)
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=2)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        h, w = img.shape[:2]
        head = f"PF\n{w} {h}\n-1.0\n".encode()
        _atomic_write(path, head + np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())
        return
    q = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    if suffix == ".ppm":
        h, w = q.shape[:2]
        _atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + q.tobytes())
        return
    from PIL import Image
    import io as _io

    buf = _io.BytesIO()
    Image.fromarray(q, "RGB").save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def read_frame_dir(path) -> list[np.ndarray]:
    """Frames of a directory in lexicographic file-name order."""
    exts = {".png", ".ppm", ".pfm"}
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in exts)
    if not files:
        raise FileNotFoundError(f"no frames in {path}")
    return [read_image(p) for p in files]


# Run configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    # model
    levels: int = 5
    widths: tuple = (32, 64, 128, 256, 512)
    convs_per_block: int = 3
    kernel_size: int = 51
    variant: str = "kernel_prediction"
    width_scale: int = 1
    # training
    batch: int = 16
    l1_steps: int = 1000
    lf_steps: int = 0
    l1_learning_rate: float = 1e-3
    lf_learning_rate: float = 1e-4
    extractor: str = "seeded_random_pyramid"
    extractor_seed: int = 19
    extractor_weights: str = ""
    checkpoint_every: int = 0
    workers: int = 1
    # data
    crop_size: int = 150
    train_size: int = 128
    stride: int = 25
    shot_threshold: float = 0.25
    texture_threshold: float = 0.02
    block: int = 8
    search_radius: int = 24
    weight_floor: float = 0.05
    max_shift: int = 6
    target_count: int = 0
    dataset: str = ""
    # synthetic data
    synthetic_count: int = 0
    synthetic_size: int = 64
    synthetic_motion: float = 5.0
    # seeds
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.levels, self.widths, self.convs_per_block, self.kernel_size,
                           self.variant, self.width_scale)

    def pipeline_config(self) -> PipelineConfig:
        names = {f.name for f in fields(PipelineConfig)}
        return PipelineConfig(**{k: getattr(self, k) for k in names})


class ConfigError(ParameterError):
    """A run configuration line could not be parsed."""


def _convert(kind, text: str):
    if kind is tuple:
        return tuple(int(t) for t in text.replace(",", " ").split())
    if kind is int:
        return int(text, 0)
    if kind is float:
        return float(text)
    return text


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: type(f.default) for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}: {line.strip()!r}"
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, value = (p.strip() for p in body.split("=", 1))
        if key not in types:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        try:
            values[key] = _convert(types[key], value)
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key!r}: {e}") from e
    cfg = RunConfig(**values)
    try:
        cfg.model_config()
    except ParameterError as e:
        raise ConfigError(f"{source}: {e}") from e
    return cfg


def read_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path}: not UTF-8 text") from e
    return parse_run_config(text, str(path))


def format_run_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


# Dataset files --------------------------------------------------------------


def write_dataset(manifest_path, records_path, samples, patch_size: int):
    """Write triplet patches back to back plus a ``key = value`` manifest.

    Each record is ``first | middle | last`` as raw little-endian float32
    ``(patch, patch, 3)`` arrays. Returns the :class:`DatasetManifest`.
    """
    stride = 3 * patch_size * patch_size * 3 * 4
    records, chunks = [], []
    for i, s in enumerate(samples):
        for a in (s.first, s.middle, s.last):
            if a.shape != (patch_size, patch_size, 3):
                raise ParameterError(f"sample {i} has patch shape {a.shape}")
            chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
        records.append(SampleRecord(i * stride, float(s.mean_flow), s.source, int(s.frame_index)))
    manifest = DatasetManifest(records, patch_size)
    lines = [f"patch_size = {patch_size}", f"count = {len(records)}"]
    for r in records:
        lines.append(f"record = {r.offset} {r.mean_flow!r} {r.frame_index} {r.source}")
    _atomic_write(records_path, b"".join(chunks))
    _atomic_write(manifest_path, ("\n".join(lines) + "\n").encode("utf-8"))
    return manifest


def read_manifest(path) -> DatasetManifest:
    patch, count, records = None, None, []
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, _, value = (p.strip() for p in line.partition("="))
        try:
            if key == "patch_size":
                patch = int(value)
            elif key == "count":
                count = int(value)
            elif key == "record":
                parts = value.split(" ", 3)
                records.append(SampleRecord(int(parts[0]), float(parts[1]),
                                            parts[3] if len(parts) > 3 else "", int(parts[2])))
            else:
                raise ValueError(f"unknown key {key!r}")
        except (ValueError, IndexError) as e:
            raise ConfigError(f"{path}:{lineno}: {e}") from e
    if patch is None or count != len(records):
        raise ConfigError(f"{path}: incomplete manifest")
    return DatasetManifest(records, patch)


class RecordDataset:
    """Memory-mapped triplet records addressed by a manifest."""

    def __init__(self, manifest_path, records_path, size: int = 128, max_shift: int = 6):
        self.size = size
        self.max_shift = max_shift
        self.manifest = read_manifest(manifest_path)
        p = self.manifest.patch_size
        self.data = np.memmap(records_path, dtype="<f4", mode="r")
        self.shape = (3, p, p, 3)
        need = self.manifest.records[-1].offset // 4 + 9 * p * p if self.manifest.records else 0
        if need > self.data.size:
            raise IntegrityError("record file is shorter than its manifest")

    def __len__(self):
        return self.manifest.count

    def triplet(self, i):
        off = self.manifest.records[i].offset // 4
        t = np.asarray(self.data[off:off + int(np.prod(self.shape))]).reshape(self.shape)
        return t[0].copy(), t[1].copy(), t[2].copy()

    def sample(self, i, rng):
        """Augmented training triplet, as served by :class:`TripletDataset`."""
        a, t, b = self.triplet(i)
        log = draw_transform(rng, a.shape[0], self.size, self.max_shift)
        p = apply_transform(a, t, b, log, self.size)
        return p.first, p.truth, p.last


# Loss curve -----------------------------------------------------------------


def write_loss_curve(path, curve):
    lines = ["step,loss,phase"] + [f"{s},{loss!r},{phase}" for s, loss, phase in curve]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
