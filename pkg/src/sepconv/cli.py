"""Command-line entry point: ``sepconv <command> ...``.

Exit codes: 0 ok, 2 configuration or parameter error, 3 I/O error,
4 numeric failure, 5 integrity (CRC) failure.
"""
from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

import numpy as np

from . import io
from .data import (SyntheticTranslationDataset, TripletDataset, build_manifest, extract_triplets,
                   flow_percentiles)
from .errors import IntegrityError, NumericError, ParameterError
from .evaluation import (bench, bench_csv, bench_operator, kernel_visualize, overlay_baseline,
                         withheld_frame_eval)
from .interpolate import Interpolator, multi_interpolate
from .model import build, forward
from .numeric import RandomStream
from .op import replicate_pad
from .training import FeatureExtractor, LossConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 2, 3, 4, 5


class Outputs:
    """Tracks files and directories a command creates so failures can remove them."""

    def __init__(self):
        self.paths = []

    def file(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        return path

    def directory(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            path.mkdir(parents=True)
            self.paths.append(path)
        return path

    def discard(self):
        for p in reversed(self.paths):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _config(args) -> io.RunConfig:
    cfg = io.read_run_config(args.config) if args.config else io.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.width_scale is not None:
        cfg.width_scale = args.width_scale
    cfg.model_config()
    return cfg


def _weights(args, cfg=None):
    if not args.weights:
        raise ParameterError("--weights is required")
    return io.load_weights(args.weights, cfg.kernel_size if cfg else None)


def _pair(args):
    a, b = io.read_image(args.frame1), io.read_image(args.frame2)
    if a.shape != b.shape:
        raise ParameterError(f"frame sizes differ: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}")
    return a, b


def cmd_interpolate(args, out: Outputs):
    a, b = _pair(args)
    interp = Interpolator(_weights(args), args.workers)
    io.write_image(out.file(args.out), interp(a, b))


def cmd_multi_interpolate(args, out: Outputs):
    a, b = _pair(args)
    interp = Interpolator(_weights(args), args.workers)
    frames = multi_interpolate(interp, a, b, args.depth)
    d = out.directory(args.out)
    for k, (t, frame) in enumerate(frames, 1):
        io.write_image(out.file(d / f"frame_{k:03d}_t{t:.6f}.png"), frame)
        print(f"{t:.6f} {d / f'frame_{k:03d}_t{t:.6f}.png'}")


def _dataset(cfg: io.RunConfig):
    if cfg.dataset:
        manifest = Path(cfg.dataset)
        return io.RecordDataset(manifest, manifest.with_suffix(".records"), cfg.train_size, cfg.max_shift)
    if cfg.synthetic_count > 0:
        return SyntheticTranslationDataset(cfg.synthetic_count, cfg.synthetic_size, cfg.synthetic_motion,
                                           seed=int(RandomStream(cfg.seed).child(2).next_u64(1)[0] >> 1))
    raise ParameterError("config sets neither dataset nor synthetic_count")


def _extractor(cfg: io.RunConfig) -> FeatureExtractor:
    if cfg.extractor == "identity":
        return FeatureExtractor.identity()
    if cfg.extractor == "seeded_random_pyramid":
        return FeatureExtractor.seeded_random_pyramid(cfg.extractor_seed)
    if cfg.extractor == "external_weights":
        return FeatureExtractor.from_weights(io.read_tensors(cfg.extractor_weights))
    raise ParameterError(f"unknown extractor {cfg.extractor!r}")


def _run_phase(params, dataset, loss_config, steps, cfg, rng, d: Path, out: Outputs, tag: str):
    def checkpoint(step, p):
        io.save_weights(out.file(d / f"{tag}_step{step:06d}.sepw"), p)

    def report(step, loss):
        if step == 1 or step % 100 == 0 or step == steps:
            print(f"{tag} step {step} loss {loss:.6f}", flush=True)

    return train(params, dataset, loss_config, steps, cfg.batch, rng, checkpoint_every=cfg.checkpoint_every,
                 checkpoint=checkpoint, workers=cfg.workers, on_step=report)


def cmd_train(args, out: Outputs):
    cfg = _config(args)
    root = RandomStream(cfg.seed)
    params = build(cfg.model_config(), root.child(0))
    dataset = _dataset(cfg)
    d = out.directory(args.out)
    params, curve = _run_phase(params, dataset, LossConfig("l1_only", learning_rate=cfg.l1_learning_rate),
                               cfg.l1_steps, cfg, root.child(1), d, out, "l1")
    io.save_weights(out.file(d / "l1.sepw"), params)
    if cfg.lf_steps > 0:
        lc = LossConfig("lf_finetune", _extractor(cfg), cfg.lf_learning_rate)
        params, more = _run_phase(params, dataset, lc, cfg.lf_steps, cfg, root.child(3), d, out, "lf")
        curve += [(cfg.l1_steps + s, loss, ph) for s, loss, ph in more]
    io.save_weights(out.file(d / "final.sepw"), params)
    io.write_loss_curve(out.file(d / "loss.csv"), curve)


def cmd_finetune(args, out: Outputs):
    cfg = _config(args)
    params = _weights(args, cfg)
    dataset = _dataset(cfg)
    d = out.directory(args.out)
    lc = LossConfig("lf_finetune", _extractor(cfg), cfg.lf_learning_rate)
    params, curve = _run_phase(params, dataset, lc, cfg.lf_steps, cfg, RandomStream(cfg.seed).child(3), d, out, "lf")
    io.save_weights(out.file(d / "final.sepw"), params)
    io.write_loss_curve(out.file(d / "loss.csv"), curve)


def cmd_make_dataset(args, out: Outputs):
    cfg = _config(args)
    pc = cfg.pipeline_config()
    rng = RandomStream(cfg.seed)
    candidates = []
    for k, src in enumerate(args.frames):
        frames = io.read_frame_dir(src)
        candidates += extract_triplets(frames, pc.stride, rng.child(k), pc, source=Path(src).name)
    if not candidates:
        raise ParameterError("no usable triplets in the input clips")
    target = cfg.target_count or len(candidates)
    _, samples = build_manifest(candidates, min(target, len(candidates)), rng.child(len(args.frames)), pc)
    manifest_path = out.file(Path(args.out))
    records_path = out.file(manifest_path.with_suffix(".records"))
    manifest = io.write_dataset(manifest_path, records_path, samples, pc.crop_size)
    pct = flow_percentiles(manifest)
    print(f"samples {manifest.count} p90 {pct['p90']:.3f} p95 {pct['p95']:.3f} max {pct['max']:.3f}")


def cmd_evaluate(args, out: Outputs):
    frames = io.read_frame_dir(args.frames)
    interp = Interpolator(_weights(args), args.workers) if args.weights else overlay_baseline
    report = withheld_frame_eval(frames, interp)
    print(report.to_text())
    if args.out:
        io._atomic_write(out.file(args.out), report.to_csv().encode("utf-8"))


def cmd_bench(args, out: Outputs):
    results = []
    if args.weights:
        results.append(bench(Interpolator(_weights(args), args.workers), args.width, args.height, args.repetitions))
    if args.operator or not args.weights:
        results += bench_operator(args.width, args.height, args.n, args.repetitions)
    text = bench_csv(results)
    print(text, end="")
    if args.out:
        io._atomic_write(out.file(args.out), text.encode("utf-8"))


def _gray_png(path, img):
    io.write_image(path, np.repeat(img[..., None], 3, axis=2))


def cmd_visualize_kernels(args, out: Outputs):
    a, b = _pair(args)
    params = _weights(args)
    cfg = params.config
    H, W = a.shape[:2]
    if H % cfg.multiple or W % cfg.multiple:
        pt, pl = (-H % cfg.multiple) // 2, (-W % cfg.multiple) // 2
        pad = (pt, -H % cfg.multiple - pt, pl, -W % cfg.multiple - pl)
        kf = forward(params, replicate_pad(a, pad), replicate_pad(b, pad)).crop(pt, pl, H, W)
    else:
        kf = forward(params, a, b)
    d = out.directory(args.out)
    for x, y in args.pixel:
        view = kernel_visualize(kf, x, y)
        _gray_png(out.file(d / f"k1_x{x}_y{y}.png"), view.k1_image)
        _gray_png(out.file(d / f"k2_x{x}_y{y}.png"), view.k2_image)
        print(f"pixel ({x},{y}) offset dy={view.offset[0]:.3f} dx={view.offset[1]:.3f} "
              f"k1=({view.offset1[0]:.3f},{view.offset1[1]:.3f}) k2=({view.offset2[0]:.3f},{view.offset2[1]:.3f})")


def _pixel(text):
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}")
    return x, y


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value lines)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--weights", help="weights container")
    common.add_argument("--out", help="output path")
    common.add_argument("--width-scale", type=int, help="divide every layer width by N")
    common.add_argument("--workers", type=int, default=1)

    p = argparse.ArgumentParser(prog="sepconv", description="Frame interpolation with adaptive separable convolution.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("interpolate", parents=[common], help="synthesize the midpoint frame")
    s.add_argument("frame1")
    s.add_argument("frame2")
    s.set_defaults(fn=cmd_interpolate, need_out=True)

    s = sub.add_parser("multi-interpolate", parents=[common], help="2^depth - 1 frames by recursion")
    s.add_argument("frame1")
    s.add_argument("frame2")
    s.add_argument("--depth", type=int, default=1)
    s.set_defaults(fn=cmd_multi_interpolate, need_out=True)

    s = sub.add_parser("train", parents=[common], help="L1 training, then optional feature-loss fine-tuning")
    s.set_defaults(fn=cmd_train, need_out=True)

    s = sub.add_parser("finetune", parents=[common], help="feature-loss fine-tuning from --weights")
    s.set_defaults(fn=cmd_finetune, need_out=True)

    s = sub.add_parser("make-dataset", parents=[common], help="extract, annotate and select training triplets")
    s.add_argument("frames", nargs="+", help="directories of numbered frames")
    s.set_defaults(fn=cmd_make_dataset, need_out=True)

    s = sub.add_parser("evaluate", parents=[common], help="withheld-frame evaluation (overlay without --weights)")
    s.add_argument("frames")
    s.set_defaults(fn=cmd_evaluate, need_out=False)

    s = sub.add_parser("bench", parents=[common], help="timing and memory benchmark")
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--n", type=int, default=51)
    s.add_argument("--repetitions", type=int, default=5)
    s.add_argument("--operator", action="store_true", help="also time the separable and dense operators")
    s.set_defaults(fn=cmd_bench, need_out=False)

    s = sub.add_parser("visualize-kernels", parents=[common], help="write equivalent 2D kernels as PNG")
    s.add_argument("frame1")
    s.add_argument("frame2")
    s.add_argument("--pixel", type=_pixel, action="append", required=True, help="X,Y (repeatable)")
    s.set_defaults(fn=cmd_visualize_kernels, need_out=True)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    if args.need_out and not args.out:
        print("error: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    out = Outputs()
    try:
        args.fn(args, out)
        return EXIT_OK
    except BaseException as e:
        out.discard()
        code = _exit_code(e)
        if code is None:
            raise
        print(f"error: {e}", file=sys.stderr)
        return code


def _exit_code(e):
    # IntegrityError derives from OSError, so it is tested first
    if isinstance(e, IntegrityError):
        return EXIT_INTEGRITY
    if isinstance(e, ParameterError):
        return EXIT_CONFIG
    if isinstance(e, NumericError):
        return EXIT_NUMERIC
    if isinstance(e, OSError):
        return EXIT_IO
    return None


if __name__ == "__main__":
    sys.exit(main())
