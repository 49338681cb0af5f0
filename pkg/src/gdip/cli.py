"""Command-line entry point: ``gdip <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import gc
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


def thread_limit():
    """Cap BLAS worker threads at ``GDIP_THREADS`` when set."""
    raw = os.environ.get("GDIP_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GDIP_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("GDIP_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise UsageError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``a.b=value`` overrides; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(config))
    for text in overrides:
        key, value = parse_override(text)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r} walks through a non-object")
        node[parts[-1]] = value
    return out


def load_train_config(path, overrides=()):
    from .trainer import TrainConfig
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    raw = apply_overrides(raw, overrides)
    base = p.parent
    for key in ("train_data", "val_data", "run_dir"):
        if raw.get(key) and not os.path.isabs(raw[key]):
            raw[key] = str(base / raw[key])
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _load_ckpt(path):
    from .trainer import load_model
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_model(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_data(path, size):
    from .datagen import load_dataset, resolve_manifest
    if not resolve_manifest(path).is_file():
        raise UsageError(f"no dataset manifest at {path}")
    return load_dataset(path, size)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .datagen import write_dataset
    if args.count < 1:
        raise UsageError("--count must be positive")
    try:
        manifest = write_dataset(args.out, args.count, args.condition, args.seed, args.size,
                                 args.format)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {args.count} scenes; manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .datagen import resolve_manifest
    from .trainer import load_training_data, train
    cfg = load_train_config(args.config, args.override or ())
    if not cfg.train_data or not resolve_manifest(cfg.train_data).is_file():
        raise UsageError(f"training manifest not found: {cfg.train_data!r}")
    if cfg.val_data and not resolve_manifest(cfg.val_data).is_file():
        raise UsageError(f"validation manifest not found: {cfg.val_data!r}")
    try:
        data = load_training_data(cfg)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    result = train(cfg, data)
    final = result.final
    print(f"run dir {result.run_dir}: final l_total {final['l_total']:.6f} "
          f"val_map {final['val_map']:.4f}")
    return EXIT_OK


def _require_enhancer(cfg):
    if not cfg.has_enhancer:
        raise UsageError(f"a {cfg.variant} checkpoint has no enhancement path at inference")


def cmd_enhance(args) -> int:
    from .block import reports_to_csv
    from .model import enhance, mean_report
    from .tensor import read_image, resize_image, write_image
    cfg, params, _ = _load_ckpt(args.ckpt)
    _require_enhancer(cfg)
    if not Path(args.inp).is_file():
        raise UsageError(f"input image not found: {args.inp}")
    img = read_image(args.inp)
    if img.shape[:2] != (cfg.image_size, cfg.image_size):
        img = resize_image(img, cfg.image_size)
    z, reports = enhance(cfg, params, img)
    write_image(args.out, z)
    if args.gates:
        Path(args.gates).write_text(reports_to_csv([mean_report(reports)], [args.inp]))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .detect import decode_detections
    from .metrics import evaluate, psnr
    from .model import predict
    from .trainer import enhanced_or_input
    cfg, params, _ = _load_ckpt(args.ckpt)
    data = _load_data(args.data, cfg.image_size)
    dets = [decode_detections(p) for p in predict(cfg, params, data.images)]
    psnrs = []
    if data.clears is not None:
        shown = enhanced_or_input(cfg, params, data.images)
        psnrs = [psnr(a, b) for a, b in zip(shown, data.clears)]
    summary = evaluate(dets, data.targets, cfg.num_classes, psnrs)
    Path(args.out).write_text(summary.to_csv())
    if args.curves:
        Path(args.curves).write_text(summary.curves_csv())
    print(f"mAP@0.5 {summary.map50:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(args.scope, report=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_gates(args) -> int:
    from .datagen import condition_group
    from .metrics import gate_means, gate_report_csv
    from .model import gate_values
    cfg, params, _ = _load_ckpt(args.ckpt)
    _require_enhancer(cfg)
    data = _load_data(args.data, cfg.image_size)
    values = gate_values(cfg, params, data.images)
    groups = [condition_group(c) for c in data.conditions]
    Path(args.out).write_text(gate_report_csv(gate_means(values, groups), cfg.ops))
    if args.per_image:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["index", "condition", *cfg.ops])
        for i, (tag, vec) in enumerate(zip(data.conditions, values)):
            writer.writerow([i, tag, *(f"{v:.6f}" for v in vec)])
        Path(args.per_image).write_text(buf.getvalue())
    print(f"wrote per-condition gate means for {len(values)} images to {args.out}")
    return EXIT_OK


def bench_latencies(models, iters: int, warmup: int = 10, seed: int = 0) -> np.ndarray:
    """Per-image forward latencies in seconds, shape ``(len(models), iters)``.

    ``models`` is a sequence of ``(cfg, params)``.  Models take turns every
    iteration so drift in machine load hits all of them alike, and the
    garbage collector is paused while timing (as ``timeit`` does).
    """
    from .model import predict
    sizes = {cfg.image_size for cfg, _ in models}
    if len(sizes) != 1:
        raise ValueError("benchmarked models must share one input size")
    size = sizes.pop()
    img = np.random.default_rng(seed).uniform(0, 1, (size, size, 3))
    for _ in range(warmup):
        for cfg, params in models:
            predict(cfg, params, img)
    times = np.empty((len(models), iters))
    enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(iters):
            for m, (cfg, params) in enumerate(models):
                t0 = time.perf_counter()
                predict(cfg, params, img)
                times[m, i] = time.perf_counter() - t0
    finally:
        if enabled:
            gc.enable()
    return times


def bench_latency(cfg, params, iters: int, warmup: int = 10, seed: int = 0) -> np.ndarray:
    """Per-image forward latencies in seconds (inference path only)."""
    return bench_latencies([(cfg, params)], iters, warmup, seed)[0]


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise UsageError("--iters must be positive")
    cfg, params, _ = _load_ckpt(args.ckpt)
    times = bench_latency(cfg, params, args.iters, args.warmup)
    mean, std = 1e3 * times.mean(), 1e3 * times.std()
    print(f"{cfg.variant}: {mean:.3f} ± {std:.3f} ms per image over {args.iters} iterations")
    if args.out:
        Path(args.out).write_text(f"variant,iters,mean_ms,std_ms\n{cfg.variant},{args.iters},"
                                  f"{mean:.6f},{std:.6f}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    from .datagen import CONDITIONS
    from .gradcheck import SCOPES
    parser = _Parser(prog="gdip", description="Gated differentiable image processing toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--condition", choices=CONDITIONS, default="clear")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--override", nargs="*", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one image with a gdip/mgdip checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gates")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="mAP@0.5 and PSNR on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curves", help="optional TP/FP/FN threshold sweep CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gates", help="mean gate activations per condition")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-image", help="optional CSV with one row per image")
    p.set_defaults(func=cmd_gates)

    p = sub.add_parser("bench", help="per-image inference latency")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        with thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"gdip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything else is a runtime failure
        print(f"gdip: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
