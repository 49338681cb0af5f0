"""SGD training with a per-step cosine learning-rate schedule."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import Dataset, condition_group, load_dataset
from .detect import DEFAULT_ALPHA, decode_detections
from .metrics import mean_average_precision, psnr
from .model import ModelConfig, _enhance_batch, forward_backward, init_model, predict

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "lr", "l_obj", "l_reg", "l_total", "val_map", "val_psnr",
              "val_loss")
STEP_FIELDS = ("step", "epoch", "lr", "l_obj", "l_reg", "l_total")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    train_data: str = ""
    val_data: str | None = None
    run_dir: str = "runs/default"
    variant: str = "gdip"
    mode: str = "Full"
    image_size: int = 96
    base_channels: int = 8
    embedding_dim: int = 64
    grid: int | None = None
    mgdip_levels: tuple[int, ...] = (0, 1, 2, 3, 4)
    mgdip_order: str = "bottom-up"
    reg_taps: tuple[int, ...] = (1, 3)
    batch_size: int = 6
    epochs: int = 80
    lr_min: float = 1e-6
    lr_max: float = 1e-4
    weight_decay: float = 5e-4
    momentum: float = 0.0
    alpha: float = DEFAULT_ALPHA
    aux_reconstruction: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.lr_min < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.alpha < 0 or self.weight_decay < 0:
            raise ValueError("alpha and weight_decay must be non-negative")
        object.__setattr__(self, "mgdip_levels", tuple(self.mgdip_levels))
        object.__setattr__(self, "reg_taps", tuple(self.reg_taps))
        self.model  # validates variant, mode and grid

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(variant=self.variant, image_size=self.image_size,
                           base_channels=self.base_channels, embedding_dim=self.embedding_dim,
                           mode=self.mode, grid=self.grid, mgdip_levels=self.mgdip_levels,
                           mgdip_order=self.mgdip_order, reg_taps=self.reg_taps)

    @property
    def uses_reconstruction(self) -> bool:
        if self.alpha <= 0:
            return False
        return self.variant == "regularizer" or (self.aux_reconstruction and
                                                 self.variant in ("gdip", "mgdip"))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mgdip_levels"] = list(d["mgdip_levels"])
        d["reg_taps"] = list(d["reg_taps"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, lr_min: float = 1e-6, lr_max: float = 1e-4) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class NonFiniteGradient(FloatingPointError):
    pass


def is_bias(name: str) -> bool:
    return name.endswith(".b")


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float = 0.0,
             momentum: float = 0.0, velocity: dict | None = None) -> dict:
    """One SGD update; returns new params (inputs are not modified).

    ``velocity`` is updated in place when momentum is used.  A non-finite
    gradient rejects the whole step.
    """
    bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {bad}")
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if np.shape(g) != np.shape(p):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != {np.shape(p)}")
        d = g if is_bias(name) else g + weight_decay * p
        if momentum:
            if velocity is None:
                raise ValueError("momentum needs a velocity buffer")
            v = momentum * velocity.get(name, 0.0) + d
            velocity[name] = v
            d = v
        out[name] = p - lr * d
    return out


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ValResult:
    map50: float
    psnr: float
    loss: float


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def enhanced_or_input(cfg: ModelConfig, params, images) -> np.ndarray:
    if not cfg.has_enhancer:
        return images
    return np.concatenate([_enhance_batch(cfg, params, images[sl])[0]
                           for sl in _batches(len(images), 16)])


def validate(tcfg: TrainConfig, params, data: Dataset) -> ValResult:
    cfg = tcfg.model
    dets, loss = [], 0.0
    use_rec = tcfg.uses_reconstruction and data.clears is not None
    for sl in _batches(len(data), 16):
        imgs = data.images[sl]
        for pred in predict(cfg, params, imgs):
            dets.append(decode_detections(pred))
        clears = data.clears[sl] if use_rec else None
        lb, _, _ = forward_backward(cfg, params, imgs, data.targets[sl], clears,
                                    alpha=tcfg.alpha if use_rec else 0.0,
                                    aux_reconstruction=tcfg.aux_reconstruction,
                                    want_grads=False)
        loss += lb.l_total * len(imgs)
    m, _ = mean_average_precision(dets, data.targets, cfg.num_classes)
    p = float("nan")
    if data.clears is not None:
        shown = enhanced_or_input(cfg, params, data.images)
        vals = [psnr(a, b) for a, b in zip(shown, data.clears)]
        finite = [v for v in vals if math.isfinite(v)]
        p = float(np.mean(finite)) if finite else float("inf")
    return ValResult(float(m), p, loss / len(data))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class TrainResult:
    params: dict
    best_params: dict
    log_rows: list[dict]
    lr_trace: list[float]
    skipped_steps: list[int]
    run_dir: Path

    @property
    def final(self) -> dict:
        return self.log_rows[-1]


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fields})


def package_version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:  # not installed as a distribution
        return "unknown"


def load_training_data(tcfg: TrainConfig) -> tuple[Dataset, Dataset | None]:
    """Load train/val data; paired clears are checked before any training happens."""
    if not tcfg.train_data:
        raise ValueError("train_data is not set")
    need_clear = tcfg.uses_reconstruction
    train = load_dataset(tcfg.train_data, tcfg.image_size, require_clear=need_clear)
    val = None
    if tcfg.val_data:
        val = load_dataset(tcfg.val_data, tcfg.image_size)
    return train, val


def train(tcfg: TrainConfig, data: tuple[Dataset, Dataset | None] | None = None) -> TrainResult:
    """Train, writing ``log.csv``, ``steps.csv``, checkpoints and ``metadata.json``."""
    train_set, val_set = data if data is not None else load_training_data(tcfg)
    if tcfg.uses_reconstruction and train_set.clears is None:
        raise ValueError("this configuration needs paired clear images in the training set")
    cfg = tcfg.model
    run_dir = Path(tcfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    params = init_model(cfg, tcfg.seed)
    velocity: dict = {}
    n = len(train_set)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total = steps_per_epoch * tcfg.epochs
    clears = train_set.clears if tcfg.uses_reconstruction else None

    rows, step_rows, lr_trace, skipped = [], [], [], []
    best, best_key = dict(params), None
    step = 0
    for epoch in range(tcfg.epochs):
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        for sl in _batches(n, tcfg.batch_size):
            idx = order[sl]
            lr = cosine_lr(step, total, tcfg.lr_min, tcfg.lr_max)
            lb, grads, _ = forward_backward(
                cfg, params, train_set.images[idx], [train_set.targets[i] for i in idx],
                None if clears is None else clears[idx], alpha=tcfg.alpha,
                aux_reconstruction=tcfg.aux_reconstruction)
            try:
                params = sgd_step(params, grads, lr, tcfg.weight_decay, tcfg.momentum, velocity)
            except NonFiniteGradient as exc:
                log.warning("step %d rejected: %s", step, exc)
                skipped.append(step)
            lr_trace.append(lr)
            vals = (lb.l_obj, lb.l_reg, lb.l_total)
            sums += vals
            step_rows.append(dict(zip(STEP_FIELDS, (step, epoch, lr) + vals)))
            step += 1
        means = sums / steps_per_epoch
        val = validate(tcfg, params, val_set) if val_set is not None else None
        row = {"epoch": epoch, "step": step, "lr": lr_trace[-1], "l_obj": means[0],
               "l_reg": means[1], "l_total": means[2],
               "val_map": val.map50 if val else float("nan"),
               "val_psnr": val.psnr if val else float("nan"),
               "val_loss": val.loss if val else float("nan")}
        rows.append(row)
        log.info("epoch %d  l_total %.4f  val_map %.4f", epoch, means[2], row["val_map"])
        key = (val.map50, -val.loss) if val else (-means[2],)
        if best_key is None or key > best_key:
            best_key, best = key, dict(params)
            _save(run_dir / "best.ckpt", params, tcfg, epoch, row)

    _save(run_dir / "final.ckpt", params, tcfg, tcfg.epochs - 1, rows[-1])
    _write_csv(run_dir / "log.csv", LOG_FIELDS, rows)
    _write_csv(run_dir / "steps.csv", STEP_FIELDS, step_rows)
    meta = {"config": tcfg.to_dict(), "seed": tcfg.seed, "version": package_version(),
            "total_steps": total, "skipped_steps": skipped}
    (run_dir / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return TrainResult(params, best, rows, lr_trace, skipped, run_dir)


def _save(path: Path, params, tcfg: TrainConfig, epoch: int, row: dict) -> None:
    meta = {"epoch": epoch, "seed": tcfg.seed, "version": package_version(),
            **{k: float(row[k]) for k in ("l_total", "val_map", "val_psnr", "val_loss")}}
    save_checkpoint(path, params, {"model": tcfg.model.to_dict(), "train": tcfg.to_dict()}, meta)


def load_model(path: str | os.PathLike) -> tuple[ModelConfig, dict, dict]:
    """Returns ``(ModelConfig, params, meta)`` from a training checkpoint."""
    params, config, meta = load_checkpoint(path)
    if "model" not in config:
        raise ValueError(f"{path}: checkpoint carries no model config")
    return ModelConfig.from_dict(config["model"]), params, meta


def condition_split(data: Dataset) -> dict[str, list[int]]:
    """Indices of each condition group ('clear', 'fog', 'dark')."""
    groups: dict[str, list[int]] = {}
    for i, tag in enumerate(data.conditions):
        groups.setdefault(condition_group(tag), []).append(i)
    return groups
