"""Synthetic detection scenes and adverse-condition augmentation.

Scenes are textured backgrounds with 1-5 non-overlapping circles, squares and
triangles.  Fog follows the atmospheric scattering model with a centre-distance
pseudo-depth; darkening raises the image to a power.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .detect import CLASS_NAMES, Target
from .tensor import read_image, resize_image, write_image

FOG_LEVELS = 10
BETA_MIN, BETA_MAX = 0.05, 1.0
ATMOS_RANGE = (0.7, 1.0)
DARK_GAMMA_RANGE = (1.5, 5.0)
ADVERSE_FRACTION = 2.0 / 3.0
CONDITIONS = ("clear", "fog", "dark", "mixed")


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SceneObject:
    shape: int  # index into CLASS_NAMES
    cx: float  # pixels
    cy: float
    r: float  # half extent in pixels
    color: tuple[float, float, float]


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: int = 96
    min_objects: int = 1
    max_objects: int = 5
    min_radius: float = 0.08  # fraction of the canvas
    max_radius: float = 0.2

    def layout(self) -> tuple[list[SceneObject], dict]:
        """Sample object placement and background parameters from ``seed``."""
        rng = np.random.default_rng(self.seed)
        n = int(rng.integers(self.min_objects, self.max_objects + 1))
        objects: list[SceneObject] = []
        attempts = 0
        while len(objects) < n and attempts < 500:
            attempts += 1
            r = rng.uniform(self.min_radius, self.max_radius) * self.size
            cx = rng.uniform(r, self.size - r)
            cy = rng.uniform(r, self.size - r)
            if any(max(abs(cx - o.cx), abs(cy - o.cy)) < r + o.r + 1 for o in objects):
                continue
            objects.append(SceneObject(int(rng.integers(len(CLASS_NAMES))), cx, cy, r,
                                       _vivid_color(rng)))
        background = {
            "colors": (_muted_color(rng), _muted_color(rng)),
            "angle": rng.uniform(0, 2 * math.pi),
            "freq": rng.uniform(1.0, 3.0),
            "phase": rng.uniform(0, 2 * math.pi),
            "noise": rng.normal(0.0, 0.02, (self.size, self.size, 3)),
        }
        return objects, background


def _hsv_to_rgb(h, s, v):
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return tuple(float(x) for x in v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0))


def _vivid_color(rng):
    return _hsv_to_rgb(rng.uniform(), rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0))


def _muted_color(rng):
    return _hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 0.9), rng.uniform(0.25, 0.6))


def shape_mask(shape: int, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    if CLASS_NAMES[shape] == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if CLASS_NAMES[shape] == "square":
        return (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    # upward triangle: apex at (cx, cy - r), base from cx - r to cx + r at cy + r
    return (ys <= cy + r) & (np.abs(xs - cx) <= (ys - cy + r) / 2.0)


def synth_scene(spec: SceneSpec) -> tuple[np.ndarray, Target]:
    """Render a scene; boxes are the geometric extents of the shapes."""
    objects, bg = spec.layout()
    size = spec.size
    ys, xs = (np.mgrid[0:size, 0:size] + 0.5) / size
    u = xs * math.cos(bg["angle"]) + ys * math.sin(bg["angle"])
    mix = 0.5 + 0.5 * np.sin(2 * math.pi * bg["freq"] * u + bg["phase"])
    c0, c1 = (np.array(c) for c in bg["colors"])
    img = c0 + mix[..., None] * (c1 - c0) + bg["noise"]
    boxes, classes = [], []
    for obj in objects:
        mask = shape_mask(obj.shape, obj.cx, obj.cy, obj.r, size)
        img[mask] = obj.color
        boxes.append((obj.cx / size, obj.cy / size, 2 * obj.r / size, 2 * obj.r / size))
        classes.append(obj.shape)
    return np.clip(img, 0.0, 1.0), Target(np.array(boxes).reshape(-1, 4), classes)


# ---------------------------------------------------------------------------
# fog and darkening
# ---------------------------------------------------------------------------


def beta_for_level(level: int) -> float:
    if not 0 <= level < FOG_LEVELS:
        raise ValueError(f"fog level must be in [0, {FOG_LEVELS - 1}]")
    return BETA_MIN + level * (BETA_MAX - BETA_MIN) / (FOG_LEVELS - 1)


@dataclasses.dataclass(frozen=True)
class FogParams:
    level: int = 0
    atmos: float = 0.9
    beta_override: float | None = None

    def __post_init__(self):
        if self.beta_override is None:
            beta_for_level(self.level)
        elif self.beta_override < 0:
            raise ValueError("beta must be non-negative")

    @property
    def beta(self) -> float:
        return beta_for_level(self.level) if self.beta_override is None else self.beta_override


@dataclasses.dataclass(frozen=True)
class DarkParams:
    gamma: float

    def __post_init__(self):
        lo, hi = DARK_GAMMA_RANGE
        if not lo <= self.gamma <= hi:
            raise ValueError(f"darkening gamma must be in [{lo}, {hi}]")


def pseudo_depth(h: int, w: int) -> np.ndarray:
    """Distance to the image centre divided by the half-diagonal, in [0, 1]."""
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    return np.hypot(ys - h / 2, xs - w / 2) / math.hypot(h / 2, w / 2)


def transmission(h: int, w: int, beta: float) -> np.ndarray:
    return np.exp(-beta * pseudo_depth(h, w))


def apply_fog_asm(img, p: FogParams) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    t = transmission(img.shape[0], img.shape[1], p.beta)[..., None]
    return np.clip(img * t + p.atmos * (1.0 - t), 0.0, 1.0)


def apply_dark(img, p: DarkParams) -> np.ndarray:
    return np.power(np.asarray(img, dtype=np.float64), p.gamma)


def sample_fog(rng: np.random.Generator) -> FogParams:
    return FogParams(int(rng.integers(FOG_LEVELS)), float(rng.uniform(*ATMOS_RANGE)))


def sample_dark(rng: np.random.Generator) -> DarkParams:
    return DarkParams(float(rng.uniform(*DARK_GAMMA_RANGE)))


def degrade(img, kind: str, rng: np.random.Generator) -> tuple[np.ndarray, str]:
    """Apply a sampled fog or darkening; returns the image and its condition tag."""
    if kind == "fog":
        p = sample_fog(rng)
        return apply_fog_asm(img, p), f"fog:{p.level}"
    if kind == "dark":
        d = sample_dark(rng)
        return apply_dark(img, d), f"dark:{d.gamma:.3f}"
    raise ValueError(f"unknown adversity {kind!r}")


# ---------------------------------------------------------------------------
# hybrid sampling
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Sample:
    image: np.ndarray
    clear: np.ndarray
    target: Target
    condition: str
    source: int  # index into the clear pool

    @property
    def adverse(self) -> bool:
        return self.condition != "clear"


def choose_condition(adversity: str, rng: np.random.Generator) -> str:
    """Draw 'clear' with probability 1/3, else the adversity (fog/dark split evenly for 'mixed')."""
    if rng.uniform() >= ADVERSE_FRACTION:
        return "clear"
    if adversity == "mixed":
        return "fog" if rng.uniform() < 0.5 else "dark"
    if adversity not in ("fog", "dark"):
        raise ValueError(f"unknown adversity {adversity!r}")
    return adversity


def hybrid_batches(pool: Sequence[tuple[np.ndarray, Target]], adversity: str, seed: int,
                   batch_size: int = 1) -> Iterator[list[Sample]]:
    """Endless stream of batches mixing adverse and clear samples 2:1."""
    if not pool:
        raise ValueError("the clear pool is empty")
    rng = np.random.default_rng(seed)
    while True:
        batch = []
        for _ in range(batch_size):
            src = int(rng.integers(len(pool)))
            clear, target = pool[src]
            kind = choose_condition(adversity, rng)
            if kind == "clear":
                batch.append(Sample(clear, clear, target, "clear", src))
            else:
                img, tag = degrade(clear, kind, rng)
                batch.append(Sample(img, clear, target, tag, src))
        yield batch


def condition_group(tag: str) -> str:
    return tag.split(":", 1)[0]


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("image", "target", "condition", "clear_source")


def write_dataset(out_dir: str | os.PathLike, count: int, condition: str = "clear",
                  seed: int = 0, size: int = 96, ext: str = "ppm") -> Path:
    """Generate ``count`` scenes and a manifest; returns the manifest path.

    Each scene ``k`` is fully determined by ``(seed, k)``.  Adverse images keep
    a pointer to their clear source.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"condition must be one of {CONDITIONS}")
    out = Path(out_dir)
    for sub in ("images", "clear", "targets"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        clear, target = synth_scene(SceneSpec(seed=int(rng.integers(2 ** 31)), size=size))
        if condition == "clear":
            kind = "clear"
        elif condition == "mixed":
            kind = choose_condition("mixed", rng)
        else:
            kind = condition
        name = f"{k:05d}"
        clear_path = f"clear/{name}.{ext}"
        write_image(out / clear_path, clear)
        target.save(out / f"targets/{name}.txt")
        if kind == "clear":
            img_path, tag = clear_path, "clear"
        else:
            img, tag = degrade(clear, kind, rng)
            img_path = f"images/{name}.{ext}"
            write_image(out / img_path, img)
        rows.append({"image": img_path, "target": f"targets/{name}.txt", "condition": tag,
                     "clear_source": clear_path})
    manifest = out / MANIFEST_NAME
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def resolve_manifest(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() else p


def read_manifest(path: str | os.PathLike) -> list[dict]:
    manifest = resolve_manifest(path)
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        missing = [f for f in MANIFEST_FIELDS if f not in row]
        if missing:
            raise ValueError(f"{manifest}: missing manifest columns {missing}")
    return rows


@dataclasses.dataclass
class Dataset:
    images: np.ndarray  # (N, S, S, 3)
    clears: np.ndarray | None  # (N, S, S, 3), None when any clear source is missing
    targets: list[Target]
    conditions: list[str]

    def __len__(self) -> int:
        return len(self.targets)


def load_dataset(path: str | os.PathLike, size: int | None = None,
                 require_clear: bool = False) -> Dataset:
    manifest = resolve_manifest(path)
    root = manifest.parent
    rows = read_manifest(manifest)
    if not rows:
        raise ValueError(f"{manifest}: empty manifest")

    def load(rel):
        img = read_image(root / rel)
        return resize_image(img, size) if size else img

    images = np.stack([load(r["image"]) for r in rows])
    have_clear = all(r["clear_source"] and (root / r["clear_source"]).exists() for r in rows)
    if require_clear and not have_clear:
        raise FileNotFoundError(f"{manifest}: paired clear images are missing")
    clears = np.stack([load(r["clear_source"]) for r in rows]) if have_clear else None
    targets = [Target.load(root / r["target"]) for r in rows]
    return Dataset(images, clears, targets, [r["condition"] for r in rows])
