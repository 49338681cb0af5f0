"""Single-scale grid detection head, detection loss and reconstruction loss.

The head average-pools the last backbone map to a ``G x G`` grid and applies a
1x1 convolution.  Each cell predicts ``[objectness, tx, ty, tw, th, classes...]``
as logits.  Decoded values are sigmoids: ``(tx, ty)`` become the centre offset
inside the cell and ``(tw, th)`` the box size as a fraction of the image.

The detection loss is the sum-squared grid loss of the original single-shot
detector: coordinate terms on ``(x, y, sqrt w, sqrt h)`` weighted by 5,
objectness with no-object cells down-weighted by 0.5, and squared-error class
terms on responsible cells.
"""

from __future__ import annotations

import dataclasses
import math
import os
from typing import Sequence

import numpy as np

from .tensor import tick

CLASS_NAMES = ("circle", "square", "triangle")
LAMBDA_COORD = 5.0
LAMBDA_NOOBJ = 0.5
DEFAULT_ALPHA = 1e-4


@dataclasses.dataclass
class Target:
    """Ground-truth boxes ``(cx, cy, w, h)`` in normalized image coordinates."""

    boxes: np.ndarray  # (n, 4)
    classes: np.ndarray  # (n,)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes differ in length")
        cx, cy, w, h = self.boxes.T
        if np.any((cx < 0) | (cx > 1) | (cy < 0) | (cy > 1)):
            raise ValueError("box centres must lie in [0, 1]")
        if np.any((w <= 0) | (w > 1) | (h <= 0) | (h > 1)):
            raise ValueError("box sizes must lie in (0, 1]")
        if np.any(self.classes < 0):
            raise ValueError("negative class index")

    def __len__(self) -> int:
        return len(self.classes)

    @classmethod
    def empty(cls) -> "Target":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))

    def to_text(self) -> str:
        return "".join(f"{c} {b[0]:.6f} {b[1]:.6f} {b[2]:.6f} {b[3]:.6f}\n"
                       for c, b in zip(self.classes, self.boxes))

    @classmethod
    def from_text(cls, text: str) -> "Target":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        if not rows:
            return cls.empty()
        if any(len(r) != 5 for r in rows):
            raise ValueError("target lines must read 'class cx cy w h'")
        return cls([[float(v) for v in r[1:]] for r in rows], [int(r[0]) for r in rows])

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Target":
        with open(path) as fh:
            return cls.from_text(fh.read())


# ---------------------------------------------------------------------------
# head
# ---------------------------------------------------------------------------


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        mat[i, start:end] = 1.0 / (end - start)
    return mat


def init_head(rng: np.random.Generator, in_channels: int, num_classes: int = len(CLASS_NAMES),
              prefix: str = "head.") -> dict[str, np.ndarray]:
    bound = math.sqrt(3.0 / in_channels)
    return {f"{prefix}w": rng.uniform(-bound, bound, (5 + num_classes, in_channels)) * 0.1,
            f"{prefix}b": np.zeros(5 + num_classes)}


def head_forward(c5, w, b, grid: int):
    """Map the last backbone tap ``(B, C, H, W)`` to ``(B, G, G, 5 + classes)`` logits."""
    c5 = np.asarray(c5, dtype=np.float64)
    single = c5.ndim == 3
    if single:
        c5 = c5[None]
    h, wd = c5.shape[-2:]
    if grid > min(h, wd):
        raise ValueError(f"grid {grid} exceeds backbone map size {h}x{wd}")
    tick("head")
    ph, pw = adaptive_pool_matrix(h, grid), adaptive_pool_matrix(wd, grid)
    pooled = np.einsum("gh,bchw,kw->bgkc", ph, c5, pw)
    out = pooled @ w.T + b
    cache = {"pooled": pooled, "ph": ph, "pw": pw, "w": w, "single": single}
    return (out[0] if single else out), cache


def head_vjp(g, cache):
    g = g[None] if cache["single"] else g
    pooled, w = cache["pooled"], cache["w"]
    d = g.shape[-1]
    g_w = g.reshape(-1, d).T @ pooled.reshape(-1, pooled.shape[-1])
    g_b = g.reshape(-1, d).sum(axis=0)
    g_pooled = g @ w
    g_c5 = np.einsum("gh,bgkc,kw->bchw", cache["ph"], g_pooled, cache["pw"])
    return (g_c5[0] if cache["single"] else g_c5), g_w, g_b


# ---------------------------------------------------------------------------
# targets and loss
# ---------------------------------------------------------------------------


def responsible_cell(cx: float, cy: float, grid: int) -> tuple[int, int]:
    """``(row, col)`` of the cell containing the box centre."""
    return min(int(math.floor(cy * grid)), grid - 1), min(int(math.floor(cx * grid)), grid - 1)


def encode_target(target: Target, grid: int, num_classes: int = len(CLASS_NAMES)):
    """Return ``(encoded, responsible)``: decoded-space targets per cell and a mask.

    When two boxes share a cell the larger one keeps it.
    """
    enc = np.zeros((grid, grid, 5 + num_classes))
    resp = np.zeros((grid, grid), dtype=bool)
    area = np.zeros((grid, grid))
    for (cx, cy, w, h), cls in zip(target.boxes, target.classes):
        if cls >= num_classes:
            raise ValueError(f"class index {cls} out of range")
        i, j = responsible_cell(cx, cy, grid)
        if resp[i, j] and area[i, j] >= w * h:
            continue
        enc[i, j] = 0.0
        enc[i, j, :5] = (1.0, cx * grid - j, cy * grid - i, math.sqrt(w), math.sqrt(h))
        enc[i, j, 5 + cls] = 1.0
        resp[i, j] = True
        area[i, j] = w * h
    return enc, resp


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode_cells(pred):
    """Logits ``(..., 5 + C)`` -> ``(obj, x, y, w, h, class probs...)`` in [0, 1]."""
    return _sigmoid(np.asarray(pred, dtype=np.float64))


def loss_obj_with_grad(pred, target: Target):
    """Detection loss for one image and its gradient w.r.t. the logits."""
    pred = np.asarray(pred, dtype=np.float64)
    grid, nc = pred.shape[0], pred.shape[-1] - 5
    enc, resp = encode_target(target, grid, nc)
    s = _sigmoid(pred)
    ds = s * (1.0 - s)
    r = resp[..., None].astype(np.float64)

    obj = s[..., 0]
    d_obj = np.where(resp, obj - 1.0, LAMBDA_NOOBJ * obj)
    loss = np.sum(np.where(resp, (obj - 1.0) ** 2, LAMBDA_NOOBJ * obj ** 2))

    xy_err = (s[..., 1:3] - enc[..., 1:3]) * r
    sq = np.sqrt(s[..., 3:5])
    wh_err = (sq - enc[..., 3:5]) * r
    cls_err = (s[..., 5:] - enc[..., 5:]) * r
    loss += LAMBDA_COORD * (np.sum(xy_err ** 2) + np.sum(wh_err ** 2)) + np.sum(cls_err ** 2)

    g = np.empty_like(pred)
    g[..., 0] = 2.0 * d_obj * ds[..., 0]
    g[..., 1:3] = 2.0 * LAMBDA_COORD * xy_err * ds[..., 1:3]
    g[..., 3:5] = LAMBDA_COORD * wh_err * sq * (1.0 - s[..., 3:5])  # ds / sqrt(s)
    g[..., 5:] = 2.0 * cls_err * ds[..., 5:]
    return float(loss), g


def loss_obj(pred, target: Target) -> float:
    return loss_obj_with_grad(pred, target)[0]


def loss_rec(z, clear) -> tuple[float, float]:
    """Mean absolute and mean squared error between ``z`` and ``clear``."""
    z = np.asarray(z, dtype=np.float64)
    clear = np.asarray(clear, dtype=np.float64)
    if z.shape != clear.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {clear.shape}")
    d = z - clear
    return float(np.mean(np.abs(d))), float(np.mean(d * d))


def loss_rec_vjp(z, clear, g_l1: float = 1.0, g_mse: float = 1.0):
    d = np.asarray(z, dtype=np.float64) - np.asarray(clear, dtype=np.float64)
    return (g_l1 * np.sign(d) + 2.0 * g_mse * d) / d.size


def loss_total(l_obj: float, l_reg: float, alpha: float = DEFAULT_ALPHA) -> float:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return l_obj + alpha * l_reg


@dataclasses.dataclass
class LossBreakdown:
    l_obj: float
    l_rec_l1: float = 0.0
    l_rec_mse: float = 0.0
    alpha: float = 0.0

    @property
    def l_reg(self) -> float:
        return self.l_rec_l1 + self.l_rec_mse

    @property
    def l_total(self) -> float:
        return loss_total(self.l_obj, self.l_reg, self.alpha)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Detection:
    box: tuple[float, float, float, float]  # cx, cy, w, h
    cls: int
    confidence: float


def decode_detections(pred, nms_iou: float = 0.45, min_confidence: float = 0.0) -> list[Detection]:
    """One detection per cell (best class), then greedy class-wise NMS."""
    from .metrics import nms

    s = decode_cells(pred)
    grid = s.shape[0]
    dets = []
    for i in range(grid):
        for j in range(grid):
            cell = s[i, j]
            cls = int(np.argmax(cell[5:]))
            conf = float(cell[0] * cell[5 + cls])
            if conf < min_confidence:
                continue
            cx = min(max((j + cell[1]) / grid, 0.0), 1.0)
            cy = min(max((i + cell[2]) / grid, 0.0), 1.0)
            dets.append(Detection((cx, cy, float(cell[3]), float(cell[4])), cls, conf))
    return nms(dets, nms_iou)


def grid_for(c5_size: int, grid: int | None) -> int:
    return c5_size if grid is None else grid
