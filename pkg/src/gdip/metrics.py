"""Detection and image-quality metrics.

Boxes are ``(cx, cy, w, h)``.  Matching is greedy in descending confidence:
a detection takes the unmatched same-class ground truth with the highest IoU
(earliest index on ties) if that IoU reaches the threshold.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from typing import Sequence

import numpy as np

from .detect import Detection, Target

DEFAULT_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))


def iou(a, b) -> float:
    """Intersection over union of two ``(cx, cy, w, h)`` boxes."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
    area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = max(min(ax1, bx1) - max(ax0, bx0), 0.0)
    ih = max(min(ay1, by1) - max(ay0, by0), 0.0)
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def corners_to_box(x0, y0, x1, y1) -> tuple[float, float, float, float]:
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def nms(dets: Sequence[Detection], iou_thr: float = 0.45) -> list[Detection]:
    """Greedy class-wise non-maximum suppression."""
    order = sorted(range(len(dets)), key=lambda k: -dets[k].confidence)
    kept: list[Detection] = []
    for k in order:
        d = dets[k]
        if all(o.cls != d.cls or iou(o.box, d.box) <= iou_thr for o in kept):
            kept.append(d)
    return kept


def match_image(dets: Sequence[Detection], gt: Target, iou_thr: float = 0.5) -> list[bool]:
    """Flag each detection (in the given order) as TP or FP; ordering must be by confidence."""
    used = np.zeros(len(gt), dtype=bool)
    flags = []
    for d in dets:
        best, best_iou = -1, iou_thr
        for g, (box, cls) in enumerate(zip(gt.boxes, gt.classes)):
            if used[g] or cls != d.cls:
                continue
            v = iou(d.box, box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def _envelope_ap(tp_flags: np.ndarray, n_gt: int) -> float:
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets: Sequence[Sequence[Detection]], gts: Sequence[Target],
                      cls: int | None = None, iou_thr: float = 0.5) -> float:
    """All-point interpolated AP over a dataset (``dets[i]`` belongs to ``gts[i]``).

    With ``cls`` set only that class is evaluated.  A class without ground
    truth scores 1 when it also has no detections, else 0.
    """
    if len(dets) != len(gts):
        raise ValueError("need one detection list per ground-truth target")
    scored = []  # (confidence, image, detection)
    n_gt = 0
    for img_idx, (ds, gt) in enumerate(zip(dets, gts)):
        n_gt += int(np.sum(gt.classes == cls)) if cls is not None else len(gt)
        for d in ds:
            if cls is None or d.cls == cls:
                scored.append((d.confidence, img_idx, d))
    if n_gt == 0:
        return 1.0 if not scored else 0.0
    if not scored:
        return 0.0
    order = sorted(range(len(scored)), key=lambda k: -scored[k][0])
    used = [np.zeros(len(gt), dtype=bool) for gt in gts]
    flags = np.zeros(len(order), dtype=bool)
    for rank, k in enumerate(order):
        _, img_idx, d = scored[k]
        gt = gts[img_idx]
        best, best_iou = -1, iou_thr
        for g, (box, gcls) in enumerate(zip(gt.boxes, gt.classes)):
            if used[img_idx][g] or gcls != d.cls:
                continue
            v = iou(d.box, box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            used[img_idx][best] = True
            flags[rank] = True
    return _envelope_ap(flags, n_gt)


def mean_average_precision(dets, gts, num_classes: int, iou_thr: float = 0.5):
    """Returns ``(mAP, per-class APs)``; mAP is the unweighted class mean."""
    aps = [average_precision(dets, gts, c, iou_thr) for c in range(num_classes)]
    return float(np.mean(aps)), aps


def tp_fp_fn_curves(dets, gts, thresholds=DEFAULT_THRESHOLDS, iou_thr: float = 0.5):
    """TP/FP/FN counts after discarding detections below each confidence threshold."""
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    n_gt = sum(len(g) for g in gts)
    rows = []
    for thr in thresholds:
        tp = fp = 0
        for ds, gt in zip(dets, gts):
            kept = sorted((d for d in ds if d.confidence >= thr), key=lambda d: -d.confidence)
            flags = match_image(kept, gt, iou_thr)
            tp += sum(flags)
            fp += len(flags) - sum(flags)
        rows.append({"threshold": thr, "tp": tp, "fp": fp, "fn": n_gt - tp})
    return rows


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for [0, 1] images; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclasses.dataclass
class EvalSummary:
    per_class_ap: list[float]
    map50: float
    curves: list[dict]
    psnr_mean: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        writer.writerow(["mAP@0.5", f"{self.map50:.6f}"])
        for c, ap in enumerate(self.per_class_ap):
            writer.writerow([f"AP_class{c}", f"{ap:.6f}"])
        writer.writerow(["psnr_mean", f"{self.psnr_mean:.6f}"])
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, ["threshold", "tp", "fp", "fn"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.curves)
        return buf.getvalue()


def evaluate(dets, gts, num_classes: int, psnrs: Sequence[float] = ()) -> EvalSummary:
    m, aps = mean_average_precision(dets, gts, num_classes)
    finite = [p for p in psnrs if math.isfinite(p)]
    return EvalSummary(aps, m, tp_fp_fn_curves(dets, gts),
                       float(np.mean(finite)) if finite else float("nan"))


# ---------------------------------------------------------------------------
# gate activations
# ---------------------------------------------------------------------------

GATE_GROUPS = ("clear", "fog", "dark")


def gate_means(values: np.ndarray, groups: Sequence[str]) -> dict[str, np.ndarray]:
    """Mean gate vector per condition group; ``values`` is ``(N, n_ops)``."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(groups):
        raise ValueError("one condition group per gate row is required")
    out = {}
    order = list(GATE_GROUPS) + sorted(set(groups) - set(GATE_GROUPS))
    for g in order:
        rows = [i for i, h in enumerate(groups) if h == g]
        if rows:
            out[g] = values[rows].mean(axis=0)
    return out


def gate_report_csv(means: dict[str, np.ndarray], ops: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["condition", *ops])
    for group, vec in means.items():
        writer.writerow([group, *(f"{v:.6f}" for v in vec)])
    return buf.getvalue()
