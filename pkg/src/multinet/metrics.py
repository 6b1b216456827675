"""Evaluation metrics.

Undefined results (no ground truth, no predicted positives) are reported as
``None`` rather than 0 so they cannot be mistaken for a real score.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data_io import KittiObjectRecord
from .det_decoder import BoundingBox, iou

TIERS = ("easy", "moderate", "hard")

# min box height (px), max occlusion level, max truncation
DIFFICULTY = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}

THRESHOLDS = np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass
class DetectionEval:
    ap: dict[str, float | None]
    pr_curves: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


@dataclass
class SegEval:
    max_f1: float | None
    ap: float | None
    threshold: float | None


@dataclass
class ClsEval:
    accuracy: float
    precision: float | None
    recall: float | None


def _corners(b) -> tuple[float, float, float, float]:
    return b.corners if hasattr(b, "corners") else tuple(b)


def match_detections(detections: Sequence, ground_truth: Sequence, iou_threshold: float = 0.5,
                     ignored: Sequence = ()) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy matching in descending confidence.

    Each detection claims the unmatched ground-truth box with the highest
    IoU; it is a true positive if that IoU reaches ``iou_threshold``.
    Detections that instead hit an ``ignored`` box are dropped from the
    ranking.  Returns ``(scores, tp_flags, n_gt)`` in rank order.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    gts = [_corners(g) for g in ground_truth]
    ign = [_corners(g) for g in ignored]
    used = np.zeros(len(gts), dtype=bool)
    scores, flags = [], []
    for i in order:
        d = _corners(detections[i])
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if used[j]:
                continue
            v = iou(d, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            used[best_j] = True
            flags.append(True)
        elif any(iou(d, g) >= iou_threshold for g in ign):
            continue
        else:
            flags.append(False)
        scores.append(detections[i].confidence)
    return np.array(scores), np.array(flags, dtype=bool), len(gts)


def pr_curve(flags: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under a PR curve (recall ascending)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(detections: Sequence, ground_truth: Sequence, iou_threshold: float = 0.5,
                      ignored: Sequence = ()) -> float | None:
    """All-point AP of ranked detections against ground truth; ``None`` without GT."""
    if len(ground_truth) == 0:
        return None
    _, flags, n_gt = match_detections(detections, ground_truth, iou_threshold, ignored)
    if flags.size == 0:
        return 0.0
    return interpolated_ap(*pr_curve(flags, n_gt))


def dataset_average_precision(per_image: Iterable[tuple[Sequence, Sequence, Sequence]],
                              iou_threshold: float = 0.5) -> tuple[float | None, tuple[np.ndarray, np.ndarray]]:
    """AP over many images: ``per_image`` yields ``(detections, gt, ignored)``.

    Matching is done per image; ranking is global over all detections.
    """
    all_scores, all_flags, n_gt = [], [], 0
    for dets, gts, ign in per_image:
        s, f, n = match_detections(dets, gts, iou_threshold, ign)
        all_scores.append(s)
        all_flags.append(f)
        n_gt += n
    if n_gt == 0:
        return None, (np.zeros(0), np.zeros(0))
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    flags = np.concatenate(all_flags).astype(bool) if all_flags else np.zeros(0, bool)
    order = np.argsort(-scores, kind="stable")
    flags = flags[order]
    if flags.size == 0:
        return 0.0, (np.zeros(0), np.zeros(0))
    rec, prec = pr_curve(flags, n_gt)
    return interpolated_ap(rec, prec), (rec, prec)


def in_tier(record: KittiObjectRecord, tier: str) -> bool:
    min_h, max_occ, max_trunc = DIFFICULTY[tier]
    return record.height >= min_h and record.occluded <= max_occ and record.truncated <= max_trunc


def difficulty_filter(records: Iterable[KittiObjectRecord], tier: str) -> list[KittiObjectRecord]:
    if tier not in DIFFICULTY:
        raise ValueError(f"unknown tier {tier!r}; expected one of {TIERS}")
    return [r for r in records if in_tier(r, tier)]


def evaluate_detection(predictions: Sequence[Sequence[BoundingBox]],
                       ground_truth: Sequence[Sequence[KittiObjectRecord]],
                       dont_care: Sequence[Sequence] | None = None,
                       iou_threshold: float = 0.5) -> DetectionEval:
    """Per-tier AP.  Ground truth outside a tier (and don't-care areas) is ignored."""
    dont_care = dont_care or [[] for _ in predictions]
    ap, curves = {}, {}
    for tier in TIERS:
        rows = []
        for dets, gts, dc in zip(predictions, ground_truth, dont_care):
            keep = [g for g in gts if in_tier(g, tier)]
            ign = [g for g in gts if not in_tier(g, tier)] + list(dc)
            rows.append((dets, keep, ign))
        ap[tier], curves[tier] = dataset_average_precision(rows, iou_threshold)
    return DetectionEval(ap=ap, pr_curves=curves)


def _sweep_counts(probability: np.ndarray, gt: np.ndarray, thresholds: np.ndarray):
    """TP and FP counts of ``probability >= t`` for every threshold."""
    p = np.asarray(probability, dtype=np.float64).ravel()
    g = np.asarray(gt).ravel().astype(bool)
    # pixel is predicted positive for thresholds[k] iff k < n_le where n_le = #{t <= p}
    n_le = np.searchsorted(thresholds, p, side="right")
    pos_hist = np.bincount(n_le[g], minlength=len(thresholds) + 1)
    neg_hist = np.bincount(n_le[~g], minlength=len(thresholds) + 1)
    # count of pixels with n_le > k  == reverse cumulative sum from k+1
    tp = np.cumsum(pos_hist[::-1])[::-1][1:]
    fp = np.cumsum(neg_hist[::-1])[::-1][1:]
    return tp, fp, int(g.sum())


def max_f1(probability: np.ndarray, gt_mask: np.ndarray, thresholds: np.ndarray = THRESHOLDS) -> SegEval:
    """Maximum pixel F1 and AP over a threshold sweep of the road probability."""
    probability = np.asarray(probability)
    gt_mask = np.asarray(gt_mask)
    if probability.shape != gt_mask.shape:
        raise ValueError(f"probability {probability.shape} and mask {gt_mask.shape} differ in shape")
    tp, fp, n_pos = _sweep_counts(probability, gt_mask, thresholds)
    if n_pos == 0:
        return SegEval(None, None, None)
    fn = n_pos - tp
    f1 = np.where(tp > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    best = int(np.argmax(f1))
    defined = (tp + fp) > 0
    recall = tp[defined] / n_pos
    precision = tp[defined] / (tp[defined] + fp[defined])
    order = np.argsort(recall, kind="stable")
    ap = interpolated_ap(recall[order], precision[order]) if defined.any() else 0.0
    return SegEval(max_f1=float(f1[best]), ap=ap, threshold=float(thresholds[best]))


def pixel_accuracy(probability: np.ndarray, gt_mask: np.ndarray, threshold: float = 0.5) -> float:
    return float(((np.asarray(probability) >= threshold) == np.asarray(gt_mask).astype(bool)).mean())


def cls_metrics(predictions: Sequence[int], labels: Sequence[int]) -> ClsEval:
    """Accuracy plus precision/recall of the positive class (label 1)."""
    p = np.asarray(predictions).astype(int)
    y = np.asarray(labels).astype(int)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} differ in length")
    tp = int(((p == 1) & (y == 1)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    accuracy = float((p == y).mean()) if p.size else float("nan")
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return ClsEval(accuracy, precision, recall)


def format_report(sections: dict[str, dict[str, float | None]]) -> str:
    """Line-oriented ``metric = value`` report grouped by task."""
    lines = []
    for task, rows in sections.items():
        lines.append(f"[{task}]")
        for k, v in rows.items():
            lines.append(f"{k} = {'n/a' if v is None else f'{v:.4f}'}")
    return "\n".join(lines) + "\n"
