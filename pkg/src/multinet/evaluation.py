"""Run a model over samples and score it with :mod:`multinet.metrics`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data_io import Sample
from .det_decoder import CELL, BoundingBox, CellLabels, GridGeometry, assign_cells, confidence, decode_cells, iou, nms
from .metrics import cls_metrics, evaluate_detection, max_f1, pixel_accuracy
from .model import TASKS, MultiNet


@dataclass
class Predictions:
    """Per-sample outputs of one inference pass over a list of samples."""

    seg_prob: list[np.ndarray] = field(default_factory=list)       # (H, W) road probability
    det_raw: list[np.ndarray] = field(default_factory=list)        # (6, rows, cols) refined
    det_initial: list[np.ndarray] = field(default_factory=list)    # (6, rows, cols) before refinement
    cls_pred: list[int] = field(default_factory=list)


def predict(model: MultiNet, samples: Sequence[Sample], tasks: Iterable[str] = TASKS,
            batch_size: int = 4) -> Predictions:
    tasks = list(tasks)
    out = Predictions()
    dtype = np.dtype(model.config.dtype)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([s.image.transpose(2, 0, 1) for s in chunk]).astype(dtype)
        res = model.forward(images, tasks)
        if "seg" in res:
            out.seg_prob += list(res["seg"].probability[:, 1])
        if "det" in res:
            out.det_raw += list(res["det"].refined.data.astype(np.float64))
            out.det_initial += list(res["det"].initial.data.astype(np.float64))
        if "cls" in res:
            out.cls_pred += [int(v) for v in res["cls"].predicted()]
    return out


def detections(raw: Sequence[np.ndarray], grid: GridGeometry, conf_threshold: float = 0.5,
               apply_nms: bool = True, nms_iou: float = 0.5) -> list[list[BoundingBox]]:
    boxes = [decode_cells(r, grid, conf_threshold) for r in raw]
    return [nms(b, nms_iou) for b in boxes] if apply_nms else boxes


@dataclass
class FitStats:
    seg_accuracy: float
    cls_accuracy: float
    cell_accuracy: float        # confidence correct on positive cells
    negative_accuracy: float    # confidence correct on cared-for negative cells
    mean_box_iou: float         # decoded box vs assigned ground truth on positive cells

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def _cell_box_iou(pred: np.ndarray, label: CellLabels, grid: GridGeometry) -> list[float]:
    xc, yc = grid.centers()
    out = []
    for r, c in zip(*np.nonzero(label.positive)):
        tx, ty, tw, th = label.targets[:, r, c]
        gt = BoundingBox(tx * CELL + xc[r, c], ty * CELL + yc[r, c], tw * CELL, th * CELL).corners
        px, py, pw, ph = pred[2:, r, c]
        if pw <= 0 or ph <= 0:
            out.append(0.0)
            continue
        box = BoundingBox(px * CELL + xc[r, c], py * CELL + yc[r, c], pw * CELL, ph * CELL).corners
        out.append(iou(box, gt))
    return out


def fit_statistics(model: MultiNet, samples: Sequence[Sample]) -> FitStats:
    """Training-set fit of all three decoders (used for the overfit check)."""
    pred = predict(model, samples)
    grid = model.config.grid
    seg = float(np.mean([pixel_accuracy(p, s.seg_mask) for p, s in zip(pred.seg_prob, samples)]))
    cls = cls_metrics(pred.cls_pred, [s.scene_class for s in samples]).accuracy
    pos_hits = neg_hits = pos_n = neg_n = 0
    ious: list[float] = []
    for raw, s in zip(pred.det_raw, samples):
        lab = assign_cells(s.boxes, s.dont_care, grid)
        on = confidence(raw) >= 0.5
        neg = ~lab.positive & ~lab.dont_care
        pos_hits += int((on & lab.positive).sum())
        pos_n += int(lab.positive.sum())
        neg_hits += int((~on & neg).sum())
        neg_n += int(neg.sum())
        ious += _cell_box_iou(raw, lab, grid)
    return FitStats(seg, cls,
                    pos_hits / pos_n if pos_n else 1.0,
                    neg_hits / neg_n if neg_n else 1.0,
                    float(np.mean(ious)) if ious else 1.0)


def evaluate(model: MultiNet, samples: Sequence[Sample], tasks: Iterable[str] = TASKS,
             conf_threshold: float = 0.5, apply_nms: bool = True) -> dict[str, dict[str, float | None]]:
    """Report sections keyed by task, rows named like the published result tables."""
    tasks = [t for t in TASKS if t in set(tasks)]
    if not samples:
        raise ValueError("cannot evaluate an empty sample list")
    pred = predict(model, samples, tasks)
    sections: dict[str, dict[str, float | None]] = {}
    if "seg" in tasks:
        prob = np.stack(pred.seg_prob)
        gt = np.stack([s.seg_mask for s in samples])
        res = max_f1(prob, gt)
        sections["seg"] = {"MaxF1": res.max_f1, "AP": res.ap}
    if "det" in tasks:
        dets = detections(pred.det_raw, model.config.grid, conf_threshold, apply_nms)
        gts = [[r for r in s.records if r.type == "Car"] for s in samples]
        res = evaluate_detection(dets, gts, [s.dont_care for s in samples])
        sections["det"] = {tier: res.ap[tier] for tier in ("moderate", "easy", "hard")}
    if "cls" in tasks:
        res = cls_metrics(pred.cls_pred, [s.scene_class for s in samples])
        sections["cls"] = {"mean Acc.": res.accuracy, "Precision": res.precision, "Recall": res.recall}
    return sections
