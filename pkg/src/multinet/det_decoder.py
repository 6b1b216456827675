"""Proposal-free detection decoder.

The image is split into 32x32 cells.  Every cell predicts six numbers: two
confidence logits and a box ``(cx, cy, cw, ch)`` relative to the cell::

    cx = (x_box - x_cell) / 32      cy = (y_box - y_cell) / 32
    cw = w_box / 32                 ch = h_box / 32

A second stage pools stride-8 features inside each cell's first-stage box
with RoI align, and predicts a residual that is added to the first-stage
output.  Because the pooling is differentiable in the box coordinates, the
refinement loss also trains the first-stage box regression.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ops
from .encoder import STRIDE, EncoderConfig, FeaturePyramid, he_normal
from .rng import make_rng
from .tensor import Tensor, make_node

CELL = STRIDE
NUM_CHANNELS = 6
FEATURE_STRIDE = 8


@dataclass
class BoundingBox:
    """Axis-aligned box given by centre and size in image pixels."""

    x: float
    y: float
    w: float
    h: float
    confidence: float = 1.0
    label: str = "Car"
    cell: int | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, **kw) -> "BoundingBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, **kw)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2.0, self.y - self.h / 2.0, self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass(frozen=True)
class GridGeometry:
    rows: int
    cols: int
    cell: int = CELL

    def __post_init__(self):
        if self.cell != CELL:
            raise ValueError(f"cell size is fixed at {CELL} px")

    @classmethod
    def for_image(cls, height: int, width: int) -> "GridGeometry":
        return cls(height // CELL, width // CELL)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """``(x_c, y_c)`` arrays of shape ``(rows, cols)``."""
        ys = (np.arange(self.rows) + 0.5) * self.cell
        xs = (np.arange(self.cols) + 0.5) * self.cell
        yc, xc = np.meshgrid(ys, xs, indexing="ij")
        return xc, yc

    @property
    def image_size(self) -> tuple[int, int]:
        """(height, width) in pixels."""
        return self.rows * self.cell, self.cols * self.cell


@dataclass
class CellLabels:
    """Per-cell training targets; arrays may carry a leading batch axis.

    ``targets`` is ``(..., 4, rows, cols)`` and is only meaningful where
    ``positive`` is set (it is zero elsewhere and never read by the loss).
    """

    positive: np.ndarray
    dont_care: np.ndarray
    targets: np.ndarray

    @classmethod
    def stack(cls, labels: Sequence["CellLabels"]) -> "CellLabels":
        return cls(np.stack([l.positive for l in labels]), np.stack([l.dont_care for l in labels]),
                   np.stack([l.targets for l in labels]))


@dataclass
class DetOutput:
    initial: Tensor
    refined: Tensor
    bottleneck: Tensor


# ---------------------------------------------------------------------------
# label encoding
# ---------------------------------------------------------------------------

def _clip_box(box: BoundingBox, height: int, width: int) -> BoundingBox | None:
    x1, y1, x2, y2 = box.corners
    x1, x2 = max(x1, 0.0), min(x2, float(width))
    y1, y2 = max(y1, 0.0), min(y2, float(height))
    if x2 <= x1 or y2 <= y1:
        return None
    if (x1, y1, x2, y2) == box.corners:
        return box
    return BoundingBox.from_corners(x1, y1, x2, y2, confidence=box.confidence, label=box.label)


def _overlap_mask(corners: np.ndarray, grid: GridGeometry) -> np.ndarray:
    """``(M, rows, cols)`` mask of cells sharing positive area with each rectangle."""
    if len(corners) == 0:
        return np.zeros((0, grid.rows, grid.cols), dtype=bool)
    c = grid.cell
    x0 = np.arange(grid.cols) * c
    y0 = np.arange(grid.rows) * c
    ox = (corners[:, 0:1] < x0 + c) & (corners[:, 2:3] > x0)
    oy = (corners[:, 1:2] < y0 + c) & (corners[:, 3:4] > y0)
    return oy[:, :, None] & ox[:, None, :]


def encode_box(box: BoundingBox, x_c: float, y_c: float) -> tuple[float, float, float, float]:
    return ((box.x - x_c) / CELL, (box.y - y_c) / CELL, box.w / CELL, box.h / CELL)


def assign_cells(boxes: Sequence[BoundingBox], dont_care: Sequence[Sequence[float]],
                 grid: GridGeometry) -> CellLabels:
    """Build per-cell targets.

    A cell is positive iff it overlaps at least one box; it then regresses the
    overlapping box whose centre is nearest its own (first box on ties).
    Cells overlapping only don't-care rectangles ``(x1, y1, x2, y2)`` are
    flagged don't-care.
    """
    height, width = grid.image_size
    clipped = [b for b in (_clip_box(b, height, width) for b in boxes) if b is not None]
    positive = np.zeros((grid.rows, grid.cols), dtype=bool)
    targets = np.zeros((4, grid.rows, grid.cols), dtype=np.float64)
    xc, yc = grid.centers()
    if clipped:
        hits = _overlap_mask(np.array([b.corners for b in clipped]), grid)
        centers = np.array([(b.x, b.y) for b in clipped])
        d2 = (centers[:, 0, None, None] - xc) ** 2 + (centers[:, 1, None, None] - yc) ** 2
        d2 = np.where(hits, d2, np.inf)
        positive = hits.any(axis=0)
        owner = d2.argmin(axis=0)
        for r, c in zip(*np.nonzero(positive)):
            targets[:, r, c] = encode_box(clipped[owner[r, c]], xc[r, c], yc[r, c])
    dc = np.zeros_like(positive)
    if len(dont_care):
        dc = _overlap_mask(np.asarray(dont_care, dtype=np.float64).reshape(-1, 4), grid).any(axis=0)
    return CellLabels(positive=positive, dont_care=dc & ~positive, targets=targets)


def confidence(pred: np.ndarray) -> np.ndarray:
    """Foreground probability from the two confidence logits on axis 0."""
    return ops.softmax(pred[:2], axis=0)[1]


def decode_cells(pred, grid: GridGeometry, conf_threshold: float = 0.5,
                 stats: dict | None = None) -> list[BoundingBox]:
    """Turn one image's ``(6, rows, cols)`` prediction into boxes (no NMS)."""
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if pred.shape != (NUM_CHANNELS, grid.rows, grid.cols):
        raise ValueError(f"prediction shape {pred.shape} does not match grid {grid.rows}x{grid.cols}")
    conf = confidence(pred)
    xc, yc = grid.centers()
    out = []
    for r, c in zip(*np.nonzero(conf >= conf_threshold)):
        cx, cy, cw, ch = (float(v) for v in pred[2:, r, c])
        if not (cw > 0 and ch > 0):
            if stats is not None:
                stats["dropped_boxes"] = stats.get("dropped_boxes", 0) + 1
            continue
        out.append(BoundingBox(cx * CELL + xc[r, c], cy * CELL + yc[r, c], cw * CELL, ch * CELL,
                               confidence=float(conf[r, c]), cell=int(r * grid.cols + c)))
    return out


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def det_init(enc: EncoderConfig, seed: int, bottleneck: int = 500, roi_size: int = 3,
             dtype=np.float32) -> dict[str, np.ndarray]:
    pooled = enc.f8_channels * roi_size * roi_size
    return {
        "det.bottleneck.weight": he_normal(make_rng(seed, "det.bottleneck"), (bottleneck, enc.out_channels, 1, 1), dtype),
        "det.bottleneck.bias": np.zeros(bottleneck, dtype=dtype),
        "det.pred.weight": he_normal(make_rng(seed, "det.pred"), (NUM_CHANNELS, bottleneck, 1, 1), dtype),
        "det.pred.bias": np.zeros(NUM_CHANNELS, dtype=dtype),
        "det.delta.weight": he_normal(make_rng(seed, "det.delta"), (NUM_CHANNELS, bottleneck + pooled, 1, 1), dtype),
        "det.delta.bias": np.zeros(NUM_CHANNELS, dtype=dtype),
    }


def cells_to_rois(box: Tensor, feature_stride: int = FEATURE_STRIDE) -> Tensor:
    """Map ``(N, 4, rows, cols)`` cell-relative boxes to ``(N, rows*cols, 4)`` corners.

    Corners are in units of the ``feature_stride`` feature map.
    """
    n, _, rows, cols = box.shape
    grid = GridGeometry(rows, cols)
    xc, yc = grid.centers()
    k = CELL / feature_stride
    b = box.data
    cx = (b[:, 0] * CELL + xc) / feature_stride
    cy = (b[:, 1] * CELL + yc) / feature_stride
    hw = b[:, 2] * k / 2.0
    hh = b[:, 3] * k / 2.0
    out = np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=-1).reshape(n, rows * cols, 4)

    def backward(g):
        g = g.reshape(n, rows, cols, 4)
        gx1, gy1, gx2, gy2 = g[..., 0], g[..., 1], g[..., 2], g[..., 3]
        return (np.stack([k * (gx1 + gx2), k * (gy1 + gy2), k / 2.0 * (gx2 - gx1), k / 2.0 * (gy2 - gy1)], axis=1),)

    return make_node(out.astype(box.dtype), [box], backward)


def det_forward(params: Mapping[str, Tensor], pyramid: FeaturePyramid, roi_size: int = 3,
                training: bool = False, rng: np.random.Generator | None = None,
                dropout_p: float = 0.5, stats: dict | None = None) -> DetOutput:
    hidden = ops.relu(ops.conv2d(pyramid.f32, params["det.bottleneck.weight"], params["det.bottleneck.bias"]))
    hidden = ops.dropout(hidden, dropout_p, rng, training=training)
    initial = ops.conv2d(hidden, params["det.pred.weight"], params["det.pred.bias"])

    n, _, rows, cols = initial.shape
    rois = cells_to_rois(initial[:, 2:6])
    pooled = ops.roi_align(pyramid.f8, rois, roi_size, stats=stats)  # (N, K, C, R, R)
    pooled = ops.reshape(pooled, (n, rows, cols, -1))
    pooled = ops.transpose(pooled, (0, 3, 1, 2))
    delta = ops.conv2d(ops.concat([pooled, hidden], axis=1), params["det.delta.weight"], params["det.delta.bias"])
    refined = ops.add(initial, delta)
    return DetOutput(initial=initial, refined=refined, bottleneck=hidden)


def stage_loss(pred: Tensor, labels: CellLabels, reg_weight: float = 1.0) -> tuple[Tensor, Tensor]:
    """Confidence and weighted regression loss of one prediction stage.

    Both are sums over cells divided by the total cell count; don't-care
    cells are multiplied by zero and negatives carry no regression term.
    """
    positive = np.asarray(labels.positive, dtype=bool)
    care = ~np.asarray(labels.dont_care, dtype=bool)
    if pred.ndim != 4 or pred.shape[1] != NUM_CHANNELS or pred.shape[:1] + pred.shape[2:] != positive.shape:
        raise ValueError(f"prediction {pred.shape} and labels {positive.shape} are not congruent")
    count = positive.size
    dtype = pred.dtype
    ce = ops.cross_entropy_map(pred[:, 0:2], positive.astype(np.int64))
    conf = ops.scale(ops.sum(ops.scale(ce, care.astype(dtype))), 1.0 / count)
    diff = ops.abs(ops.sub(pred[:, 2:6], Tensor(np.asarray(labels.targets, dtype=dtype))))
    reg_mask = (positive & care).astype(dtype)[:, None]
    reg = ops.scale(ops.sum(ops.scale(diff, np.broadcast_to(reg_mask, diff.shape))), reg_weight / count)
    return conf, reg


def det_loss(output: DetOutput, labels: CellLabels, reg_weight: float = 1.0,
             stages: tuple[str, ...] = ("initial", "refined")) -> Tensor:
    """Sum over stages of (confidence + reg_weight * L1 box) loss, mean over cells."""
    total = None
    for stage in stages:
        conf, reg = stage_loss(getattr(output, stage), labels, reg_weight)
        part = ops.add(conf, reg)
        total = part if total is None else ops.add(total, part)
    return total


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------

def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` rectangles."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms(boxes: Sequence[BoundingBox], iou_threshold: float = 0.5) -> list[BoundingBox]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending confidence (ties by cell index, then
    input order); a box is dropped if its IoU with an already kept box
    exceeds ``iou_threshold``.
    """
    order = sorted(range(len(boxes)),
                   key=lambda i: (-boxes[i].confidence, boxes[i].cell if boxes[i].cell is not None else -1, i))
    kept: list[BoundingBox] = []
    corners: list[tuple] = []
    for i in order:
        c = boxes[i].corners
        if all(iou(c, k) <= iou_threshold for k in corners):
            kept.append(boxes[i])
            corners.append(c)
    return kept
