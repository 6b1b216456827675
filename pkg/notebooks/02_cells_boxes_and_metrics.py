"""From a labelled street scene to cell targets, decoded boxes and scores.

Run: python3 notebooks/02_cells_boxes_and_metrics.py
"""
import numpy as np

from multinet.data_io import format_kitti_labels, make_synthetic
from multinet.det_decoder import GridGeometry, assign_cells, decode_cells, nms
from multinet.metrics import cls_metrics, evaluate_detection, max_f1

scene = make_synthetic(index=0, seed=7)
print(f"scene {scene.id}: {scene.width}x{scene.height}, class {scene.scene_class}, "
      f"{len(scene.boxes)} vehicles, {len(scene.dont_care)} don't-care regions")
print(format_kitti_labels(scene.records))

# Every 32x32 cell overlapping a vehicle becomes positive and regresses that box
# relative to its own centre.  Cells touching only don't-care regions are masked.
grid = GridGeometry.for_image(scene.height, scene.width)
labels = assign_cells(scene.boxes, scene.dont_care, grid)
print("positive cells:\n", labels.positive.astype(int))
print("don't-care cells:\n", labels.dont_care.astype(int))

# A perfect prediction: confident logits on positive cells plus the exact targets.
pred = np.zeros((6, grid.rows, grid.cols))
pred[1] = np.where(labels.positive, 8.0, -8.0)
pred[2:] = labels.targets
raw = decode_cells(pred, grid)
kept = nms(raw, iou_threshold=0.5)
print(f"{len(raw)} cell boxes decode to {len(kept)} after non-maximum suppression")

gts = [[r for r in scene.records if r.type == "Car"]]
print("detection AP by tier:", evaluate_detection([kept], gts, [scene.dont_care]).ap)

# Segmentation scores sweep a threshold over the road probability.
rng = np.random.default_rng(0)
noisy = np.clip(scene.seg_mask + rng.normal(0, 0.35, scene.seg_mask.shape), 0, 1)
seg = max_f1(noisy, scene.seg_mask)
print(f"road MaxF1 {seg.max_f1:.3f} at threshold {seg.threshold:.2f}, AP {seg.ap:.3f}")

print("scene classification:", cls_metrics([1, 0, 1, 1], [1, 0, 0, 1]))
