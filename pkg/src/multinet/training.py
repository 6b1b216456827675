"""Joint end-to-end training.

Each task gets its own batch and its own forward pass through the shared
encoder.  The three losses are back-propagated one after another into the
same gradient buffers, so encoder gradients are summed across tasks while
each decoder only sees its own task.  A single Adam update follows.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import ops
from .cls_decoder import cls_loss
from .data_io import KittiObjectRecord, Sample
from .det_decoder import BoundingBox, CellLabels, GridGeometry, assign_cells, det_loss
from .model import TASKS, MultiNet, NetworkConfig
from .ops import ShapeError
from .rng import make_rng
from .seg_decoder import seg_loss

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """A loss or gradient became NaN/Inf; the step was not applied."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    dropout_p: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seg_batch: int = 2
    det_batch: int = 2
    cls_batch: int = 2
    augment_seg: bool = True
    augment_det: bool = True
    augment_cls: bool = True
    reg_weight: float = 1.0
    tasks: tuple[str, ...] = TASKS
    seed: int = 0
    max_steps: int = 1000

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")

    def batch_size(self, task: str) -> int:
        return getattr(self, f"{task}_batch")

    def augments(self, task: str) -> bool:
        return getattr(self, f"augment_{task}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {line_no}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(int(v) if v.strip().lstrip("-").isdigit() else v.strip()
                     for v in value.replace(",", " ").split())
    return value


def apply_overrides(train: TrainConfig, net: NetworkConfig, values: Mapping[str, str]
                    ) -> tuple[TrainConfig, NetworkConfig]:
    """Apply string overrides; keys name TrainConfig fields or ``net.*`` / ``encoder.*`` fields."""
    t_updates, n_updates, e_updates = {}, {}, {}
    t_fields = {f.name for f in fields(TrainConfig)}
    n_fields = {f.name for f in fields(NetworkConfig)} - {"encoder"}
    e_fields = {f.name for f in fields(type(net.encoder))}
    for key, value in values.items():
        if key in t_fields:
            t_updates[key] = _coerce(value, getattr(train, key))
        elif key.startswith("net.") and key[4:] in n_fields:
            n_updates[key[4:]] = _coerce(value, getattr(net, key[4:]))
        elif key.startswith("encoder.") and key[8:] in e_fields:
            e_updates[key[8:]] = _coerce(value, getattr(net.encoder, key[8:]))
        else:
            raise KeyError(f"unknown config key {key!r}")
    enc = replace(net.encoder, **e_updates)
    return replace(train, **t_updates), replace(net, encoder=enc, **n_updates)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                weight_decay: float = 0.0) -> None:
    """One in-place Adam step with decoupled weight decay (``t`` counts from 1)."""
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        update = update + lr * weight_decay * param
    param -= update.astype(param.dtype, copy=False)


class Adam:
    def __init__(self, params: Mapping, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    @classmethod
    def from_config(cls, params: Mapping, cfg: TrainConfig) -> "Adam":
        return cls(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self, params: Mapping) -> None:
        self.t += 1
        for k, p in params.items():
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            # decay weights only, never biases
            wd = self.weight_decay if k.endswith(".weight") else 0.0
            adam_update(p.data, g, self.m[k], self.v[k], self.t, self.lr, self.beta1, self.beta2, self.eps, wd)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 0.1
    contrast: tuple[float, float] = (0.8, 1.2)
    flip_prob: float = 0.5
    scale: tuple[float, float] = (0.8, 1.2)
    min_visible: float = 0.25


def adjust_brightness(sample: Sample, offset: float) -> Sample:
    return replace(sample, image=(sample.image + offset).astype(sample.image.dtype))


def adjust_contrast(sample: Sample, factor: float) -> Sample:
    mean = sample.image.mean()
    return replace(sample, image=((sample.image - mean) * factor + mean).astype(sample.image.dtype))


def _records_from(boxes: Sequence[BoundingBox], dont_care) -> list[KittiObjectRecord]:
    recs = [KittiObjectRecord.from_box(b, b.label) for b in boxes]
    recs += [KittiObjectRecord("DontCare", -1.0, -1, -10.0, *dc) for dc in dont_care]
    return recs


def flip_sample(sample: Sample) -> Sample:
    w = sample.width
    boxes = [replace(b, x=w - b.x) for b in sample.boxes]
    dont_care = [(w - x2, y1, w - x1, y2) for x1, y1, x2, y2 in sample.dont_care]
    return replace(sample, image=sample.image[:, ::-1].copy(), seg_mask=sample.seg_mask[:, ::-1].copy(),
                   boxes=boxes, dont_care=dont_care, records=_records_from(boxes, dont_care))


def _clip_rect(x1, y1, x2, y2, w, h):
    return max(x1, 0.0), max(y1, 0.0), min(x2, float(w)), min(y2, float(h))


def rescale_and_crop(sample: Sample, scale: float, offset: tuple[int, int], min_visible: float = 0.25) -> Sample:
    """Resize by ``scale`` then take the original-size window at ``offset`` (may be negative = pad).

    Boxes keeping less than ``min_visible`` of their area are dropped.
    """
    h, w = sample.height, sample.width
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    sy, sx = nh / h, nw / w
    oy, ox = offset
    # output pixel (r, c) samples resized pixel (r + oy, c + ox), i.e. source (.. + 0.5) / s - 0.5
    rr = (np.arange(h) + oy + 0.5) / sy - 0.5
    cc = (np.arange(w) + ox + 0.5) / sx - 0.5
    inside = ((np.arange(h) + oy >= 0) & (np.arange(h) + oy < nh))[:, None] & \
             ((np.arange(w) + ox >= 0) & (np.arange(w) + ox < nw))[None, :]
    grid_r, grid_c = np.meshgrid(rr, cc, indexing="ij")
    image = np.stack([ndimage.map_coordinates(sample.image[..., k].astype(np.float64), [grid_r, grid_c],
                                              order=1, mode="nearest") for k in range(3)], axis=-1)
    image = np.where(inside[..., None], image, 0.0).astype(sample.image.dtype)
    mask = ndimage.map_coordinates(sample.seg_mask, [np.rint(np.clip(grid_r, 0, h - 1)), np.rint(np.clip(grid_c, 0, w - 1))],
                                   order=0, mode="nearest").astype(sample.seg_mask.dtype)
    mask = np.where(inside, mask, 0).astype(sample.seg_mask.dtype)

    boxes = []
    for b in sample.boxes:
        x1, y1, x2, y2 = b.corners
        x1, x2 = x1 * sx - ox, x2 * sx - ox
        y1, y2 = y1 * sy - oy, y2 * sy - oy
        area = (x2 - x1) * (y2 - y1)
        cx1, cy1, cx2, cy2 = _clip_rect(x1, y1, x2, y2, w, h)
        if cx2 <= cx1 or cy2 <= cy1 or (cx2 - cx1) * (cy2 - cy1) < min_visible * area:
            continue
        boxes.append(BoundingBox.from_corners(cx1, cy1, cx2, cy2, confidence=b.confidence, label=b.label))
    dont_care = []
    for x1, y1, x2, y2 in sample.dont_care:
        r = _clip_rect(x1 * sx - ox, y1 * sy - oy, x2 * sx - ox, y2 * sy - oy, w, h)
        if r[2] > r[0] and r[3] > r[1]:
            dont_care.append(r)
    return replace(sample, image=image, seg_mask=mask, boxes=boxes, dont_care=dont_care,
                   records=_records_from(boxes, dont_care))


# classification labels only depend on coarse road layout, so it tolerates stronger colour jitter
TASK_AUGMENT = {
    "seg": AugmentConfig(),
    "det": AugmentConfig(),
    "cls": AugmentConfig(brightness=0.2, contrast=(0.7, 1.3)),
}


def augment(sample: Sample, task: str, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> Sample:
    """Colour jitter, random flip, random resize and crop back to the input size."""
    if cfg is None:
        if task not in TASK_AUGMENT:
            raise ValueError(f"unknown task {task!r}")
        cfg = TASK_AUGMENT[task]
    out = adjust_brightness(sample, rng.uniform(-cfg.brightness, cfg.brightness))
    out = adjust_contrast(out, rng.uniform(*cfg.contrast))
    out = replace(out, image=np.clip(out.image, 0.0, 1.0).astype(sample.image.dtype))
    if rng.random() < cfg.flip_prob:
        out = flip_sample(out)
    scale = rng.uniform(*cfg.scale)
    nh, nw = int(round(out.height * scale)), int(round(out.width * scale))
    dy, dx = nh - out.height, nw - out.width
    oy = int(rng.integers(min(dy, 0), max(dy, 0) + 1))
    ox = int(rng.integers(min(dx, 0), max(dx, 0) + 1))
    return rescale_and_crop(out, scale, (oy, ox), cfg.min_visible)


# ---------------------------------------------------------------------------
# batches and the joint step
# ---------------------------------------------------------------------------

@dataclass
class TaskBatch:
    images: np.ndarray                      # (N, 3, H, W)
    masks: np.ndarray | None = None         # (N, H, W)
    labels: CellLabels | None = None
    classes: np.ndarray | None = None       # (N,)


def make_batch(samples: Sequence[Sample], task: str, dtype=np.float32) -> TaskBatch:
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(dtype)
    if task == "seg":
        return TaskBatch(images, masks=np.stack([s.seg_mask for s in samples]).astype(np.int64))
    if task == "det":
        grid = GridGeometry.for_image(images.shape[2], images.shape[3])
        labels = CellLabels.stack([assign_cells(s.boxes, s.dont_care, grid) for s in samples])
        return TaskBatch(images, labels=labels)
    if task == "cls":
        return TaskBatch(images, classes=np.array([s.scene_class for s in samples], dtype=np.int64))
    raise ValueError(f"unknown task {task!r}")


def batch_indices(n: int, batch: int, step: int, seed: int, task: str) -> list[int]:
    """Sample indices for ``task`` at ``step``; each task cycles through its own shuffled epochs."""
    out = []
    for k in range(step * batch, step * batch + batch):
        epoch, pos = divmod(k, n)
        perm = make_rng(seed, "order", task, epoch).permutation(n)
        out.append(int(perm[pos]))
    return out


def task_batches(datasets: Mapping[str, Sequence[Sample]], cfg: TrainConfig, step: int,
                 dtype=np.float32) -> dict[str, TaskBatch]:
    batches = {}
    for task in cfg.tasks:
        data = datasets.get(task)
        if not data:
            continue
        idx = batch_indices(len(data), cfg.batch_size(task), step, cfg.seed, task)
        chosen = [data[i] for i in idx]
        if cfg.augments(task):
            chosen = [augment(s, task, make_rng(cfg.seed, "augment", task, step, j)) for j, s in zip(idx, chosen)]
        batches[task] = make_batch(chosen, task, dtype)
    return batches


def task_loss(model: MultiNet, task: str, batch: TaskBatch, cfg: TrainConfig, step: int, training: bool = True):
    pyramid = model.encode(batch.images)
    rng = make_rng(cfg.seed, "dropout", task, step) if training else None
    out = model.decode(task, pyramid, training=training, rng=rng, dropout_p=cfg.dropout_p)
    if task == "seg":
        return seg_loss(out, batch.masks)
    if task == "det":
        return det_loss(out, batch.labels, cfg.reg_weight)
    return cls_loss(out, batch.classes)


@dataclass
class LossReport:
    step: int
    losses: dict[str, float]
    wall_ms: float = 0.0

    @property
    def total(self) -> float:
        return float(sum(self.losses.values()))

    def format(self, with_timing: bool = False) -> str:
        parts = [f"step={self.step}"]
        parts += [f"{t}={self.losses[t]:.6f}" for t in TASKS if t in self.losses]
        parts.append(f"total={self.total:.6f}")
        if with_timing:
            parts.append(f"wall_ms={self.wall_ms:.1f}")
        return " ".join(parts)


def accumulate_gradients(model: MultiNet, batches: Mapping[str, TaskBatch], cfg: TrainConfig,
                         step: int) -> dict[str, float]:
    """Forward and backward every task batch into the shared gradient buffers.

    Gradients are *not* cleared first.  Raises :class:`NonFiniteLossError`
    (after clearing gradients) if any loss or gradient is not finite.
    """
    if not batches:
        raise ValueError("joint step needs at least one task batch")
    losses = {}
    for task in TASKS:
        if task not in batches:
            continue
        loss = task_loss(model, task, batches[task], cfg, step)
        value = loss.item()
        if not math.isfinite(value):
            model.zero_grad()
            raise NonFiniteLossError(f"{task} loss is {value} at step {step}")
        loss.backward()
        losses[task] = value
    for name, p in model.params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            model.zero_grad()
            raise NonFiniteLossError(f"non-finite gradient in {name} at step {step}")
    return losses


def joint_step(model: MultiNet, optimizer: Adam, batches: Mapping[str, TaskBatch], cfg: TrainConfig,
               step: int) -> LossReport:
    start = time.perf_counter()
    model.zero_grad()
    losses = accumulate_gradients(model, batches, cfg, step)
    optimizer.step(model.params)
    model.zero_grad()
    return LossReport(step + 1, losses, (time.perf_counter() - start) * 1000.0)


def train(model: MultiNet, datasets: Mapping[str, Sequence[Sample]], cfg: TrainConfig,
          optimizer: Adam | None = None, start_step: int = 0, steps: int | None = None,
          callback: Callable[[LossReport, MultiNet], bool | None] | None = None) -> tuple[Adam, list[LossReport]]:
    """Run ``steps`` joint steps (default ``cfg.max_steps``).

    ``callback`` is called after every step; returning True stops early.
    """
    optimizer = optimizer or Adam.from_config(model.params, cfg)
    dtype = np.dtype(model.config.dtype)
    reports = []
    n = cfg.max_steps if steps is None else steps
    for step in range(start_step, start_step + n):
        batches = task_batches(datasets, cfg, step, dtype)
        report = joint_step(model, optimizer, batches, cfg, step)
        reports.append(report)
        if callback is not None and callback(report, model):
            break
    return optimizer, reports


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = "MNET1"


class CheckpointError(ValueError):
    pass


class BadMagicCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    step: int = 0
    config: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: MultiNet, optimizer: Adam | None, step: int,
                train_cfg: TrainConfig | None = None) -> "Checkpoint":
        cfg = {"network": model.config.to_dict()}
        if train_cfg is not None:
            cfg["train"] = train_cfg.to_dict()
        return cls(params={k: p.data.copy() for k, p in model.params.items()},
                   adam_m={k: a.copy() for k, a in optimizer.m.items()} if optimizer else {},
                   adam_v={k: a.copy() for k, a in optimizer.v.items()} if optimizer else {},
                   adam_t=optimizer.t if optimizer else 0, step=step, config=cfg)

    def restore(self, model: MultiNet, optimizer: Adam | None = None) -> None:
        try:
            model.load_state_dict(self.params)
        except ShapeError as exc:
            raise CheckpointShapeError(str(exc)) from None
        if optimizer is not None:
            for store, src in ((optimizer.m, self.adam_m), (optimizer.v, self.adam_v)):
                for k in store:
                    if k in src:
                        if src[k].shape != store[k].shape:
                            raise CheckpointShapeError(f"optimizer moment {k}: {src[k].shape} vs {store[k].shape}")
                        store[k] = src[k].astype(store[k].dtype)
            optimizer.t = self.adam_t

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"adam.m/{k}": v for k, v in self.adam_m.items()})
        out.update({f"adam.v/{k}": v for k, v in self.adam_v.items()})
        return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Text header (magic, metadata, one line per tensor) then float32 LE blocks in name order."""
    tensors = ckpt.tensors()
    names = sorted(tensors)
    lines = [MAGIC, f"step {ckpt.step}", f"adam_t {ckpt.adam_t}",
             "config " + json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")),
             f"tensors {len(names)}"]
    for name in names:
        shape = tensors[name].shape
        lines.append(f"tensor {name} {' '.join(str(d) for d in shape) if shape else '-'}")
    lines.append("data")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for name in names:
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    first = buf.split(b"\n", 1)[0]
    if first != MAGIC.encode():
        if first.startswith(b"MNET"):
            raise CheckpointVersionError(f"{path}: unsupported checkpoint version {first.decode(errors='replace')!r}")
        raise BadMagicCheckpointError(f"{path}: not a checkpoint (magic {first[:8]!r})")
    marker = buf.find(b"\ndata\n")
    if marker < 0:
        raise TruncatedCheckpointError(f"{path}: header is incomplete")
    header = buf[:marker].decode("utf-8").split("\n")[1:]
    payload = memoryview(buf)[marker + len(b"\ndata\n"):]
    meta, specs = {}, []
    for line in header:
        key, _, rest = line.partition(" ")
        if key == "tensor":
            name, _, dims = rest.partition(" ")
            shape = () if dims == "-" else tuple(int(d) for d in dims.split())
            specs.append((name, shape))
        else:
            meta[key] = rest
    try:
        if int(meta["tensors"]) != len(specs):
            raise TruncatedCheckpointError(f"{path}: header lists {len(specs)} of {meta['tensors']} tensors")
        step, adam_t, config = int(meta["step"]), int(meta["adam_t"]), json.loads(meta["config"])
    except (KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed header ({exc})") from None
    need = sum(4 * int(np.prod(s)) for _, s in specs)
    if len(payload) != need:
        raise TruncatedCheckpointError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    ckpt = Checkpoint(params={}, step=step, adam_t=adam_t, config=config)
    pos = 0
    for name, shape in specs:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload[pos:pos + 4 * count], dtype="<f4").reshape(shape).astype(np.float32)
        pos += 4 * count
        kind, _, key = name.partition("/")
        {"param": ckpt.params, "adam.m": ckpt.adam_m, "adam.v": ckpt.adam_v}[kind][key] = arr
    return ckpt
