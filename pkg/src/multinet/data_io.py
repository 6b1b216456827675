"""Data ingestion: KITTI labels, Netpbm images, synthetic street scenes.

Dataset directory layout::

    images/<id>.ppm     RGB, binary P6
    masks/<id>.pgm      road mask, binary P5 (0 or 255)
    labels/<id>.txt     KITTI object label lines
    scenes.txt          "<id> <class>" per line
    train.txt, val.txt  one id per line
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .det_decoder import BoundingBox
from .encoder import check_input_dims
from .rng import make_rng

log = logging.getLogger(__name__)

MAX_DIM = 1 << 16


class DataError(ValueError):
    """Malformed input data."""


class LabelParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ImageFormatError(DataError):
    """Base for Netpbm decoding problems."""


class BadMagicError(ImageFormatError):
    pass


class DimensionError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


# ---------------------------------------------------------------------------
# KITTI labels
# ---------------------------------------------------------------------------

@dataclass
class KittiObjectRecord:
    type: str
    truncated: float
    occluded: int
    alpha: float
    left: float
    top: float
    right: float
    bottom: float
    dimensions: tuple[float, float, float] = (0.0, 0.0, 0.0)
    location: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation_y: float = 0.0
    score: float | None = None

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.right, self.bottom)

    def to_box(self) -> BoundingBox:
        return BoundingBox.from_corners(self.left, self.top, self.right, self.bottom,
                                        confidence=1.0 if self.score is None else self.score, label=self.type)

    def to_line(self) -> str:
        vals = [self.type, f"{self.truncated:.2f}", str(int(self.occluded)), f"{self.alpha:.2f}",
                f"{self.left:.2f}", f"{self.top:.2f}", f"{self.right:.2f}", f"{self.bottom:.2f}",
                *(f"{v:.2f}" for v in self.dimensions), *(f"{v:.2f}" for v in self.location),
                f"{self.rotation_y:.2f}"]
        if self.score is not None:
            vals.append(f"{self.score:.4f}")
        return " ".join(vals)

    @classmethod
    def from_box(cls, box: BoundingBox, type_: str = "Car", truncated: float = 0.0, occluded: int = 0,
                 with_score: bool = False) -> "KittiObjectRecord":
        x1, y1, x2, y2 = box.corners
        return cls(type_, truncated, occluded, -10.0, x1, y1, x2, y2,
                   (-1.0, -1.0, -1.0), (-1000.0, -1000.0, -1000.0), -10.0,
                   box.confidence if with_score else None)


def _parse_line(line: str, line_no: int) -> KittiObjectRecord:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise LabelParseError(line_no, f"expected 15 fields (16 with score), got {len(fields)}")
    try:
        nums = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise LabelParseError(line_no, f"unparseable number ({exc})") from None
    occluded = nums[1]
    if occluded != int(occluded):
        raise LabelParseError(line_no, f"occlusion must be an integer, got {fields[2]}")
    return KittiObjectRecord(fields[0], nums[0], int(occluded), nums[2], nums[3], nums[4], nums[5], nums[6],
                             tuple(nums[7:10]), tuple(nums[10:13]), nums[13],
                             nums[14] if len(nums) == 15 else None)


def parse_kitti_labels(text: str, strict: bool = True) -> list[KittiObjectRecord]:
    """Parse KITTI object label text, one record per non-empty line.

    Lines starting with ``#`` are comments.

    In lenient mode malformed lines are logged and skipped.
    """
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            records.append(_parse_line(line, line_no))
        except LabelParseError as exc:
            if strict:
                raise
            log.warning("skipping label %s", exc)
    return records


def split_records(records: Iterable[KittiObjectRecord], target_class: str = "Car"
                  ) -> tuple[list[KittiObjectRecord], list[tuple[float, float, float, float]]]:
    """Separate training objects of ``target_class`` from DontCare rectangles.

    Records of other types are dropped.
    """
    objects, dont_care = [], []
    for r in records:
        if r.type == "DontCare":
            dont_care.append(r.corners)
        elif r.type == target_class:
            objects.append(r)
    return objects, dont_care


def format_kitti_labels(records: Sequence[KittiObjectRecord]) -> str:
    return "".join(r.to_line() + "\n" for r in records)


# ---------------------------------------------------------------------------
# Netpbm
# ---------------------------------------------------------------------------

def _read_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedImageError("header ended early")
        tokens.append(buf[start:pos])
        if len(tokens) == 1 and tokens[0] not in (b"P5", b"P6"):
            raise BadMagicError(f"unsupported magic {tokens[0][:8]!r}; expected P5 or P6")
    if pos >= len(buf):
        raise TruncatedImageError("no pixel data after header")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DimensionError(f"non-numeric header fields {tokens[1:]}") from None
    if not (0 < width <= MAX_DIM and 0 < height <= MAX_DIM):
        raise DimensionError(f"image dimensions {width}x{height} out of range (1..{MAX_DIM})")
    if maxval != 255:
        raise DimensionError(f"only maxval 255 is supported, got {maxval}")
    return tokens[0], width, height, maxval, pos + 1


def read_netpbm(path) -> np.ndarray:
    """Read a binary P5/P6 file as uint8, ``(H, W)`` or ``(H, W, 3)``."""
    buf = Path(path).read_bytes()
    magic, width, height, _, offset = _read_header(buf)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    data = buf[offset:offset + need]
    if len(data) < need:
        raise TruncatedImageError(f"{path}: payload has {len(data)} bytes, expected {need}")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape(height, width, 3) if channels == 3 else arr.reshape(height, width)


def write_netpbm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    elif pixels.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) pixels, got {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """RGB PPM as float ``(H, W, 3)`` in [0, 1]."""
    px = read_netpbm(path)
    if px.ndim != 3:
        raise BadMagicError(f"{path}: expected an RGB (P6) image")
    return px.astype(np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    write_netpbm(path, to_uint8(image))


def read_mask(path) -> np.ndarray:
    """PGM mask as a 0/1 class map (pixels >= 128 are road)."""
    px = read_netpbm(path)
    if px.ndim != 2:
        raise BadMagicError(f"{path}: expected a greyscale (P5) mask")
    return (px >= 128).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    write_netpbm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def confidence_overlay(image: np.ndarray, probability: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a red (road) / blue (background) confidence map over ``image``."""
    p = np.clip(probability, 0.0, 1.0)[..., None]
    colour = p * np.array([1.0, 0.0, 0.0]) + (1.0 - p) * np.array([0.0, 0.0, 1.0])
    return (1.0 - alpha) * np.asarray(image, dtype=np.float64) + alpha * colour


def draw_boxes(image: np.ndarray, boxes: Iterable[BoundingBox], colour=(0.0, 1.0, 0.0),
               thickness: int = 1) -> np.ndarray:
    """Return a copy of ``image`` with rectangle outlines drawn (green by default)."""
    out = np.array(image, dtype=np.float64, copy=True)
    h, w = out.shape[:2]
    for b in boxes:
        x1, y1, x2, y2 = (int(round(v)) for v in b.corners)
        x1, x2 = max(x1, 0), min(x2, w - 1)
        y1, y2 = max(y1, 0), min(y2, h - 1)
        if x2 < x1 or y2 < y1:
            continue
        t = thickness
        out[y1:min(y1 + t, y2 + 1), x1:x2 + 1] = colour
        out[max(y2 - t + 1, y1):y2 + 1, x1:x2 + 1] = colour
        out[y1:y2 + 1, x1:min(x1 + t, x2 + 1)] = colour
        out[y1:y2 + 1, max(x2 - t + 1, x1):x2 + 1] = colour
    return out


def write_overlay(path, image: np.ndarray, boxes: Iterable[BoundingBox] = (),
                  probability: np.ndarray | None = None) -> None:
    out = np.asarray(image, dtype=np.float64)
    if probability is not None:
        out = confidence_overlay(out, probability)
    out = draw_boxes(out, boxes)
    write_image(path, out)


# ---------------------------------------------------------------------------
# samples and synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray                       # (H, W, 3) float in [0, 1]
    seg_mask: np.ndarray                    # (H, W) uint8 class map
    boxes: list[BoundingBox] = field(default_factory=list)
    dont_care: list[tuple[float, float, float, float]] = field(default_factory=list)
    scene_class: int = 0
    id: str = ""
    records: list[KittiObjectRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.seg_mask.shape != self.image.shape[:2]:
            raise DataError(f"mask {self.seg_mask.shape} does not match image {self.image.shape}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class SyntheticConfig:
    width: int = 256
    height: int = 128
    max_vehicles: int = 4
    min_vehicle: int = 12
    max_vehicle: int = 48
    dont_care_prob: float = 0.3

    def __post_init__(self):
        check_input_dims(self.height, self.width)


def _road_geometry(rng: np.random.Generator, cfg: SyntheticConfig):
    w, h = cfg.width, cfg.height
    horizon = h / 2.0 + rng.uniform(0.0, h / 8.0)
    top_w = rng.uniform(0.2, 0.8) * w
    top_c = w / 2.0 + rng.uniform(-0.15, 0.15) * w
    bottom_w = rng.uniform(max(top_w, 0.7 * w), 1.3 * w)
    bottom_c = w / 2.0 + rng.uniform(-0.1, 0.1) * w
    return horizon, top_c, top_w, bottom_c, bottom_w


def _road_bounds(y, horizon, top_c, top_w, bottom_c, bottom_w, h):
    """Left/right road edge at row coordinate ``y`` (valid for ``y >= horizon``)."""
    t = (y - horizon) / (h - horizon)
    centre = top_c + t * (bottom_c - top_c)
    half = 0.5 * (top_w + t * (bottom_w - top_w))
    return centre - half, centre + half


def _in_road(x, y, geom, h) -> bool:
    horizon = geom[0]
    if y < horizon or y > h:
        return False
    left, right = _road_bounds(y, *geom, h)
    return left <= x <= right


def make_synthetic(index: int, seed: int, cfg: SyntheticConfig | None = None) -> Sample:
    """One synthetic street scene, fully determined by ``(seed, index)``.

    The road is a trapezoid below a horizon in the lower half of the image;
    vehicles are solid rectangles lying entirely on the road.  The scene
    class is 1 when the far edge of the road spans at least half the image.
    """
    cfg = cfg or SyntheticConfig()
    rng = make_rng(seed, "synthetic", index)
    w, h = cfg.width, cfg.height
    geom = _road_geometry(rng, cfg)
    horizon, top_c, top_w = geom[0], geom[1], geom[2]

    # textured background: sky above the horizon, ground below
    yy, xx = np.mgrid[0:h, 0:w]
    sky = np.array([0.55, 0.7, 0.9]) + rng.uniform(-0.1, 0.1, 3)
    ground = np.array([0.35, 0.55, 0.25]) + rng.uniform(-0.08, 0.08, 3)
    image = np.where((yy < horizon)[..., None], sky, ground)
    image = image + rng.normal(0.0, 0.04, size=(h, w, 3))

    pc = yy + 0.5
    left, right = _road_bounds(pc, *geom, h)
    road = (pc >= horizon) & (xx + 0.5 >= left) & (xx + 0.5 <= right)
    asphalt = np.array([0.3, 0.3, 0.32]) + rng.uniform(-0.05, 0.05)
    image[road] = asphalt + rng.normal(0.0, 0.03, size=(int(road.sum()), 3))

    boxes: list[BoundingBox] = []
    n_vehicles = int(rng.integers(0, cfg.max_vehicles + 1))
    for _ in range(n_vehicles):
        for _attempt in range(50):
            bw = float(rng.integers(cfg.min_vehicle, cfg.max_vehicle + 1))
            bh = float(rng.integers(cfg.min_vehicle, cfg.max_vehicle + 1))
            x1 = float(rng.integers(0, w - int(bw) + 1))
            y1 = float(rng.integers(int(np.ceil(horizon)), h - int(bh) + 1)) if h - bh >= horizon else None
            if y1 is None:
                break
            corners = [(x1, y1), (x1 + bw, y1), (x1, y1 + bh), (x1 + bw, y1 + bh)]
            if not all(_in_road(cx, cy, geom, h) for cx, cy in corners):
                continue
            cand = BoundingBox.from_corners(x1, y1, x1 + bw, y1 + bh)
            if any(_overlaps(cand, b) for b in boxes):
                continue
            boxes.append(cand)
            colour = rng.uniform(0.05, 1.0, 3)
            colour[rng.integers(0, 3)] = rng.uniform(0.7, 1.0)
            image[int(y1):int(y1 + bh), int(x1):int(x1 + bw)] = colour
            break

    dont_care = []
    if rng.random() < cfg.dont_care_prob:
        dc_w = float(rng.integers(16, 48))
        side_left = rng.random() < 0.5
        x1 = 0.0 if side_left else w - dc_w
        dont_care.append((x1, 0.0, x1 + dc_w, float(int(horizon) // 2)))

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    records = [KittiObjectRecord.from_box(b) for b in boxes]
    records += [KittiObjectRecord("DontCare", -1.0, -1, -10.0, *dc) for dc in dont_care]
    return Sample(image=image, seg_mask=road.astype(np.uint8), boxes=boxes, dont_care=dont_care,
                  scene_class=int(top_w >= w / 2.0), id=f"{seed:06d}_{index:06d}", records=records)


def _overlaps(a: BoundingBox, b: BoundingBox) -> bool:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    return ax1 < bx2 and bx1 < ax2 and ay1 < by2 and by1 < ay2


def generate_synthetic(count: int, seed: int, config: SyntheticConfig | None = None,
                       start: int = 0) -> list[Sample]:
    return [make_synthetic(start + i, seed, config) for i in range(count)]


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def write_dataset(root, samples: Sequence[Sample], train_fraction: float = 0.8) -> None:
    root = Path(root)
    for sub in ("images", "masks", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "images" / f"{s.id}.ppm", s.image)
        write_mask(root / "masks" / f"{s.id}.pgm", s.seg_mask)
        (root / "labels" / f"{s.id}.txt").write_text(format_kitti_labels(s.records))
    (root / "scenes.txt").write_text("".join(f"{s.id} {s.scene_class}\n" for s in samples))
    n_train = int(round(train_fraction * len(samples)))
    (root / "train.txt").write_text("".join(f"{s.id}\n" for s in samples[:n_train]))
    (root / "val.txt").write_text("".join(f"{s.id}\n" for s in samples[n_train:]))


def read_split(root, split: str) -> list[str]:
    path = Path(root) / f"{split}.txt"
    if not path.exists():
        raise DataError(f"split file {path} not found")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def read_scenes(root) -> dict[str, int]:
    scenes = {}
    for line_no, line in enumerate((Path(root) / "scenes.txt").read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise LabelParseError(line_no, "scenes.txt lines must be '<id> <class>'")
        scenes[parts[0]] = int(parts[1])
    return scenes


def load_sample(root, sample_id: str, scenes: dict[str, int] | None = None,
                target_class: str = "Car", strict: bool = True) -> Sample:
    root = Path(root)
    image = read_image(root / "images" / f"{sample_id}.ppm")
    mask_path = root / "masks" / f"{sample_id}.pgm"
    mask = read_mask(mask_path) if mask_path.exists() else np.zeros(image.shape[:2], np.uint8)
    label_path = root / "labels" / f"{sample_id}.txt"
    records = parse_kitti_labels(label_path.read_text(), strict=strict) if label_path.exists() else []
    objects, dont_care = split_records(records, target_class)
    boxes = [r.to_box() for r in objects if r.right > r.left and r.bottom > r.top]
    scenes = read_scenes(root) if scenes is None else scenes
    return Sample(image=image, seg_mask=mask, boxes=boxes, dont_care=dont_care,
                  scene_class=scenes.get(sample_id, 0), id=sample_id, records=records)


def load_dataset(root, split: str, **kw) -> list[Sample]:
    ids = read_split(root, split)
    scenes = read_scenes(root)
    return [load_sample(root, i, scenes, **kw) for i in ids]


def ensure_empty_dir(path, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} exists and is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def worker_count(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("MULTINET_THREADS", default)))
    except ValueError:
        return default
