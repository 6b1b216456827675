"""``multinet`` command line: synth, train, infer, eval, bench.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data_io import (
    DataError,
    ImageFormatError,
    KittiObjectRecord,
    SyntheticConfig,
    ensure_empty_dir,
    format_kitti_labels,
    load_dataset,
    make_synthetic,
    read_image,
    worker_count,
    write_dataset,
    write_overlay,
)
from .det_decoder import GridGeometry, decode_cells, nms
from .encoder import EncoderConfig, check_input_dims
from .evaluation import evaluate
from .metrics import format_report
from .model import TASKS, MultiNet, NetworkConfig
from .training import (
    Adam,
    Checkpoint,
    CheckpointError,
    NonFiniteLossError,
    TrainConfig,
    apply_overrides,
    joint_step,
    load_checkpoint,
    parse_config_text,
    save_checkpoint,
    task_batches,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("multinet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _task_list(text: str) -> tuple[str, ...]:
    tasks = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in tasks if t not in TASKS]
    if bad or not tasks:
        raise argparse.ArgumentTypeError(f"tasks must be a comma list drawn from {','.join(TASKS)}")
    return tasks


def load_model(path) -> tuple[MultiNet, Checkpoint]:
    ckpt = load_checkpoint(path)
    if "network" not in ckpt.config:
        raise CheckpointError(f"{path}: checkpoint has no network configuration")
    model = MultiNet(NetworkConfig.from_dict(ckpt.config["network"]), seed=0)
    ckpt.restore(model)
    return model, ckpt


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        cfg = SyntheticConfig(width=args.width, height=args.height)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    root = ensure_empty_dir(args.out, args.force)
    with ThreadPoolExecutor(worker_count()) as pool:
        samples = list(pool.map(lambda i: make_synthetic(i, args.seed, cfg), range(args.count)))
    write_dataset(root, samples)
    print(f"wrote {len(samples)} samples to {root}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_configs(args, image_hw) -> tuple[TrainConfig, NetworkConfig]:
    h, w = image_hw
    net = NetworkConfig(encoder=EncoderConfig(input_h=h, input_w=w))
    train_cfg = TrainConfig()
    if args.config:
        try:
            values = parse_config_text(Path(args.config).read_text())
            train_cfg, net = apply_overrides(train_cfg, net, values)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"config {args.config}: {exc}") from None
    # command-line flags win over the config file
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    train_cfg = replace(train_cfg, **overrides)
    if (net.encoder.input_h, net.encoder.input_w) != (h, w):
        raise UsageError(f"config input size {net.encoder.input_w}x{net.encoder.input_h} does not match "
                         f"training images {w}x{h}")
    return train_cfg, net


def cmd_train(args) -> int:
    samples = load_dataset(args.data, args.split)
    if not samples:
        raise DataError(f"split {args.split!r} in {args.data} is empty")
    train_cfg, net = _train_configs(args, (samples[0].height, samples[0].width))
    if train_cfg.max_steps < 0:
        raise UsageError("--steps must be >= 0")
    model = MultiNet(net, seed=train_cfg.seed)
    opt = Adam.from_config(model.params, train_cfg)
    datasets = {t: samples for t in train_cfg.tasks}
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    dtype = np.dtype(net.dtype)
    step = 0
    with open(log_path, "w") as fh:
        try:
            for step in range(train_cfg.max_steps):
                report = joint_step(model, opt, task_batches(datasets, train_cfg, step, dtype), train_cfg, step)
                fh.write(report.format(with_timing=args.timing) + "\n")
                fh.flush()
                if args.checkpoint_every and report.step % args.checkpoint_every == 0:
                    save_checkpoint(args.out, Checkpoint.capture(model, opt, report.step, train_cfg))
            step = train_cfg.max_steps
        except NonFiniteLossError as exc:
            # the failed step changed nothing, so the current state is the last good one
            save_checkpoint(args.out, Checkpoint.capture(model, opt, step, train_cfg))
            print(f"error: {exc}; kept checkpoint at step {step} in {args.out}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(args.out, Checkpoint.capture(model, opt, step, train_cfg))
    print(f"trained {step} steps; checkpoint {args.out}; log {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def cmd_infer(args) -> int:
    model, _ = load_model(args.ckpt)
    image = read_image(args.image)
    h, w = image.shape[:2]
    try:
        check_input_dims(h, w)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    enc = model.config.encoder
    if "cls" in args.tasks and (h, w) != (enc.input_h, enc.input_w):
        raise DataError(f"classification head was trained for {enc.input_w}x{enc.input_h} input, "
                        f"image is {w}x{h}")
    model.encode_calls = 0
    out = model.forward(image.transpose(2, 0, 1)[None].astype(model.config.dtype), args.tasks)
    prefix = str(args.out_prefix)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    written = []
    if "seg" in out:
        write_overlay(prefix + "_seg.ppm", image, probability=out["seg"].probability[0, 1])
        written.append(prefix + "_seg.ppm")
    lines = []
    if "cls" in out:
        prob = out["cls"].probability[0]
        lines.append(f"# scene_class {int(prob.argmax())} {prob.max():.6f}")
    if "det" in out:
        rows, cols = out["det"].refined.shape[2:]
        grid = GridGeometry(rows, cols)
        boxes = decode_cells(out["det"].refined.data[0].astype(np.float64), grid, args.threshold)
        if not args.no_nms:
            boxes = nms(boxes, args.nms_iou)
        write_overlay(prefix + "_det.ppm", image, boxes)
        written.append(prefix + "_det.ppm")
        lines.append(format_kitti_labels([KittiObjectRecord.from_box(b, with_score=True) for b in boxes]).rstrip("\n"))
    if "det" in out or "cls" in out:
        Path(prefix + "_result.txt").write_text("\n".join(l for l in lines if l) + "\n")
        written.append(prefix + "_result.txt")
    print(f"encoder_calls = {model.encode_calls}")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model, _ = load_model(args.ckpt)
    samples = load_dataset(args.data, args.split)
    if not samples:
        raise DataError(f"split {args.split!r} in {args.data} is empty")
    tasks = TASKS if args.task == "all" else (args.task,)
    sections = evaluate(model, samples, tasks, conf_threshold=args.threshold)
    text = format_report(sections)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    name: str
    ms: float

    @property
    def fps(self) -> float:
        return 1000.0 / self.ms if self.ms > 0 else float("inf")


@dataclass
class BenchReport:
    rows: list[BenchRow]
    iters: int
    warmup: int
    width: int
    height: int

    def row(self, name: str) -> BenchRow:
        return next(r for r in self.rows if r.name == name)

    def format(self) -> str:
        lines = [f"# input {self.width}x{self.height}, {self.iters} timed iterations after {self.warmup} warm-up",
                 f"{'config':<8} {'speed [msec]':>12} {'speed [fps]':>12}"]
        lines += [f"{r.name:<8} {r.ms:>12.2f} {r.fps:>12.2f}" for r in self.rows]
        return "\n".join(lines) + "\n"


def benchmark(model: MultiNet, width: int, height: int, iters: int, warmup: int,
              tasks=TASKS, seed: int = 0) -> BenchReport:
    """Mean wall time of single-task forward passes and of one joint pass."""
    if iters < 1 or warmup < 0:
        raise UsageError("--iters must be >= 1 and --warmup >= 0")
    check_input_dims(height, width)
    image = np.random.default_rng(seed).random((1, 3, height, width)).astype(model.config.dtype)
    configs = [(t, (t,)) for t in tasks] + [("joint", tuple(tasks))]
    rows = []
    for name, subset in configs:
        for _ in range(warmup):
            model.forward(image, subset)
        start = time.perf_counter()
        for _ in range(iters):
            model.forward(image, subset)
        rows.append(BenchRow(name, (time.perf_counter() - start) * 1000.0 / iters))
    return BenchReport(rows, iters, warmup, width, height)


def cmd_bench(args) -> int:
    if args.ckpt:
        model, _ = load_model(args.ckpt)
    else:
        model = MultiNet(NetworkConfig(encoder=EncoderConfig(input_h=args.height, input_w=args.width)),
                         seed=args.seed)
    enc = model.config.encoder
    tasks = args.tasks
    if "cls" in tasks and (args.height, args.width) != (enc.input_h, enc.input_w):
        raise UsageError(f"classification head needs {enc.input_w}x{enc.input_h} input")
    try:
        report = benchmark(model, args.width, args.height, args.iters, args.warmup, tasks, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(report.format())
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multinet", description="Joint road segmentation, vehicle detection and scene classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic street-scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="joint training from a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--config", help="file of 'key = value' lines ('#' starts a comment)")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="loss log path (default: <out>.log)")
    t.add_argument("--timing", action="store_true", help="add wall_ms to each log record")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run one image through the network")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out-prefix", required=True)
    i.add_argument("--tasks", type=_task_list, default=TASKS)
    i.add_argument("--no-nms", action="store_true")
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--nms-iou", type=float, default=0.5)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--task", choices=("all",) + TASKS, default="all")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time per-task and joint inference")
    b.add_argument("--ckpt")
    b.add_argument("--width", type=int, default=256)
    b.add_argument("--height", type=int, default=128)
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--tasks", type=_task_list, default=TASKS)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ImageFormatError, CheckpointError, FileNotFoundError, FileExistsError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"data error: {msg}", file=sys.stderr)
        return EXIT_DATA
