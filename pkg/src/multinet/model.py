"""The joint network: one encoder, three decoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .cls_decoder import ClsOutput, cls_forward_bottleneck, cls_init
from .det_decoder import DetOutput, GridGeometry, det_forward, det_init
from .encoder import EncoderConfig, FeaturePyramid, encode, init_weights
from .ops import ShapeError
from .seg_decoder import SegOutput, seg_forward, seg_init
from .tensor import Tensor

TASKS = ("seg", "det", "cls")


@dataclass(frozen=True)
class NetworkConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seg_classes: int = 2
    scene_classes: int = 2
    det_bottleneck: int = 500
    roi_size: int = 3
    dtype: str = "float32"

    @property
    def grid(self) -> GridGeometry:
        return GridGeometry(*self.encoder.grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["stage_channels"] = list(self.encoder.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        return cls(encoder=enc, **d)


def init_params(config: NetworkConfig, seed: int) -> dict[str, np.ndarray]:
    dtype = np.dtype(config.dtype)
    enc = config.encoder
    params = init_weights(enc, seed, dtype)
    params.update(seg_init(enc, seed, config.seg_classes, dtype))
    params.update(det_init(enc, seed, config.det_bottleneck, config.roi_size, dtype))
    params.update(cls_init(enc, seed, config.scene_classes, dtype))
    return params


class MultiNet:
    """Parameters plus forward passes for any subset of the three tasks.

    ``encode_calls`` counts encoder executions, so tests can confirm that a
    joint forward pass shares a single encoding between decoders.
    """

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0,
                 params: Mapping[str, np.ndarray] | None = None):
        self.config = config or NetworkConfig()
        arrays = init_params(self.config, seed) if params is None else params
        self.params: dict[str, Tensor] = {k: Tensor(np.array(v), requires_grad=True, name=k)
                                          for k, v in arrays.items()}
        self.encode_calls = 0

    # -- parameters -------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(arrays))
        if missing:
            raise KeyError(f"missing parameter tensors: {', '.join(missing)}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ShapeError(f"parameter {k}: stored shape {a.shape} != model shape {p.shape}")
            p.data = a.astype(p.dtype, copy=True)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def names(self, prefix: str) -> list[str]:
        return sorted(k for k in self.params if k.startswith(prefix + "."))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ----------------------------------------------------------
    def encode(self, images) -> FeaturePyramid:
        self.encode_calls += 1
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.config.dtype))
        return encode(self.params, x, self.config.encoder)

    def decode(self, task: str, pyramid: FeaturePyramid, training: bool = False,
               rng: np.random.Generator | None = None, dropout_p: float = 0.5,
               stats: dict | None = None) -> SegOutput | DetOutput | ClsOutput:
        if task == "seg":
            return seg_forward(self.params, pyramid)
        if task == "det":
            return det_forward(self.params, pyramid, self.config.roi_size, training=training, rng=rng,
                               dropout_p=dropout_p, stats=stats)
        if task == "cls":
            return cls_forward_bottleneck(self.params, pyramid, training=training, rng=rng, dropout_p=dropout_p)
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")

    def forward(self, images, tasks: Iterable[str] = TASKS, training: bool = False,
                rngs: Mapping[str, np.random.Generator] | None = None, dropout_p: float = 0.5,
                stats: dict | None = None) -> dict:
        """One encoder pass feeding every requested decoder."""
        tasks = list(tasks)
        pyramid = self.encode(images)
        rngs = rngs or {}
        return {t: self.decode(t, pyramid, training, rngs.get(t), dropout_p, stats) for t in tasks}
