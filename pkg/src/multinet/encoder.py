"""Shared stride-32 convolutional encoder.

Five stages of ``conv3x3 -> relu -> maxpool 2x2``; stage outputs after the
third, fourth and fifth pool give the stride-8, stride-16 and stride-32
feature maps.  With ``use_fc_as_conv`` two extra 1x1 conv layers follow the
last stage, the fully-connected-as-convolution tail that lets a classifier
backbone run on inputs of any size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import ops
from .rng import make_rng
from .tensor import Tensor

STRIDE = 32
NUM_STAGES = 5


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    input_h: int = 128
    input_w: int = 256
    use_fc_as_conv: bool = False
    fc_channels: int = 512

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_channels) != NUM_STAGES:
            raise ValueError(f"encoder needs exactly {NUM_STAGES} stages for stride {STRIDE}, "
                             f"got {len(self.stage_channels)}")
        if any(c <= 0 for c in self.stage_channels):
            raise ValueError(f"stage channels must be positive: {self.stage_channels}")
        check_input_dims(self.input_h, self.input_w)

    @property
    def grid(self) -> tuple[int, int]:
        """(rows, cols) of the stride-32 feature grid."""
        return self.input_h // STRIDE, self.input_w // STRIDE

    @property
    def out_channels(self) -> int:
        return self.fc_channels if self.use_fc_as_conv else self.stage_channels[-1]

    @property
    def f8_channels(self) -> int:
        return self.stage_channels[2]

    @property
    def f16_channels(self) -> int:
        return self.stage_channels[3]


@dataclass
class FeaturePyramid:
    f8: Tensor
    f16: Tensor
    f32: Tensor

    @property
    def grid(self) -> tuple[int, int]:
        return self.f32.shape[2], self.f32.shape[3]


def check_input_dims(h: int, w: int) -> None:
    if h <= 0 or w <= 0 or h % STRIDE or w % STRIDE:
        pad_h = (-h) % STRIDE
        pad_w = (-w) % STRIDE
        raise ValueError(f"input {w}x{h} (WxH) must be a positive multiple of {STRIDE} in both dims; "
                         f"pad by {pad_w} px in width and {pad_h} px in height")


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    """Zero-mean Gaussian with variance ``2 / fan_in`` (fan_in = prod(shape[1:]))."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_weights(config: EncoderConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    c_in = 3
    for i, c_out in enumerate(config.stage_channels, start=1):
        name = f"encoder.conv{i}"
        params[f"{name}.weight"] = he_normal(make_rng(seed, name), (c_out, c_in, 3, 3), dtype)
        params[f"{name}.bias"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    if config.use_fc_as_conv:
        for name in ("encoder.fc6", "encoder.fc7"):
            params[f"{name}.weight"] = he_normal(make_rng(seed, name), (config.fc_channels, c_in, 1, 1), dtype)
            params[f"{name}.bias"] = np.zeros(config.fc_channels, dtype=dtype)
            c_in = config.fc_channels
    return params


def encode(params: Mapping[str, Tensor], image: Tensor, config: EncoderConfig) -> FeaturePyramid:
    """Run the encoder on ``image`` of shape ``(N, 3, H, W)`` with values in [0, 1]."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"encoder expects (N, 3, H, W) images, got {image.shape}")
    check_input_dims(image.shape[2], image.shape[3])
    # centre pixels on zero
    x = ops.sub(image, Tensor(np.full(image.shape, 0.5, dtype=image.dtype)))
    taps = {}
    for i in range(1, NUM_STAGES + 1):
        x = ops.conv2d(x, params[f"encoder.conv{i}.weight"], params[f"encoder.conv{i}.bias"], padding=1)
        x = ops.max_pool(ops.relu(x), 2, 2)
        taps[2 ** i] = x
    f32 = taps[32]
    if config.use_fc_as_conv:
        for name in ("encoder.fc6", "encoder.fc7"):
            f32 = ops.relu(ops.conv2d(f32, params[f"{name}.weight"], params[f"{name}.bias"]))
    return FeaturePyramid(f8=taps[8], f16=taps[16], f32=f32)
