"""Scene classification heads.

``cls_forward_bottleneck`` keeps the full stride-32 grid: a 30-channel 1x1
conv squeezes every cell before a single affine layer over the flattened
grid.  ``cls_forward_vanilla`` is the baseline: one affine layer on the
flattened features of a small fixed-size input, whose parameter count grows
with the square of the input side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import ops
from .encoder import STRIDE, EncoderConfig, FeaturePyramid, he_normal
from .ops import ShapeError
from .rng import make_rng
from .tensor import Tensor

BOTTLENECK_CHANNELS = 30
VANILLA_INPUT = 64


@dataclass
class ClsOutput:
    logits: Tensor

    @property
    def probability(self) -> np.ndarray:
        return ops.softmax(self.logits.data, axis=1)

    def predicted(self) -> np.ndarray:
        return self.logits.data.argmax(axis=1)


def cls_init(enc: EncoderConfig, seed: int, num_classes: int = 2, dtype=np.float32) -> dict[str, np.ndarray]:
    rows, cols = enc.grid
    flat = BOTTLENECK_CHANNELS * rows * cols
    return {
        "cls.bottleneck.weight": he_normal(make_rng(seed, "cls.bottleneck"),
                                           (BOTTLENECK_CHANNELS, enc.out_channels, 1, 1), dtype),
        "cls.bottleneck.bias": np.zeros(BOTTLENECK_CHANNELS, dtype=dtype),
        "cls.fc.weight": he_normal(make_rng(seed, "cls.fc"), (num_classes, flat), dtype),
        "cls.fc.bias": np.zeros(num_classes, dtype=dtype),
    }


def cls_bottleneck(params: Mapping[str, Tensor], pyramid: FeaturePyramid) -> Tensor:
    return ops.relu(ops.conv2d(pyramid.f32, params["cls.bottleneck.weight"], params["cls.bottleneck.bias"]))


def cls_forward_bottleneck(params: Mapping[str, Tensor], pyramid: FeaturePyramid, training: bool = False,
                           rng: np.random.Generator | None = None, dropout_p: float = 0.5) -> ClsOutput:
    hidden = ops.dropout(cls_bottleneck(params, pyramid), dropout_p, rng, training=training)
    flat = ops.flatten(hidden)
    expected = params["cls.fc.weight"].shape[1]
    if flat.shape[1] != expected:
        raise ShapeError(f"classification affine layer expects {expected} inputs "
                         f"({BOTTLENECK_CHANNELS} x grid); got bottleneck {hidden.shape}")
    return ClsOutput(ops.linear(flat, params["cls.fc.weight"], params["cls.fc.bias"]))


def vanilla_param_count(channels: int, input_side: int, num_classes: int = 2) -> int:
    """Weights + biases of the vanilla head for a square ``input_side`` image."""
    cells = (input_side // STRIDE) ** 2
    return num_classes * channels * cells + num_classes


def vanilla_init(channels: int, seed: int, input_side: int = VANILLA_INPUT, num_classes: int = 2,
                 dtype=np.float32) -> dict[str, np.ndarray]:
    if input_side % STRIDE:
        raise ValueError(f"vanilla input side must be a multiple of {STRIDE}, got {input_side}")
    flat = channels * (input_side // STRIDE) ** 2
    return {
        "vanilla.fc.weight": he_normal(make_rng(seed, "vanilla.fc"), (num_classes, flat), dtype),
        "vanilla.fc.bias": np.zeros(num_classes, dtype=dtype),
    }


def cls_forward_vanilla(params: Mapping[str, Tensor], features: Tensor, input_side: int = VANILLA_INPUT) -> ClsOutput:
    """Affine softmax head on the flattened stride-32 features of an ``input_side`` square image."""
    side = input_side // STRIDE
    if features.ndim != 4 or features.shape[2:] != (side, side):
        raise ShapeError(f"vanilla head is configured for {input_side}x{input_side} input "
                         f"({side}x{side} features), got features {features.shape}")
    return ClsOutput(ops.linear(ops.flatten(features), params["vanilla.fc.weight"], params["vanilla.fc.bias"]))


def cls_loss(output: ClsOutput, label) -> Tensor:
    label = np.atleast_1d(np.asarray(label, dtype=np.int64))
    k = output.logits.shape[1]
    if label.min() < 0 or label.max() >= k:
        raise ValueError(f"class label out of range [0, {k}): {label.tolist()}")
    return ops.softmax_cross_entropy(output.logits, label)
