"""FCN-style segmentation decoder.

A 1x1 score conv on the stride-32 features is upsampled x2, x2 and x8 by
transposed convolutions.  After each of the first two upsamplings a 1x1
projection of the stride-16 (then stride-8) encoder features is added.

Each upsampling layer replicates the border of its input by one pixel before
the transposed conv and crops afterwards, so a bilinear-initialised layer is
an exact bilinear resize including the image border.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import ops
from .encoder import EncoderConfig, FeaturePyramid, he_normal
from .ops import ShapeError
from .rng import make_rng
from .tensor import Tensor

UPSAMPLE_FACTORS = (2, 2, 8)
SKIP_INIT_STD = 1e-4


@dataclass
class SegOutput:
    logits: Tensor
    scores32: Tensor

    @property
    def probability(self) -> np.ndarray:
        return ops.softmax(self.logits.data, axis=1)

    def hard_mask(self, threshold: float = 0.5) -> np.ndarray:
        """Road mask from thresholding the class-1 probability."""
        return (self.probability[:, 1] >= threshold).astype(np.uint8)


def bilinear_weight(channels: int, factor: int, dtype=np.float32) -> np.ndarray:
    """Channel-diagonal ``(C, C, 2f, 2f)`` kernel performing bilinear upsampling."""
    k = ops.bilinear_kernel(2 * factor)
    w = np.zeros((channels, channels, 2 * factor, 2 * factor), dtype=dtype)
    for c in range(channels):
        w[c, c] = np.outer(k, k)
    return w


def upsample(x: Tensor, weight: Tensor, factor: int) -> Tensor:
    return ops.transposed_conv2d(ops.edge_pad(x, 1), weight, stride=factor, padding=factor + factor // 2)


def seg_init(enc: EncoderConfig, seed: int, num_classes: int = 2, dtype=np.float32) -> dict[str, np.ndarray]:
    k = num_classes
    p = {
        "seg.score.weight": he_normal(make_rng(seed, "seg.score"), (k, enc.out_channels, 1, 1), dtype),
        "seg.score.bias": np.zeros(k, dtype=dtype),
        "seg.skip16.weight": (make_rng(seed, "seg.skip16").standard_normal((k, enc.f16_channels, 1, 1))
                              * SKIP_INIT_STD).astype(dtype),
        "seg.skip16.bias": np.zeros(k, dtype=dtype),
        "seg.skip8.weight": (make_rng(seed, "seg.skip8").standard_normal((k, enc.f8_channels, 1, 1))
                             * SKIP_INIT_STD).astype(dtype),
        "seg.skip8.bias": np.zeros(k, dtype=dtype),
    }
    for name, f in zip(("seg.up1.weight", "seg.up2.weight", "seg.up3.weight"), UPSAMPLE_FACTORS):
        p[name] = bilinear_weight(k, f, dtype)
    return p


def seg_forward(params: Mapping[str, Tensor], pyramid: FeaturePyramid) -> SegOutput:
    f8, f16, f32 = pyramid.f8, pyramid.f16, pyramid.f32
    for tap, key in ((f32, "seg.score.weight"), (f16, "seg.skip16.weight"), (f8, "seg.skip8.weight")):
        if tap.shape[1] != params[key].shape[1]:
            raise ShapeError(f"feature pyramid does not match decoder: {key} expects "
                             f"{params[key].shape[1]} channels, tap has shape {tap.shape}")
    rows, cols = pyramid.grid
    if f16.shape[2:] != (2 * rows, 2 * cols) or f8.shape[2:] != (4 * rows, 4 * cols):
        raise ShapeError(f"pyramid strides inconsistent: f8 {f8.shape}, f16 {f16.shape}, f32 {f32.shape}")
    score = ops.conv2d(f32, params["seg.score.weight"], params["seg.score.bias"])
    x = upsample(score, params["seg.up1.weight"], UPSAMPLE_FACTORS[0])
    x = ops.add(x, ops.conv2d(f16, params["seg.skip16.weight"], params["seg.skip16.bias"]))
    x = upsample(x, params["seg.up2.weight"], UPSAMPLE_FACTORS[1])
    x = ops.add(x, ops.conv2d(f8, params["seg.skip8.weight"], params["seg.skip8.bias"]))
    logits = upsample(x, params["seg.up3.weight"], UPSAMPLE_FACTORS[2])
    return SegOutput(logits=logits, scores32=score)


def seg_loss(output: SegOutput, mask, ignore_mask=None) -> Tensor:
    """Mean per-pixel softmax cross entropy against an ``(N, H, W)`` class map."""
    mask = np.asarray(mask)
    if mask.shape != output.logits.shape[:1] + output.logits.shape[2:]:
        raise ShapeError(f"mask shape {mask.shape} does not match segmentation logits {output.logits.shape}")
    k = output.logits.shape[1]
    if mask.size and mask.max() >= k:
        raise ValueError(f"mask holds class index {int(mask.max())} but decoder has {k} classes")
    return ops.softmax_cross_entropy(output.logits, mask.astype(np.int64), ignore_mask)
