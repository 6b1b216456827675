"""Differentiable operations on :class:`~multinet.tensor.Tensor`.

Feature maps are laid out ``(N, C, H, W)``.  Every op returns a new tensor
and, when any input requires gradients, records a closure computing the
vector-Jacobian product.  Convolutions are im2col based (numpy strided
windows plus ``tensordot``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_node


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class AllIgnoredWarning(RuntimeWarning):
    """A masked loss had no contributing positions; it was defined as 0."""


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        for field in ("kernel_h", "kernel_w", "stride", "in_channels", "out_channels"):
            if getattr(self, field) <= 0:
                raise ValueError(f"ConvSpec.{field} must be positive, got {getattr(self, field)}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return ((h + 2 * self.padding - self.kernel_h) // self.stride + 1,
                (w + 2 * self.padding - self.kernel_w) // self.stride + 1)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``weight`` is ``(C_out, C_in, kh, kw)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got input {x.shape} and weight {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    spec = ConvSpec(kh, kw, stride, padding, c_in, c_out)
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel does not fit: input {x.shape} (padding {padding}) vs weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    ho, wo = spec.output_hw(h, w)
    wd = weight.data

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        w2 = wd[:, :, 0, 0]
        out = np.einsum("oc,nchw->nohw", w2, x.data, optimize=True)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def backward(g):
            gx = np.einsum("oc,nohw->nchw", w2, g, optimize=True) if x.requires_grad else None
            gw = np.einsum("nohw,nchw->oc", g, x.data, optimize=True)[:, :, None, None] if weight.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
            return gx, gw, gb

        parents = [x, weight] + ([bias] if bias is not None else [])
        return make_node(out, parents, backward)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, Ho, Wo, kh, kw) x (Cout, C, kh, kw) -> (N, Ho, Wo, Cout)
    out = np.tensordot(windows, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            # (Cout, C, kh, kw) x (N, Cout, Ho, Wo) -> (C, kh, kw, N, Ho, Wo)
            cols = np.tensordot(wd, g, axes=([0], [1]))
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = [x, weight] + ([bias] if bias is not None else [])
    return make_node(out, parents, backward)


def transposed_conv2d(x: Tensor, weight: Tensor, stride: int, padding: int | None = None,
                      bias: Tensor | None = None) -> Tensor:
    """Transposed convolution (the adjoint of a strided conv).

    ``weight`` is ``(C_in, C_out, k, k)``.  Output side is
    ``(H - 1) * stride - 2 * padding + k``; with the default geometry
    ``k = 2 * stride`` and ``padding = stride // 2`` that is ``H * stride``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride <= 0:
        raise ValueError(f"transposed_conv2d stride must be positive, got {stride}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_in, c_out, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"transposed_conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if kh < stride or kw < stride:
        raise ValueError(f"transposed_conv2d kernel {kh}x{kw} smaller than stride {stride}")
    if padding is None:
        padding = stride // 2
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hf - 2 * padding <= 0 or wf - 2 * padding <= 0:
        raise ShapeError(f"transposed_conv2d padding {padding} removes the whole output of input {x.shape}")
    wd = weight.data

    # (N, C, H, W) x (C, Cout, kh, kw) -> (N, H, W, Cout, kh, kw)
    contrib = np.tensordot(x.data, wd, axes=([1], [0]))
    full = np.zeros((n, c_out, hf, wf), dtype=np.result_type(x.dtype, wd.dtype))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += contrib[..., i, j].transpose(0, 3, 1, 2)
    out = full[:, :, padding:hf - padding, padding:wf - padding]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((n, c_out, hf, wf), dtype=g.dtype)
        gfull[:, :, padding:hf - padding, padding:wf - padding] = g
        win = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :w]
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = [x, weight] + ([bias] if bias is not None else [])
    return make_node(out, parents, backward)


def bilinear_kernel(size: int) -> np.ndarray:
    """1-D bilinear upsampling filter of length ``size`` (FCN convention)."""
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size, dtype=np.float64)
    return 1.0 - np.abs(og - center) / factor


def edge_pad(x: Tensor, pad: int) -> Tensor:
    """Replicate-pad the two spatial axes by ``pad`` pixels."""
    x = as_tensor(x)
    if pad == 0:
        return x
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")

    def backward(g):
        g = g.copy()
        g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
        g[:, :, pad + h - 1, :] += g[:, :, pad + h:, :].sum(axis=2)
        g[:, :, :, pad] += g[:, :, :, :pad].sum(axis=3)
        g[:, :, :, pad + w - 1] += g[:, :, :, pad + w:].sum(axis=3)
        return (g[:, :, pad:pad + h, pad:pad + w],)

    return make_node(out, [x], backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def max_pool(x: Tensor, window: int, stride: int) -> Tensor:
    """Max pooling; backward routes to the first maximal element per window."""
    x = as_tensor(x)
    if window < 1 or stride < 1:
        raise ValueError(f"max_pool window and stride must be >= 1, got {window}, {stride}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"max_pool window {window} larger than input {x.shape}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        flat_idx = (np.arange(n * c).reshape(n, c, 1, 1) * h + rows) * w + cols
        gx = np.zeros(n * c * h * w, dtype=g.dtype)
        if window <= stride:
            gx[flat_idx.ravel()] += g.ravel()
        else:
            np.add.at(gx, flat_idx.ravel(), g.ravel())
        return (gx.reshape(n, c, h, w),)

    return make_node(np.ascontiguousarray(out), [x], backward)


def roi_align(features: Tensor, boxes: Tensor, output_size: int = 3, min_size: float = 1.0,
              stats: dict | None = None) -> Tensor:
    """Bilinear RoI pooling with one sample at each bin centre.

    ``features`` is ``(N, C, H, W)``; ``boxes`` is ``(N, K, 4)`` holding
    ``(x1, y1, x2, y2)`` in feature-map pixel units, where feature pixel
    ``(i, j)`` covers ``[j, j+1) x [i, i+1)``.  Returns ``(N, K, C, R, R)``.

    Gradients flow to both the features and the box coordinates.  Samples
    outside the map are clamped to the border (zero coordinate gradient).
    Boxes thinner than ``min_size`` are widened to ``min_size`` about their
    centre and counted in ``stats["degenerate_rois"]``.
    """
    features, boxes = as_tensor(features), as_tensor(boxes)
    n, c, h, w = features.shape
    if boxes.ndim != 3 or boxes.shape[0] != n or boxes.shape[2] != 4:
        raise ShapeError(f"roi_align boxes must be (N, K, 4) with N={n}, got {boxes.shape}")
    r = int(output_size)
    b = boxes.data
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    bw, bh = x2 - x1, y2 - y1
    thin_x, thin_y = bw < min_size, bh < min_size
    degenerate = thin_x | thin_y
    if stats is not None and degenerate.any():
        stats["degenerate_rois"] = stats.get("degenerate_rois", 0) + int(degenerate.sum())
    sx1 = np.where(thin_x, 0.5 * (x1 + x2) - 0.5 * min_size, x1)
    sy1 = np.where(thin_y, 0.5 * (y1 + y2) - 0.5 * min_size, y1)
    sbw = np.where(thin_x, min_size, bw)
    sbh = np.where(thin_y, min_size, bh)

    frac = (np.arange(r) + 0.5) / r
    # sample coordinates in pixel-centre index space: (N, K, R)
    px = sx1[..., None] + frac * sbw[..., None] - 0.5
    py = sy1[..., None] + frac * sbh[..., None] - 0.5
    cx = np.clip(px, 0.0, w - 1)
    cy = np.clip(py, 0.0, h - 1)
    inside_x = (px >= 0.0) & (px <= w - 1)
    inside_y = (py >= 0.0) & (py <= h - 1)
    x0 = np.minimum(np.floor(cx).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(cy).astype(np.int64), max(h - 2, 0))
    xi1 = np.minimum(x0 + 1, w - 1)
    yi1 = np.minimum(y0 + 1, h - 1)
    lx = cx - x0
    ly = cy - y0

    fm = features.data.transpose(0, 2, 3, 1)  # (N, H, W, C)
    nidx = np.arange(n)[:, None, None, None]
    # gather corners over the R x R grid: rows from y, cols from x -> (N, K, R, R, C)
    Y0, X0 = y0[:, :, :, None], x0[:, :, None, :]
    Y1, X1 = yi1[:, :, :, None], xi1[:, :, None, :]
    f00 = fm[nidx, Y0, X0]
    f01 = fm[nidx, Y0, X1]
    f10 = fm[nidx, Y1, X0]
    f11 = fm[nidx, Y1, X1]
    LY, LX = ly[:, :, :, None, None], lx[:, :, None, :, None]
    top = f00 + LX * (f01 - f00)
    bot = f10 + LX * (f11 - f10)
    val = top + LY * (bot - top)
    out = np.ascontiguousarray(val.transpose(0, 1, 4, 2, 3))

    def backward(g):
        gv = g.transpose(0, 1, 3, 4, 2)  # (N, K, R, R, C)
        gf = gb = None
        if features.requires_grad:
            acc = np.zeros((n, h, w, c), dtype=g.dtype)
            nn = np.broadcast_to(nidx, gv.shape[:4])
            for yy, xx, wt in ((Y0, X0, (1 - LY) * (1 - LX)), (Y0, X1, (1 - LY) * LX),
                               (Y1, X0, LY * (1 - LX)), (Y1, X1, LY * LX)):
                yb = np.broadcast_to(yy, gv.shape[:4])
                xb = np.broadcast_to(xx, gv.shape[:4])
                np.add.at(acc, (nn, yb, xb), gv * wt)
            gf = acc.transpose(0, 3, 1, 2)
        if boxes.requires_grad:
            dvdx = (1 - LY) * (f01 - f00) + LY * (f11 - f10)
            dvdy = bot - top
            gx = (gv * dvdx).sum(axis=(2, 4)) * inside_x  # sum over rows and channels -> (N, K, R)
            gy = (gv * dvdy).sum(axis=(3, 4)) * inside_y
            # d px / d x1 = 1 - frac, d px / d x2 = frac ; widened boxes move with their centre only
            wx1 = np.where(thin_x[..., None], 0.5, 1.0 - frac)
            wx2 = np.where(thin_x[..., None], 0.5, frac)
            wy1 = np.where(thin_y[..., None], 0.5, 1.0 - frac)
            wy2 = np.where(thin_y[..., None], 0.5, frac)
            gb = np.stack([(gx * wx1).sum(-1), (gy * wy1).sum(-1),
                           (gx * wx2).sum(-1), (gy * wy2).sum(-1)], axis=-1)
        return gf, gb

    return make_node(out, [features, boxes], backward)


# ---------------------------------------------------------------------------
# elementwise and structural
# ---------------------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return make_node(a.data + b.data, [a, b], lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return make_node(a.data - b.data, [a, b], lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return make_node(a.data * b.data, [a, b], lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant (scalar or array broadcastable to ``x``)."""
    x = as_tensor(x)
    factor = np.asarray(factor, dtype=x.dtype)
    out = x.data * factor
    if out.shape != x.shape:
        raise ShapeError(f"scale factor {factor.shape} would broadcast {x.shape} to {out.shape}")
    return make_node(out, [x], lambda g: (g * factor,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x (N, D) + bias (D,)``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias expects (N, D) and (D,), got {x.shape} and {bias.shape}")
    return make_node(x.data + bias.data, [x, bias], lambda g: (g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(x.data * mask, [x], lambda g: (g * mask,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sign = np.sign(x.data)
    return make_node(np.abs(x.data), [x], lambda g: (g * sign,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)):
            raise ShapeError(f"concat shape mismatch along non-concat axes: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(out, tensors, backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_node(x.data * keep, [x], lambda g: (g * keep,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return make_node(x.data.reshape(shape), [x], lambda g: (g.reshape(orig),))


def flatten(x: Tensor) -> Tensor:
    """``(N, ...) -> (N, prod(...))``."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), [x], lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    """Basic slicing (no fancy indexing)."""
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return make_node(np.array(out), [x], backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return make_node(np.asarray(x.data.sum()), [x], lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    k = x.size
    return make_node(np.asarray(x.data.mean()), [x], lambda g: (np.full(x.shape, g / k, dtype=x.dtype),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias``; ``weight`` is ``(D_out, D_in)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T

    def backward(g):
        return (g @ weight.data if x.requires_grad else None,
                g.T @ x.data if weight.requires_grad else None)

    y = make_node(out, [x, weight], backward)
    return add_bias(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _flatten_classes(logits: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = logits.shape[1]
    moved = np.moveaxis(logits, 1, -1).reshape(-1, k)
    return moved, np.asarray(target).reshape(-1)


def cross_entropy_map(logits: Tensor, target) -> Tensor:
    """Unreduced cross entropy; class axis 1, result has ``target``'s shape."""
    logits = as_tensor(logits)
    target = np.asarray(target)
    k = logits.shape[1]
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"target indices must lie in [0, {k})")
    flat, t = _flatten_classes(logits.data, target)
    lsm = log_softmax(flat, axis=1)
    out = -lsm[np.arange(t.size), t].reshape(target.shape)

    def backward(g):
        grad = np.exp(lsm)
        grad[np.arange(t.size), t] -= 1.0
        grad *= g.reshape(-1, 1)
        shape = (logits.shape[0],) + logits.shape[2:] + (k,)
        return (np.moveaxis(grad.reshape(shape), -1, 1),)

    return make_node(out, [logits], backward)


def softmax_cross_entropy(logits: Tensor, target, ignore_mask=None) -> Tensor:
    """Mean cross entropy over non-ignored positions.

    ``logits`` is ``(N, K)`` or ``(N, K, H, W)``; ``target`` holds class
    indices with the logits' shape minus the class axis.  Positions where
    ``ignore_mask`` is true contribute nothing and are left out of the
    denominator.  If every position is ignored the loss is 0 and an
    :class:`AllIgnoredWarning` is emitted.
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    k = logits.shape[1]
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if ignore_mask is None:
        keep = np.ones(target.shape, dtype=bool)
    else:
        ignore_mask = np.asarray(ignore_mask, dtype=bool)
        if ignore_mask.shape != target.shape:
            raise ShapeError(f"ignore_mask shape {ignore_mask.shape} does not match target {target.shape}")
        keep = ~ignore_mask
    count = int(keep.sum())
    if count == 0:
        warnings.warn("all positions ignored; loss defined as 0", AllIgnoredWarning, stacklevel=2)
        return make_node(np.zeros((), dtype=logits.dtype), [logits],
                         lambda g: (np.zeros_like(logits.data),))
    tk = target[keep]
    if tk.min() < 0 or tk.max() >= k:
        raise ValueError(f"target indices must lie in [0, {k})")
    flat, t = _flatten_classes(logits.data, np.where(keep, target, 0))
    w = keep.reshape(-1)
    lsm = log_softmax(flat, axis=1)
    nll = -lsm[np.arange(t.size), t]
    loss = np.asarray((nll * w).sum() / count, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(lsm)
        grad[np.arange(t.size), t] -= 1.0
        grad *= (w * (g / count))[:, None]
        shape = (logits.shape[0],) + logits.shape[2:] + (k,)
        return (np.moveaxis(grad.reshape(shape), -1, 1).astype(logits.dtype, copy=False),)

    return make_node(loss, [logits], backward)
