"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + eps
        fp = f()
        arr[i] = orig - eps
        fm = f()
        arr[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a| + |n|, tiny)`` with Euclidean norms over the whole array."""
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(num / max(den, 1e-30))


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                    eps: float = 1e-6, seed: int = 0) -> list[float]:
    """Compare backprop against finite differences for every input of ``fn``.

    ``fn`` maps tensors to a tensor of any shape; it is contracted with a
    fixed random projection so the check covers the full Jacobian rather
    than just the sum of outputs.  Returns one relative error per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = fn(*[Tensor(a) for a in arrays])
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar() -> float:
        return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward(proj.astype(out.dtype))
    errors = []
    for t, a in zip(tensors, arrays):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        errors.append(relative_error(analytic, numerical_grad(scalar, a, eps)))
    return errors
