"""Reverse-mode autodiff on numpy, checked against central differences.

Run: python3 notebooks/01_autodiff_and_gradients.py
"""
import numpy as np

from multinet import ops
from multinet.gradcheck import check_gradients
from multinet.tensor import Tensor

rng = np.random.default_rng(0)

# A tiny graph: y = sum(relu(conv(x, w) + b)).  backward() fills .grad on leaves.
x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)
y = ops.relu(ops.conv2d(x, w, b, padding=1)).sum()
y.backward()
print("loss", float(y.data), "| dL/dw shape", w.grad.shape, "| dL/db", np.round(b.grad, 3))

# The same derivatives, checked numerically.  Each entry is a per-input relative error.
errs = check_gradients(lambda a, k, c: ops.conv2d(a, k, c, padding=1), [x.data, w.data, b.data])
print("conv2d relative errors:", [f"{e:.1e}" for e in errs])

# Transposed convolution is the adjoint of convolution: <conv(x), g> == <x, convT(g)>.
g = rng.standard_normal((1, 3, 3, 3))
lhs = float((ops.conv2d(Tensor(x.data), Tensor(w.data), stride=2, padding=1).data * g).sum())
rhs = float((x.data * ops.transposed_conv2d(Tensor(g), Tensor(w.data), stride=2, padding=1).data).sum())
print(f"adjoint identity: {lhs:.10f} vs {rhs:.10f}")

# RoI align is differentiable in its box coordinates as well as its features.
# Bilinear sampling has kinks at integer positions, so the box is chosen to keep
# every sample point off the pixel grid.
feat = rng.standard_normal((1, 4, 6, 6))
boxes = np.array([[[0.63, 1.21, 3.47, 4.12]]])
errs = check_gradients(lambda f, bx: ops.roi_align(f, bx, 3), [feat, boxes])
print("roi_align relative errors (features, boxes):", [f"{e:.1e}" for e in errs])
