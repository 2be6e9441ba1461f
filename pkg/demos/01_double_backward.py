"""Gradients of gradients with dlnet.autodiff.

The unrolled refinement needs d/dtheta of a quantity that already contains
d/dz, so every backward rule is itself built from differentiable ops.
"""
import numpy as np

from dlnet import autodiff as ad

# f(x) = sum(tanh(x^2) * x)
x = ad.Tensor(np.array([0.3, -1.2, 0.8]), requires_grad=True)
f = ad.sum(ad.mul(ad.tanh(ad.mul(x, x)), x))
print("f(x) =", f.item())

# first derivative, kept on the graph
(gx,) = ad.grad(f, [x], create_graph=True)
print("df/dx =", gx.data)

# second derivative: differentiate the sum of the gradient again
(hx,) = ad.grad(ad.sum(gx), [x])
print("d/dx sum(df/dx) =", hx.data)

# the same thing by central differences
def sum_grad(t):
    t = ad.Tensor(t.data, requires_grad=True)
    with ad.enable_grad():
        return ad.sum(ad.grad(ad.sum(ad.mul(ad.tanh(ad.mul(t, t)), t)), t, create_graph=True))

print("relative error vs finite differences:", ad.grad_check(sum_grad, x.data.copy(), analytic=hx.data))

# convolutions close over their own adjoints, so double backward works there too
rng = np.random.default_rng(0)
img = ad.Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
w = ad.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
(gi,) = ad.grad(ad.sq_norm(ad.conv2d(img, w, 1, 1)), [img], create_graph=True)
(gw,) = ad.grad(ad.sq_norm(gi), [w])
print("mixed second derivative wrt kernel, shape", gw.shape, "norm", float(np.linalg.norm(gw.data)))
