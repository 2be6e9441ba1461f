"""Random test cases shared by the autodiff tests and the acceptance suite."""

import numpy as np

from dlnet import autodiff as ad

EPS = 1e-5


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _kink_skip(x):
    # central differences straddle relu's kink within eps of zero
    return np.abs(x) < 2 * EPS


def primitive_cases():
    """``name -> make(rng) -> (f, x, skip)`` with ``f`` scalar-valued in ``x``.

    Each primitive is wrapped by a fixed random linear read-out (or a square)
    so every output coordinate contributes to the checked gradient.
    """

    def readout(shape, rng):
        w = ad.constant(rng.normal(size=shape))
        return lambda y: ad.sum(ad.mul(y, w))

    def binary(op, second=None):
        def make(rng):
            shape = tuple(rng.integers(1, 4, size=rng.integers(1, 4)))
            b = ad.constant((second or rng.normal)(size=shape) if second is None else second(rng, shape))
            x = rng.normal(size=shape)
            r = readout(shape, rng)
            return (lambda t: r(op(t, b))), x, None
        return make

    def binary_rhs(op):
        def make(rng):
            shape = tuple(rng.integers(1, 4, size=rng.integers(1, 4)))
            a = ad.constant(rng.normal(size=shape))
            x = _pos(rng, shape)
            r = readout(shape, rng)
            return (lambda t: r(op(a, t))), x, None
        return make

    def broadcast_add(rng):
        x = rng.normal(size=(3, 1))
        b = ad.constant(rng.normal(size=(2, 3, 4)))
        r = readout((2, 3, 4), rng)
        return (lambda t: r(ad.add(t, b))), x, None

    def unary(op, domain=None, kink=False):
        def make(rng):
            shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
            x = domain(rng, shape) if domain else rng.normal(size=shape)
            r = readout(shape, rng)
            return (lambda t: r(op(t))), x, (_kink_skip(x) if kink else None)
        return make

    def reduction(op):
        def make(rng):
            x = rng.normal(size=tuple(rng.integers(1, 5, size=2)))
            return op, x, None
        return make

    def reshape(rng):
        x = rng.normal(size=(2, 3, 4))
        r = readout((4, 6), rng)
        return (lambda t: r(ad.reshape(t, (4, 6)))), x, None

    def sum_to(rng):
        x = rng.normal(size=(2, 3, 4))
        r = readout((3, 1), rng)
        return (lambda t: r(ad.sum_to(t, (3, 1)))), x, None

    def broadcast_to(rng):
        x = rng.normal(size=(3, 1))
        r = readout((2, 3, 4), rng)
        return (lambda t: r(ad.broadcast_to(t, (2, 3, 4)))), x, None

    def einsum_left(rng):
        b = ad.constant(rng.normal(size=(4, 5)))
        r = readout((3, 5), rng)
        return (lambda t: r(ad.einsum("ij,jk->ik", t, b))), rng.normal(size=(3, 4)), None

    def einsum_right(rng):
        a = ad.constant(rng.normal(size=(2, 3, 4)))
        r = readout((2, 3), rng)
        return (lambda t: r(ad.einsum("ncp,cp->nc", a, t))), rng.normal(size=(3, 4)), None

    def conv_geometry(rng):
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, k))
        h = int(rng.integers(k, 7))
        return k, s, p, h

    def conv_input(rng):
        k, s, p, h = conv_geometry(rng)
        w = ad.constant(rng.normal(size=(2, 3, k, k)))
        x = rng.normal(size=(2, 3, h, h + 1))
        oh, ow = (h + 2 * p - k) // s + 1, (h + 1 + 2 * p - k) // s + 1
        r = readout((2, 2, oh, ow), rng)
        return (lambda t: r(ad.conv2d(t, w, s, p))), x, None

    def conv_kernel(rng):
        k, s, p, h = conv_geometry(rng)
        x = ad.constant(rng.normal(size=(2, 3, h, h)))
        oh = (h + 2 * p - k) // s + 1
        r = readout((2, 2, oh, oh), rng)
        return (lambda t: r(ad.conv2d(x, t, s, p))), rng.normal(size=(2, 3, k, k)), None

    def convt_input(rng):
        k, s, p, h = conv_geometry(rng)
        oh = (h + 2 * p - k) // s + 1
        w = ad.constant(rng.normal(size=(2, 3, k, k)))
        r = readout((2, 3, h, h), rng)
        return (lambda t: r(ad.conv_transpose2d(t, w, s, p, (h, h)))), rng.normal(size=(2, 2, oh, oh)), None

    def convt_kernel(rng):
        k, s, p, h = conv_geometry(rng)
        oh = (h + 2 * p - k) // s + 1
        g = ad.constant(rng.normal(size=(2, 2, oh, oh)))
        r = readout((2, 3, h, h), rng)
        return (lambda t: r(ad.conv_transpose2d(g, t, s, p, (h, h)))), rng.normal(size=(2, 3, k, k)), None

    def unfold(rng):
        k, s, p, h = conv_geometry(rng)
        oh = (h + 2 * p - k) // s + 1
        r = readout((1, 2, oh, oh, k, k), rng)
        return (lambda t: r(ad.unfold(t, k, s, p))), rng.normal(size=(1, 2, h, h)), None

    def fold(rng):
        k, s, p, h = conv_geometry(rng)
        oh = (h + 2 * p - k) // s + 1
        r = readout((1, 2, h, h), rng)
        return (lambda t: r(ad.fold(t, k, s, p, (h, h)))), rng.normal(size=(1, 2, oh, oh, k, k)), None

    def downsample(rng):
        t = int(rng.integers(1, 4))
        x = rng.normal(size=(2, 1, 2 * t, 3 * t))
        r = readout((2, 1, 2, 3), rng)
        return (lambda u: r(ad.downsample(u, t))), x, None

    def upsample(rng):
        t = int(rng.integers(1, 4))
        r = readout((1, 2, 2 * t, 2 * t), rng)
        return (lambda u: r(ad.upsample_zeros(u, t))), rng.normal(size=(1, 2, 2, 2)), None

    return {
        "add": binary(ad.add),
        "add broadcast": broadcast_add,
        "sub": binary(ad.sub),
        "sub rhs": binary_rhs(ad.sub),
        "mul": binary(ad.mul),
        "mul rhs": binary_rhs(ad.mul),
        "div": binary(ad.div, _pos),
        "div rhs": binary_rhs(ad.div),
        "neg": unary(ad.neg),
        "scale": unary(lambda t: ad.scale(t, -1.7)),
        "sqrt": unary(ad.sqrt, _pos),
        "relu": unary(ad.relu, kink=True),
        "tanh": unary(ad.tanh),
        "sum": reduction(ad.sum),
        "mean": reduction(ad.mean),
        "sq_norm": reduction(ad.sq_norm),
        "reshape": reshape,
        "sum_to": sum_to,
        "broadcast_to": broadcast_to,
        "einsum lhs": einsum_left,
        "einsum rhs": einsum_right,
        "conv2d input": conv_input,
        "conv2d kernel": conv_kernel,
        "conv_transpose2d input": convt_input,
        "conv_transpose2d kernel": convt_kernel,
        "unfold": unfold,
        "fold": fold,
        "downsample": downsample,
        "upsample_zeros": upsample,
    }


def worst_grad_error(name: str, n_cases: int, seed: int = 0) -> float:
    make = primitive_cases()[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(n_cases):
        f, x, skip = make(rng)
        worst = max(worst, ad.grad_check(f, x, EPS, skip=skip))
    return worst


def composition(t):
    """A smooth 3+ primitive composition used for double-backward checks."""
    return ad.sum(ad.mul(ad.tanh(ad.mul(t, t)), ad.div(t, ad.add(ad.mul(t, t), 1.0))))


def double_backward_error(seed: int = 0, n: int = 5) -> float:
    """FD check of d/dx sum(grad f(x)) for :func:`composition`."""
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(n,))

    def sum_grad(t):
        t = t if t.requires_grad else ad.Tensor(t.data, requires_grad=True)
        with ad.enable_grad():
            return ad.sum(ad.grad(composition(t), t, create_graph=True))

    xt = ad.Tensor(x0, requires_grad=True)
    analytic = ad.grad(sum_grad(xt), xt).data
    return ad.grad_check(sum_grad, x0, EPS, analytic=analytic)
