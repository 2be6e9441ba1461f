"""Latent refinement: K recorded ADAM steps on ``z`` against the fidelity term.

Given a network ``f = h . g`` and an observation ``y`` with known degradation
``A``, the restored image is ``h(z_K)`` where ``z_0 = g(y)`` and every step
moves ``z`` along ADAM-normalised gradients of ``||A h(z) - y||^2``.  In
training mode the steps stay on the autodiff graph, so the outer loss
backpropagates through them (this needs second derivatives of ``h``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .degrade import BatchDegradation, DegradationSpec, degrade_clean
from .net import Network

CONSTANT_CORRECTION = "constant"
STEPWISE_POWER = "stepwise_power"


@dataclass(frozen=True)
class InnerHyper:
    """Unroll length and ADAM settings for the latent refinement.

    ``bias_correction="constant"`` divides the moments by the constants
    ``1 - beta1`` and ``1 - beta2`` at every step; ``"stepwise_power"`` uses the
    usual ``1 - beta**k``.
    """

    K: int = 5
    gamma: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: str = CONSTANT_CORRECTION

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.bias_correction not in (CONSTANT_CORRECTION, STEPWISE_POWER):
            raise ValueError(f"unknown bias correction {self.bias_correction!r}")


INTERPOLATION_GAMMA = 1e-2


class InnerState:
    """First and second moment accumulators, zero at the start of every refinement."""

    def __init__(self, shape):
        self.m = ad.constant(np.zeros(shape))
        self.v = ad.constant(np.zeros(shape))


def _observe(x_hat: ad.Tensor, degradation) -> ad.Tensor:
    if isinstance(degradation, BatchDegradation):
        return degradation.clean(x_hat)
    return degrade_clean(x_hat, degradation)


def _weights(degradation, n: int) -> np.ndarray:
    if isinstance(degradation, BatchDegradation):
        return degradation.weights
    return np.full(n, degradation.weight)


def fidelity(x_hat: ad.Tensor, y, degradation: DegradationSpec | BatchDegradation) -> ad.Tensor:
    """``sum_i w_i ||down_t(W_i x_hat_i) - y_i||^2`` with ``w = 1/(2 sigma^2)`` or 1 if noise-free.

    No noise is drawn here; ``sigma`` only sets the weight.
    """
    y = ad._as_tensor(y)
    r = ad.sub(_observe(x_hat, degradation), y)
    if r.shape != y.shape:
        raise ad.DimensionError(f"degraded estimate {r.shape} vs observation {y.shape}")
    w = _weights(degradation, r.shape[0])
    if np.all(w == 1.0):
        return ad.sq_norm(r)
    return ad.sum(ad.mul(ad.mul(r, r), ad.constant(w.reshape(-1, 1, 1, 1))))


def per_sample_fidelity(x_hat, y, degradation) -> np.ndarray:
    """Unreduced fidelity per batch item, as plain floats."""
    with ad.no_grad():
        r = _observe(ad._as_tensor(x_hat), degradation).data - ad._as_tensor(y).data
    return _weights(degradation, r.shape[0]) * (r ** 2).reshape(r.shape[0], -1).sum(axis=1)


_CHUNK = 16384  # elements per block; keeps the temporaries in cache


def _adam_arrays(g, m0, v0, b1, b2, c1, c2, eps, gamma):
    """Unrecorded ADAM update, bit-identical to the recorded one, in cache-sized blocks."""
    shape = np.shape(g)
    g, m0, v0 = (np.ascontiguousarray(a, dtype=np.float64).reshape(-1) for a in (g, m0, v0))
    m, v, step = np.empty_like(g), np.empty_like(g), np.empty_like(g)
    tmp = np.empty(min(_CHUNK, g.size))
    for lo in range(0, g.size, _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        gi, mi, vi, si = g[sl], m[sl], v[sl], step[sl]
        t = tmp[:gi.size]
        np.multiply(m0[sl], b1, out=mi)
        np.multiply(gi, 1.0 - b1, out=t)
        mi += t
        np.multiply(gi, gi, out=vi)
        vi *= 1.0 - b2
        np.multiply(v0[sl], b2, out=t)
        np.add(t, vi, out=vi)
        np.divide(vi, c2, out=t)
        np.sqrt(t, out=t)
        t += eps
        np.divide(mi, c1, out=si)
        si /= t
        si *= -gamma
    return m.reshape(shape), v.reshape(shape), step.reshape(shape)


def adam_inner_step(grad: ad.Tensor, state: InnerState, hyper: InnerHyper, k: int) -> ad.Tensor:
    """Update ``state`` in place with gradient ``grad`` at step ``k >= 1``; return the step for ``z``."""
    if k < 1:
        raise ValueError(f"step index must be >= 1, got {k}")
    if state.m.shape != grad.shape:
        raise ad.DimensionError(f"state {state.m.shape} vs gradient {grad.shape}")
    b1, b2 = hyper.beta1, hyper.beta2
    if hyper.bias_correction == CONSTANT_CORRECTION:
        c1, c2 = 1.0 - b1, 1.0 - b2
    else:
        c1, c2 = 1.0 - b1 ** k, 1.0 - b2 ** k
    if not ad.is_grad_enabled() or not (grad.requires_grad or state.m.requires_grad
                                        or state.v.requires_grad):
        m, v, step = _adam_arrays(grad.data, state.m.data, state.v.data, b1, b2, c1, c2,
                                  hyper.eps, hyper.gamma)
        state.m, state.v = ad.constant(m), ad.constant(v)
        return ad.constant(step)
    state.m = ad.add(ad.mul(state.m, b1), ad.mul(grad, 1.0 - b1))
    state.v = ad.add(ad.mul(state.v, b2), ad.mul(ad.mul(grad, grad), 1.0 - b2))
    m_hat = ad.div(state.m, c1)
    v_hat = ad.div(state.v, c2)
    return ad.mul(ad.div(m_hat, ad.add(ad.sqrt(v_hat), hyper.eps)), -hyper.gamma)


def inner_refine(net: Network, z0: ad.Tensor, y, degradation, hyper: InnerHyper,
                 training: bool = True, skip: ad.Tensor | None = None,
                 trace: list | None = None) -> ad.Tensor:
    """Run ``hyper.K`` ADAM steps on ``z`` starting from ``z0``.

    In training mode every step, including the gradient computation, is
    recorded so the result keeps its lineage to ``z0`` and the parameters of
    ``h``.  Otherwise each step is computed on a detached copy.  If ``trace`` is
    a list, the per-sample fidelity arrays at k = 0..K are appended to it.
    """
    if hyper.K == 0:
        if trace is not None:
            with ad.no_grad():
                trace.append(per_sample_fidelity(net.forward_h(z0, skip), y, degradation))
        return z0
    y = ad._as_tensor(y)
    state = InnerState(z0.shape)
    z = z0
    if trace is not None:
        trace.append(_fid_np(net, z, y, degradation, skip))
    for k in range(1, hyper.K + 1):
        if training:
            if not z.requires_grad:
                z = ad.Tensor(z.data, requires_grad=True)
            fid = fidelity(net.forward_h(z, skip), y, degradation)
            gz = ad.grad(fid, z, create_graph=True, retain_graph=True)
            z = ad.add(z, adam_inner_step(gz, state, hyper, k))
        else:
            zr = ad.Tensor(z.data, requires_grad=True)
            with ad.enable_grad():
                fid = fidelity(net.forward_h(zr, skip), y, degradation)
                gz = ad.grad(fid, zr)
            with ad.no_grad():
                z = ad.add(zr.detach(), adam_inner_step(gz, state, hyper, k))
        if trace is not None:
            trace.append(_fid_np(net, z, y, degradation, skip))
    return z


def _fid_np(net, z, y, degradation, skip) -> np.ndarray:
    with ad.no_grad():
        return per_sample_fidelity(net.forward_h(z.detach(), skip), y, degradation)


def restore(net: Network, y_in, degradation, hyper: InnerHyper, training: bool = False,
            y_obs=None, trace: list | None = None) -> ad.Tensor:
    """``h(z_K)`` for network input ``y_in``.

    ``y_obs`` is the observation the fidelity compares against; it defaults to
    ``y_in`` (mask-type tasks).  For super-resolution pass the low-resolution
    image here and its bicubic upscaling as ``y_in``.
    """
    y_in = ad._as_tensor(y_in)
    y_obs = y_in if y_obs is None else ad._as_tensor(y_obs)
    skip = y_in if net.needs_skip else None
    if not training:
        with ad.no_grad():
            z0 = net.forward_g(y_in)
        if hyper.K == 0:
            with ad.no_grad():
                x_hat = net.forward_h(z0, skip)
            if trace is not None:
                trace.append(per_sample_fidelity(x_hat, y_obs, degradation))
            return x_hat
        z = inner_refine(net, z0, y_obs, degradation, hyper, training=False, skip=skip, trace=trace)
        with ad.no_grad():
            return net.forward_h(z, skip)
    z0 = net.forward_g(y_in)
    z = inner_refine(net, z0, y_obs, degradation, hyper, training=True, skip=skip, trace=trace)
    return net.forward_h(z, skip)
