"""Quick in-process oracle suite behind ``dlnet selftest``.

Each check returns ``(ok, detail)``.  The suite runs in well under a minute on
one core; the pytest suite in ``tests/`` is the exhaustive version.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from . import degrade as dg
from .metrics import psnr
from .net import build_autoencoder, build_sisr_net, param_count
from .refine import InnerHyper, InnerState, adam_inner_step, fidelity, restore
from .train import loss_rec


def _unary_ops(rng):
    yield "relu", lambda t: ad.sum(ad.mul(ad.relu(t), ad.relu(t))), rng.normal(size=(3, 4))
    yield "tanh", lambda t: ad.sum(ad.tanh(t)), rng.normal(size=(3, 4))
    yield "sqrt", lambda t: ad.sum(ad.sqrt(t)), rng.uniform(0.5, 2.0, size=(5,))
    yield "sq_norm", ad.sq_norm, rng.normal(size=(2, 3))
    yield "mean", lambda t: ad.mean(ad.mul(t, t)), rng.normal(size=(2, 3))
    yield "downsample", lambda t: ad.sq_norm(ad.downsample(t, 2)), rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    yield "conv2d", lambda t: ad.sq_norm(ad.conv2d(t, ad.constant(w), 2, 1)), rng.normal(size=(2, 2, 5, 5))
    g = rng.normal(size=(2, 3, 3, 3))
    yield "conv_transpose2d", lambda t: ad.sum(ad.mul(ad.conv_transpose2d(t, ad.constant(w), 2, 1, (5, 5)),
                                                       ad.conv_transpose2d(t, ad.constant(w), 2, 1, (5, 5)))), g
    x = rng.normal(size=(2, 2, 5, 5))
    yield "conv2d kernel", lambda t: ad.sq_norm(ad.conv2d(ad.constant(x), t, 1, 1)), w
    b = rng.uniform(0.5, 2.0, size=(3, 4))
    yield "div", lambda t: ad.sum(ad.div(t, ad.constant(b))), rng.normal(size=(3, 4))
    yield "div denominator", lambda t: ad.sum(ad.div(ad.constant(b), t)), rng.uniform(0.5, 2.0, size=(3, 4))


def check_gradients(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for name, f, x in _unary_ops(rng):
        err = ad.grad_check(f, x, skip=np.abs(x) < 1e-4)
        if err > worst:
            worst, where = err, name
    return worst <= 1e-5, f"max rel err {worst:.2e} ({where})"


def check_double_backward(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(6,))

    def f(t):
        return ad.sum(ad.mul(ad.tanh(ad.mul(t, t)), t))

    def sum_grad(t):
        t = ad.Tensor(t.data, requires_grad=True) if not t.requires_grad else t
        with ad.enable_grad():
            return ad.sum(ad.grad(f(t), t, create_graph=True))

    xt = ad.Tensor(x0, requires_grad=True)
    analytic = ad.grad(sum_grad(xt), xt).data
    err = ad.grad_check(sum_grad, x0, analytic=analytic)
    return err <= 1e-4, f"rel err {err:.2e}"


def check_adam_oracle() -> tuple[bool, str]:
    state = InnerState(())
    dz = adam_inner_step(ad.constant(2.0), state, InnerHyper(), 1).item()
    got = (state.m.item(), state.v.item(), state.m.item() / 0.1, state.v.item() / 0.001, dz)
    want = (0.2, 0.004, 2.0, 4.0, -1e-3 * 2 / (2 + 1e-8))
    err = max(abs(a - b) for a, b in zip(got, want))
    return err <= 1e-9, f"max abs err {err:.1e}"


def check_unroll_identity(seed: int = 0) -> tuple[bool, str]:
    net = build_autoencoder(16, 4, seed=seed)
    rng = np.random.default_rng(seed)
    spec = dg.sample_spec(dg.INPAINT, seed, dg.SpecRanges(s_max=8), (16, 16))
    y = dg.apply_degradation(rng.uniform(-1, 1, size=(3, 1, 16, 16)), spec).data
    with ad.no_grad():
        ref = net(ad.constant(y)).data
    out = restore(net, y, spec, InnerHyper(K=0)).data
    ok = np.array_equal(ref, out)
    return ok, "bit-identical" if ok else f"max diff {np.abs(ref - out).max():.2e}"


def check_fidelity_consistency(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for kind in dg.KINDS:
        ranges = dg.SpecRanges(s_max=8, t=2 if kind == dg.BLUR_DOWNSAMPLE else 1)
        for i in range(5):
            spec = dg.sample_spec(kind, seed * 100 + i, ranges, (16, 16))
            x = rng.uniform(-1, 1, size=(1, 1, 16, 16))
            worst = max(worst, fidelity(ad.constant(x), dg.apply_degradation(x, spec), spec).item())
    return worst <= 1e-20, f"max fidelity {worst:.1e}"


def check_mask_identities(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 1, 12, 12))
    spec = dg.DegradationSpec(dg.INPAINT, (12, 12), {"s": 5, "offset": (1, -2)})
    once = dg.apply_degradation(x, spec).data
    twice = dg.apply_degradation(once, spec).data
    ident = dg.DegradationSpec(dg.INTERPOLATE, (12, 12), {"r": 0.0})
    same = dg.apply_degradation(x, ident).data
    ok = np.array_equal(once, twice) and np.array_equal(same, x)
    return ok, "idempotent, identity exact" if ok else "mask identity violated"


def check_psnr_convention() -> tuple[bool, str]:
    a = np.zeros((2, 1, 1, 1))
    b = np.array([0.1, 0.2]).reshape(2, 1, 1, 1)
    got = psnr(a, b)
    ok = abs(got - 23.0103) < 1e-3 and abs(psnr(np.zeros(4), np.full(4, 0.2)) - 20.0) < 1e-9
    return ok, f"per-image mean {got:.2f} dB"


def check_unrolled_training_gradient(seed: int = 0) -> tuple[bool, str]:
    """Outer gradient through K=2 refinement steps against finite differences."""
    net = build_sisr_net(depth=3, ch=2, seed=seed, in_ch=1)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(1, 1, 6, 6))
    spec = dg.DegradationSpec(dg.INTERPOLATE, (6, 6), {"r": 0.3}, seed=seed)
    y = dg.apply_degradation(x, spec).data
    hyper = InnerHyper(K=2, gamma=0.05, bias_correction="stepwise_power")
    worst = 0.0
    for p in (net.g_params[0], net.h_params[0]):
        orig = p.data.copy()
        analytic = ad.grad(loss_rec(restore(net, y, spec, hyper, training=True), x), p).data
        worst = max(worst, ad.grad_check(lambda t: _swap_eval(net, p, t, y, spec, hyper, x), orig,
                                         analytic=analytic))
    return worst <= 1e-4, f"max rel err {worst:.2e}"


def _swap_eval(net, p, t, y, spec, hyper, x):
    old = p.data
    p.data = t.data
    try:
        with ad.enable_grad():
            return loss_rec(restore(net, y, spec, hyper, training=True), x)
    finally:
        p.data = old


def check_param_count() -> tuple[bool, str]:
    net = build_autoencoder(32, 8, seed=0)
    n = param_count(net)
    return n == 29985, f"{n} parameters"


CHECKS = {
    "gradients": check_gradients,
    "double_backward": check_double_backward,
    "adam_oracle": check_adam_oracle,
    "unroll_identity": check_unroll_identity,
    "fidelity_consistency": check_fidelity_consistency,
    "mask_identities": check_mask_identities,
    "psnr_convention": check_psnr_convention,
    "unrolled_gradient": check_unrolled_training_gradient,
    "param_count": check_param_count,
}


def run(out=print) -> bool:
    all_ok = True
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - start:.2f}s)")
    return all_ok


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(0 if run() else 1)
