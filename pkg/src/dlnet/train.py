"""Training strategies: reference, rigid-joint, naive likelihood, and unrolled refinement.

All four share one loop.  They differ in which degradations the samples see
(one fixed setting vs. a fresh random setting per sample per epoch) and in
how the output is formed and scored:

* ``reference``: fixed spec, plain forward pass, reconstruction loss.
* ``joint``: random specs, plain forward pass, reconstruction loss.
* ``naive``: as ``joint`` plus ``lam`` times the mean fidelity of the output.
* ``dlnet``: random specs, output from :func:`dlnet.refine.restore` in
  training mode, so the update differentiates through the inner ADAM steps.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import degrade as dg
from .data import Dataset, bicubic_resize
from .net import Network
from .refine import InnerHyper, fidelity, restore

log = logging.getLogger(__name__)

STRATEGIES = ("reference", "joint", "naive", "dlnet")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainCfg:
    strategy: str = "joint"
    task: str = dg.INPAINT
    lam: float = 1.0
    hyper: InnerHyper = field(default_factory=InnerHyper)
    ranges: dg.SpecRanges = field(default_factory=dg.SpecRanges)
    ref_spec: str | None = None  # serialized spec for the reference strategy
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch: int = 25
    epochs: int = 10
    lr_drop_every: int | None = None
    lr_drop_factor: float = 10.0
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; pick one of {STRATEGIES}")
        if self.task not in dg.KINDS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.strategy == "naive" and not self.lam > 0:
            raise ValueError("naive likelihood needs lam > 0")
        if self.strategy == "reference" and self.ref_spec is None:
            raise ValueError("reference strategy needs ref_spec")
        if self.batch < 1 or self.epochs < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("batch >= 1, epochs >= 0, lr > 0 and weight_decay >= 0 required")
        if self.lr_drop_every is not None and self.lr_drop_every < 1:
            raise ValueError("lr_drop_every must be >= 1")

    @property
    def K(self) -> int:
        return self.hyper.K if self.strategy == "dlnet" else 0

    def lr_at(self, epoch: int) -> float:
        if not self.lr_drop_every:
            return self.lr
        return self.lr / self.lr_drop_factor ** (epoch // self.lr_drop_every)


# ---------------------------------------------------------------------------
# losses

def loss_rec(x_hat: ad.Tensor, x) -> ad.Tensor:
    """Mean squared error over every element of the batch."""
    x = ad._as_tensor(x)
    if x_hat.shape != x.shape:
        raise ad.DimensionError(f"loss_rec: {x_hat.shape} vs {x.shape}")
    return ad.mean(ad.mul(ad.sub(x_hat, x), ad.sub(x_hat, x)))


def loss_naive(x_hat: ad.Tensor, x, y, degradation, lam: float) -> ad.Tensor:
    """``loss_rec + lam * fidelity / (number of observed elements)``."""
    if not lam > 0:
        raise ValueError("lam must be > 0")
    y = ad._as_tensor(y)
    lik = ad.mul(fidelity(x_hat, y, degradation), 1.0 / y.size)
    return ad.add(loss_rec(x_hat, x), ad.mul(lik, lam))


# ---------------------------------------------------------------------------
# outer optimizer

class AdamOuterState:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_outer_step(params, grads, state: AdamOuterState, lr: float, wd: float = 0.0) -> None:
    """One ADAM update (stepwise bias correction) with ``wd * param`` added to each gradient."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(getattr(g, "data", g))
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient {g.shape} for parameter {p.shape}")
        if wd:
            g = g + wd * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)


# ---------------------------------------------------------------------------
# batches

def _seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2 ** 63 - 1))


def network_input(y: np.ndarray, t: int) -> np.ndarray:
    return y if t == 1 else bicubic_resize(y, t)


def forward_output(net: Network, y_in, y_obs, degradation, strategy: str, hyper: InnerHyper,
                   training: bool) -> ad.Tensor:
    """Restored batch for ``strategy``; only ``dlnet`` runs the inner refinement."""
    if strategy == "dlnet":
        return restore(net, y_in, degradation, hyper, training=training, y_obs=y_obs)
    if training:
        return net(ad._as_tensor(y_in))
    with ad.no_grad():
        return net(ad._as_tensor(y_in))


def _batch_specs(cfg: TrainCfg, rng: np.random.Generator, n: int, shape) -> list[dg.DegradationSpec]:
    if cfg.strategy == "reference":
        sp = dg.parse_spec(cfg.ref_spec)
        if sp.shape != tuple(shape):
            raise ValueError(f"reference spec shape {sp.shape} != image shape {tuple(shape)}")
        return [sp] * n
    return [dg.sample_spec(cfg.task, _seed_from(rng), cfg.ranges, shape) for _ in range(n)]


@dataclass
class EpochLog:
    epoch: int
    strategy: str
    K: int
    train_loss: float
    val_l1: float | None = None
    val_l2: float | None = None
    val_psnr: float | None = None
    wall_seconds: float | None = None

    COLUMNS = ("epoch", "strategy", "K", "train_loss", "val_l1", "val_l2", "val_psnr", "wall_seconds")

    def row(self) -> list[str]:
        def f(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return "inf" if math.isinf(v) else repr(v)
            return str(v)
        return [f(getattr(self, c)) for c in self.COLUMNS]


def write_epoch_csv(logs: list[EpochLog], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EpochLog.COLUMNS)
        for e in logs:
            w.writerow(e.row())
    return path


def train(net: Network, dataset: Dataset, cfg: TrainCfg, val=None, record_time: bool = False,
          on_epoch=None) -> tuple[Network, list[EpochLog]]:
    """Train ``net`` in place and return it with one :class:`EpochLog` per epoch.

    ``val`` is an optional :class:`dlnet.data.TestSet` scored after every
    epoch.  Wall-clock times are only logged with ``record_time`` so that
    logs of identically seeded runs are byte-identical.
    """
    from .metrics import evaluate  # metrics imports this module's helpers

    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = net.params
    state = AdamOuterState(params)
    shape = dataset.shape
    ss = np.random.SeedSequence(cfg.seed)
    order_seq, spec_seq = ss.spawn(2)
    order_rng = np.random.default_rng(order_seq)
    spec_rng = np.random.default_rng(spec_seq)
    t_obs = cfg.ranges.t if cfg.task == dg.BLUR_DOWNSAMPLE else 1
    logs: list[EpochLog] = []
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        lr = cfg.lr_at(epoch - 1)
        perm = order_rng.permutation(len(dataset))
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, len(perm), cfg.batch)):
            idx = np.sort(perm[lo:lo + cfg.batch])
            x = dataset.images[idx]
            specs = _batch_specs(cfg, spec_rng, len(idx), shape)
            deg = dg.BatchDegradation(specs)
            y = deg.observe(x)
            y_in = network_input(y, specs[0].t)
            x_hat = forward_output(net, y_in, y, deg, cfg.strategy, cfg.hyper, training=True)
            if cfg.strategy == "naive":
                loss = loss_naive(x_hat, x, y, deg, cfg.lam)
            else:
                loss = loss_rec(x_hat, x)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b}: loss={value}, strategy={cfg.strategy}"
                )
            grads = ad.grad(loss, params)
            gdata = [g.data for g in grads]
            if not all(np.all(np.isfinite(g)) for g in gdata):
                raise TrainingError(f"non-finite gradient at epoch {epoch}, batch {b}: loss={value}")
            if cfg.clip_norm:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in gdata))
                if norm > cfg.clip_norm:
                    gdata = [g * (cfg.clip_norm / norm) for g in gdata]
            adam_outer_step(params, gdata, state, lr, cfg.weight_decay)
            total += value * len(idx)
            count += len(idx)
        entry = EpochLog(epoch, cfg.strategy, cfg.K, total / count)
        if val is not None:
            rep = evaluate(net, val, cfg.hyper, cfg.strategy)
            entry.val_l1, entry.val_l2, entry.val_psnr = rep.total.l1, rep.total.l2, rep.total.psnr
        if record_time:
            entry.wall_seconds = time.perf_counter() - start
        logs.append(entry)
        log.info("epoch %d %s K=%d loss=%.6g", epoch, cfg.strategy, cfg.K, entry.train_loss)
        if on_epoch is not None:
            on_epoch(entry)
    return net, logs


def finetune_cfg(cfg: TrainCfg, **changes) -> TrainCfg:
    return replace(cfg, **changes)
