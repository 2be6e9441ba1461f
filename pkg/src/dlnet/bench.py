"""Toy benchmark: synthetic 32x32 images, multi-degradation inpainting or interpolation.

Protocol, per training seed:

* ``joint`` and ``naive`` train from scratch for ``epochs`` epochs.
* ``dlnet`` starts from the joint run's weights at epoch
  ``epochs - finetune_epochs`` and trains with the unrolled refinement for the
  remaining ``finetune_epochs``, so both end after the same number of epochs.
* ``curve`` trains the unrolled refinement from scratch and only keeps the
  per-epoch training loss.

Every run is cached on disk under a key made from its settings and a digest
of the numerical modules' code (docstrings and comments excluded), so results
are recomputed whenever that code changes.
``DLNET_BENCH_CACHE`` sets the cache directory and ``DLNET_BENCH_FRESH=1``
ignores existing entries.
"""

from __future__ import annotations

import ast
import functools
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data
from . import degrade as dg
from . import metrics
from .net import build_autoencoder
from .refine import InnerHyper
from .train import TrainCfg, train

log = logging.getLogger(__name__)

PKG_DIR = Path(__file__).resolve().parent


@dataclass(frozen=True)
class ToyConfig:
    n_train: int = 2000
    n_test: int = 200
    size: int = 32
    base_ch: int = 8
    epochs: int = 40
    finetune_epochs: int = 10
    s_max: int = 12
    r_max: float = 0.75
    batch: int = 25
    specs_per_image: int = 10
    data_seed: int = 1
    test_seed: int = 2

    def ranges(self) -> dg.SpecRanges:
        return dg.SpecRanges(s_min=1, s_max=self.s_max, r_max=self.r_max)


NUMERIC_MODULES = ("autodiff", "bench", "data", "degrade", "metrics", "net", "refine", "train")


def _code_only(src: str) -> str:
    """AST dump with docstrings removed, so comment and wording edits keep the cache."""
    tree = ast.parse(src)
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return ast.dump(tree)


@functools.lru_cache(maxsize=1)
def source_digest() -> str:
    h = hashlib.sha256()
    for name in NUMERIC_MODULES:
        h.update(name.encode())
        h.update(_code_only((PKG_DIR / f"{name}.py").read_text()).encode())
    return h.hexdigest()[:16]


def cache_dir() -> Path:
    default = Path.home() / ".cache" / "dlnet-bench"
    return Path(os.environ.get("DLNET_BENCH_CACHE", default))


def _key(kind: str, cfg: ToyConfig, **params) -> str:
    blob = json.dumps({"kind": kind, "cfg": asdict(cfg), "params": params, "src": source_digest()},
                      sort_keys=True)
    return f"{kind}-{hashlib.sha256(blob.encode()).hexdigest()[:20]}"


def _cached(key: str, compute):
    """Return ``(summary, arrays)`` from the cache or from ``compute()``."""
    root = cache_dir()
    meta, arrays = root / f"{key}.json", root / f"{key}.npz"
    if meta.exists() and arrays.exists() and os.environ.get("DLNET_BENCH_FRESH") != "1":
        with np.load(arrays) as z:
            return json.loads(meta.read_text()), [z[k] for k in sorted(z.files, key=lambda s: int(s[1:]))]
    summary, values = compute()
    root.mkdir(parents=True, exist_ok=True)
    np.savez(arrays, **{f"p{i}": v for i, v in enumerate(values)})
    meta.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return summary, values


@functools.lru_cache(maxsize=2)
def train_set(cfg: ToyConfig) -> data.Dataset:
    return data.gen_synthetic(cfg.n_train, cfg.size, cfg.data_seed)


@functools.lru_cache(maxsize=4)
def test_set(cfg: ToyConfig, task: str) -> data.TestSet:
    imgs = data.gen_synthetic(cfg.n_test, cfg.size, cfg.test_seed)
    return data.build_fixed_testset(imgs, task, cfg.specs_per_image, cfg.test_seed, cfg.ranges())


def _train_cfg(cfg: ToyConfig, task: str, strategy: str, seed: int, epochs: int,
               hyper: InnerHyper = InnerHyper(), lam: float = 1.0) -> TrainCfg:
    return TrainCfg(strategy=strategy, task=task, lam=lam, hyper=hyper, ranges=cfg.ranges(),
                    batch=cfg.batch, epochs=epochs, seed=seed)


def _score(net, cfg: ToyConfig, task: str, strategy: str, hyper: InnerHyper) -> float:
    return metrics.evaluate(net, test_set(cfg, task), hyper, strategy).total.psnr


def joint(cfg: ToyConfig, task: str, seed: int) -> tuple[dict, list[np.ndarray]]:
    """Joint baseline; the arrays are the weights at the fine-tuning branch point."""
    def compute():
        net = build_autoencoder(cfg.size, cfg.base_ch, seed=seed)
        branch = cfg.epochs - cfg.finetune_epochs
        snap = {}

        def on_epoch(entry):
            if entry.epoch == branch:
                snap["values"] = net.get_values()

        tc = _train_cfg(cfg, task, "joint", seed, cfg.epochs)
        _, logs = train(net, train_set(cfg), tc, on_epoch=on_epoch)
        psnr = _score(net, cfg, task, "joint", InnerHyper(K=0))
        return {"psnr": psnr, "train_loss": [e.train_loss for e in logs]}, snap.get("values", net.get_values())

    return _cached(_key("joint", cfg, task=task, seed=seed), compute)


def naive(cfg: ToyConfig, task: str, seed: int, lam: float) -> dict:
    def compute():
        net = build_autoencoder(cfg.size, cfg.base_ch, seed=seed)
        _, logs = train(net, train_set(cfg), _train_cfg(cfg, task, "naive", seed, cfg.epochs, lam=lam))
        psnr = _score(net, cfg, task, "naive", InnerHyper(K=0))
        return {"psnr": psnr, "train_loss": [e.train_loss for e in logs]}, net.get_values()

    return _cached(_key("naive", cfg, task=task, seed=seed, lam=lam), compute)[0]


def dlnet(cfg: ToyConfig, task: str, seed: int, hyper: InnerHyper) -> tuple[dict, list[np.ndarray]]:
    """Unrolled-refinement fine-tune from the joint branch point; arrays are the final weights."""
    def compute():
        _, start = joint(cfg, task, seed)
        net = build_autoencoder(cfg.size, cfg.base_ch, seed=seed)
        net.set_values(start)
        tc = _train_cfg(cfg, task, "dlnet", seed + 10_000, cfg.finetune_epochs, hyper=hyper)
        _, logs = train(net, train_set(cfg), tc)
        psnr = _score(net, cfg, task, "dlnet", hyper)
        return {"psnr": psnr, "train_loss": [e.train_loss for e in logs]}, net.get_values()

    return _cached(_key("dlnet", cfg, task=task, seed=seed, hyper=asdict(hyper)), compute)


def curve(cfg: ToyConfig, task: str, seed: int, K: int, epochs: int, gamma: float = 1e-3) -> list[float]:
    """Per-epoch training loss of the unrolled refinement trained from scratch.

    ``K=0`` is the joint baseline and reuses its run.
    """
    if K == 0:
        return joint(cfg, task, seed)[0]["train_loss"][:epochs]

    def compute():
        net = build_autoencoder(cfg.size, cfg.base_ch, seed=seed)
        tc = _train_cfg(cfg, task, "dlnet", seed, epochs, hyper=InnerHyper(K=K, gamma=gamma))
        _, logs = train(net, train_set(cfg), tc)
        return {"train_loss": [e.train_loss for e in logs]}, net.get_values()

    return _cached(_key("curve", cfg, task=task, seed=seed, K=K, epochs=epochs, gamma=gamma), compute)[0]["train_loss"]


def trained_dlnet(cfg: ToyConfig, task: str, seed: int, hyper: InnerHyper):
    """The fine-tuned network of :func:`dlnet` as a ready :class:`dlnet.net.Network`."""
    _, values = dlnet(cfg, task, seed, hyper)
    net = build_autoencoder(cfg.size, cfg.base_ch, seed=seed)
    net.set_values(values)
    return net


SEEDS = (0, 1, 2)
NAIVE_LAMBDAS = (1.0, 0.1, 0.01)
INPAINT_HYPER = InnerHyper(K=5, gamma=1e-3)
INTERP_HYPER = InnerHyper(K=5, gamma=1e-2)
CURVE_KS = (0, 2, 5)  # 0 is the joint run, the "K=1" point of the training-curve comparison
CURVE_EPOCHS = 20


def fidelity_trace(net, cfg: ToyConfig, task: str, hyper: InnerHyper, n: int = 64) -> list[np.ndarray]:
    """Per-sample fidelity at k = 0..K on the first ``n`` test pairs."""
    from .refine import restore

    ts = test_set(cfg, task)
    sl = slice(0, n)
    trace: list[np.ndarray] = []
    restore(net, ts.network_input(sl), dg.BatchDegradation(ts.specs[sl]), hyper, y_obs=ts.y[sl], trace=trace)
    return trace


def populate(cfg: ToyConfig = ToyConfig(), out=print) -> None:
    """Run (or load) every benchmark entry the acceptance suite reads."""
    import time

    jobs = []
    for seed in SEEDS:
        jobs.append((f"joint inpaint seed={seed}", lambda s=seed: joint(cfg, dg.INPAINT, s)))
        jobs.append((f"dlnet inpaint seed={seed}", lambda s=seed: dlnet(cfg, dg.INPAINT, s, INPAINT_HYPER)))
    for seed in SEEDS:
        jobs.append((f"joint interpolate seed={seed}", lambda s=seed: joint(cfg, dg.INTERPOLATE, s)))
        jobs.append((f"dlnet interpolate seed={seed}",
                     lambda s=seed: dlnet(cfg, dg.INTERPOLATE, s, INTERP_HYPER)))
    for lam in NAIVE_LAMBDAS:
        for seed in SEEDS:
            jobs.append((f"naive lam={lam} seed={seed}", lambda s=seed, l=lam: naive(cfg, dg.INPAINT, s, l)))
    for K in CURVE_KS[1:]:
        for seed in SEEDS:
            jobs.append((f"curve K={K} seed={seed}",
                         lambda s=seed, k=K: curve(cfg, dg.INPAINT, s, k, CURVE_EPOCHS)))
    for name, job in jobs:
        start = time.perf_counter()
        res = job()
        summary = res[0] if isinstance(res, tuple) else res
        detail = f"psnr {summary['psnr']:.3f}" if isinstance(summary, dict) and "psnr" in summary else \
            f"loss@{CURVE_EPOCHS} {summary[-1]:.5f}" if isinstance(summary, list) else ""
        out(f"{name}: {detail} ({time.perf_counter() - start:.0f}s)")


if __name__ == "__main__":  # pragma: no cover
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        populate(out=lambda s: print(s, flush=True))
