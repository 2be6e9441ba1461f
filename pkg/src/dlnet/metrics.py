"""l1 / l2 loss and PSNR on images scaled to [-1, 1], plus grouped evaluation reports."""

from __future__ import annotations

import csv
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PEAK = 2.0  # dynamic range of [-1, 1]


def _prep(x_hat, x) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(x_hat, "data", x_hat), dtype=np.float64)
    b = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a = np.clip(a, -1.0, 1.0)
    b = np.clip(b, -1.0, 1.0)
    if a.ndim < 2:
        a, b = a.reshape(1, -1), b.reshape(1, -1)
    return a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)


def per_image_l1(x_hat, x) -> np.ndarray:
    a, b = _prep(x_hat, x)
    return np.abs(a - b).mean(axis=1)


def per_image_mse(x_hat, x) -> np.ndarray:
    a, b = _prep(x_hat, x)
    return ((a - b) ** 2).mean(axis=1)


def l1(x_hat, x) -> float:
    """Mean absolute error per image, averaged over the leading (batch) axis."""
    return float(per_image_l1(x_hat, x).mean())


def l2(x_hat, x) -> float:
    return float(per_image_mse(x_hat, x).mean())


def psnr_from_mse(mse) -> np.ndarray:
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(mse > 0, 10.0 * np.log10(PEAK ** 2 / np.where(mse > 0, mse, 1.0)), np.inf)


def per_image_psnr(x_hat, x) -> np.ndarray:
    return psnr_from_mse(per_image_mse(x_hat, x))


def mean_psnr(values) -> float:
    """Average of finite per-image PSNRs; ``inf`` if every image is exact."""
    v = np.asarray(values, dtype=np.float64)
    finite = v[np.isfinite(v)]
    return float(finite.mean()) if finite.size else math.inf


def psnr(x_hat, x) -> float:
    """``10 log10(4 / MSE)`` per image, then averaged over images.

    A batch is taken along the first axis; a single image of shape (c, h, w)
    should be given a leading batch axis.  Exact reconstructions give ``inf``
    and are left out of the average unless every image is exact.
    """
    return mean_psnr(per_image_psnr(x_hat, x))


# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    task: str
    param: str
    value: float
    t: int
    l1_sum: float = 0.0
    l2_sum: float = 0.0
    psnrs: list = field(default_factory=list)
    n: int = 0
    runtime_s: float = 0.0

    @property
    def l1(self) -> float:
        return self.l1_sum / self.n

    @property
    def l2(self) -> float:
        return self.l2_sum / self.n

    @property
    def psnr(self) -> float:
        return mean_psnr(self.psnrs)

    @property
    def n_inf(self) -> int:
        return int(np.sum(~np.isfinite(self.psnrs)))


class EvalReport:
    """Per-setting accumulation of l1, l2, PSNR and runtime."""

    COLUMNS = ("task", "param", "value", "t", "n", "l1", "l2", "psnr", "runtime_s")

    def __init__(self):
        self.rows: "OrderedDict[tuple, ReportRow]" = OrderedDict()
        self.total = ReportRow("all", "all", float("nan"), 0)

    def add(self, setting: tuple, x_hat, x, runtime_s: float = 0.0) -> None:
        """Add a batch of images sharing one setting ``(task, param, value, t)``."""
        key = tuple(setting)
        row = self.rows.get(key)
        if row is None:
            row = self.rows[key] = ReportRow(*key)
        l1s, mses = per_image_l1(x_hat, x), per_image_mse(x_hat, x)
        ps = psnr_from_mse(mses)
        for r in (row, self.total):
            r.l1_sum += float(l1s.sum())
            r.l2_sum += float(mses.sum())
            r.psnrs.extend(ps.tolist())
            r.n += len(l1s)
            r.runtime_s += runtime_s

    def sorted_rows(self) -> list[ReportRow]:
        return sorted(self.rows.values(), key=lambda r: (r.task, r.param, r.value, r.t))

    def write_csv(self, path, timing: bool = True) -> Path:
        """Write one row per setting plus the ``all`` row.

        With ``timing=False`` the runtime column is left blank so reports of
        identical computations are byte-identical.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.sorted_rows() + [self.total]:
                w.writerow([r.task, r.param, _fmt(r.value), r.t, r.n, _fmt(r.l1), _fmt(r.l2),
                            _fmt(r.psnr), _fmt(r.runtime_s) if timing else ""])
        return path

    def as_dict(self) -> dict:
        return {
            "rows": [
                {"task": r.task, "param": r.param, "value": r.value, "t": r.t, "n": r.n,
                 "l1": r.l1, "l2": r.l2, "psnr": r.psnr, "n_inf": r.n_inf, "runtime_s": r.runtime_s}
                for r in self.sorted_rows()
            ],
            "all": {"n": self.total.n, "l1": self.total.l1, "l2": self.total.l2,
                    "psnr": self.total.psnr, "n_inf": self.total.n_inf,
                    "runtime_s": self.total.runtime_s},
        }


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        if math.isnan(v):
            return ""
        return f"{v:.6f}"
    return str(v)


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def evaluate(net, testset, hyper=None, strategy: str = "dlnet", batch: int = 100) -> EvalReport:
    """Score ``net`` on every pair of a fixed test set, grouped by degradation setting.

    ``strategy="dlnet"`` restores with the inner refinement from ``hyper``; any
    other strategy is the plain forward pass.  Each sample is charged an equal
    share of its batch's wall-clock time.
    """
    from . import degrade as dg
    from .refine import InnerHyper
    from .train import forward_output

    if testset is None or len(testset) == 0:
        raise ValueError("empty or missing test set")
    hyper = hyper or InnerHyper()
    report = EvalReport()
    for lo in range(0, len(testset), batch):
        sl = slice(lo, lo + batch)
        specs = testset.specs[sl]
        deg = dg.BatchDegradation(specs)
        y = testset.y[sl]
        y_in = testset.network_input(sl)
        with Timer() as tm:
            x_hat = forward_output(net, y_in, y, deg, strategy, hyper, training=False)
        share = tm.seconds / len(specs)
        for i, sp in enumerate(specs):
            report.add(sp.setting(), x_hat.data[i:i + 1], testset.x[lo + i:lo + i + 1], share)
    return report
