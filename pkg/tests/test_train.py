import csv

import numpy as np
import pytest

from dlnet import autodiff as ad
from dlnet import degrade as dg
from dlnet import net as nt
from dlnet.data import gen_synthetic
from dlnet.refine import InnerHyper
from dlnet.train import (AdamOuterState, TrainCfg, TrainingError, adam_outer_step, loss_naive, loss_rec,
                         train, write_epoch_csv)

RANGES = dg.SpecRanges(s_max=8)


def test_loss_rec_examples():
    x = np.zeros((1, 1, 2, 2))
    assert loss_rec(ad.constant(x), x).item() == 0.0
    assert loss_rec(ad.constant(x + 0.5), x).item() == 0.25
    assert loss_rec(ad.constant(x + 1.0), x).item() == 4 * loss_rec(ad.constant(x + 0.5), x).item()
    with pytest.raises(ad.DimensionError):
        loss_rec(ad.constant(x), np.zeros((1, 1, 2, 3)))


def test_loss_naive_limits():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(2, 1, 8, 8))
    spec = dg.DegradationSpec(dg.INTERPOLATE, (8, 8), {"r": 0.5}, seed=1)
    y = dg.apply_degradation(x, spec)
    assert loss_naive(ad.constant(x), x, y, spec, 1.0).item() == 0.0
    xh = ad.constant(x + 0.1 * rng.normal(size=x.shape))
    base = loss_rec(xh, x).item()
    assert loss_naive(xh, x, y, spec, 1e-12).item() == pytest.approx(base, rel=1e-9)
    assert loss_naive(xh, x, y, spec, 1.0).item() > base
    with pytest.raises(ValueError):
        loss_naive(xh, x, y, spec, 0.0)


def test_adam_outer_oracle():
    p = ad.Tensor(np.array(1.0), requires_grad=True)
    adam_outer_step([p], [np.array(2.0)], AdamOuterState([p]), 1e-3)
    assert p.data - 1.0 == pytest.approx(-1e-3 * 2.0 / (2.0 + 1e-8), rel=1e-9)


def test_adam_outer_zero_grad_and_decay():
    p = ad.Tensor(np.array([0.5, -0.5]), requires_grad=True)
    adam_outer_step([p], [np.zeros(2)], AdamOuterState([p]), 1e-3)
    np.testing.assert_array_equal(p.data, [0.5, -0.5])
    adam_outer_step([p], [np.zeros(2)], AdamOuterState([p]), 1e-3, wd=1e-4)
    assert p.data[0] < 0.5 and p.data[1] > -0.5


def test_cfg_validation():
    for bad in ({"strategy": "bogus"}, {"task": "jpeg"}, {"strategy": "naive", "lam": 0.0},
                {"strategy": "reference"}, {"lr": 0.0}, {"batch": 0}):
        with pytest.raises(ValueError):
            TrainCfg(**bad)
    assert TrainCfg(lr_drop_every=5).lr_at(10) == pytest.approx(1e-5)


def _cfg(**kw):
    base = dict(strategy="joint", task=dg.INPAINT, ranges=RANGES, batch=4, epochs=2, seed=3)
    base.update(kw)
    return TrainCfg(**base)


def test_dlnet_k0_trace_equals_joint():
    ds = gen_synthetic(8, 16, seed=0)
    a, la = train(nt.build_autoencoder(16, 2, seed=1), ds, _cfg())
    b, lb = train(nt.build_autoencoder(16, 2, seed=1), ds, _cfg(strategy="dlnet", hyper=InnerHyper(K=0)))
    assert [e.train_loss for e in la] == [e.train_loss for e in lb]
    assert all(np.array_equal(p, q) for p, q in zip(a.get_values(), b.get_values()))


def test_training_reduces_loss():
    ds = gen_synthetic(8, 16, seed=0)
    net = nt.build_autoencoder(16, 4, seed=0)
    deg = dg.BatchDegradation([dg.sample_spec(dg.INPAINT, i, RANGES, (16, 16)) for i in range(8)])
    y = deg.observe(ds.images)

    def score():
        with ad.no_grad():
            return loss_rec(net(ad.constant(y)), ds.images).item()

    before = score()
    train(net, ds, _cfg(batch=1, epochs=1))
    assert score() < before


def test_training_keeps_param_count():
    net = nt.build_autoencoder(16, 2)
    n = nt.param_count(net)
    train(net, gen_synthetic(4, 16), _cfg(epochs=1))
    assert nt.param_count(net) == n


@pytest.mark.parametrize("strategy,extra", [
    ("joint", {}), ("naive", {"lam": 0.1}), ("dlnet", {"hyper": InnerHyper(K=2)}),
    ("reference", {"ref_spec": dg.serialize_spec(dg.DegradationSpec(dg.INPAINT, (16, 16), {"s": 5}))}),
])
def test_training_is_deterministic(strategy, extra):
    ds = gen_synthetic(8, 16, seed=2)
    runs = [train(nt.build_autoencoder(16, 2, seed=4), ds, _cfg(strategy=strategy, **extra)) for _ in range(2)]
    (n1, l1), (n2, l2) = runs
    assert [e.row() for e in l1] == [e.row() for e in l2]
    assert all(np.array_equal(p, q) for p, q in zip(n1.get_values(), n2.get_values()))


def test_blur_task_trains_with_bicubic_input():
    ds = gen_synthetic(4, 16, seed=0)
    cfg = _cfg(task=dg.BLUR_DOWNSAMPLE, ranges=dg.SpecRanges(t=2), strategy="dlnet",
               hyper=InnerHyper(K=1), epochs=1)
    _, logs = train(nt.build_sisr_net(3, 4, seed=0), ds, cfg)
    assert np.isfinite(logs[0].train_loss)


def test_non_finite_loss_aborts():
    net = nt.build_sisr_net(3, 2, seed=0)
    net.params[0].data[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(net, gen_synthetic(4, 16), _cfg(epochs=1))


def test_epoch_csv(tmp_path):
    _, logs = train(nt.build_autoencoder(16, 2), gen_synthetic(4, 16), _cfg(epochs=2))
    path = write_epoch_csv(logs, tmp_path / "e.csv")
    rows = list(csv.DictReader(open(path)))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert rows[0]["strategy"] == "joint" and rows[0]["K"] == "0"
    assert rows[0]["wall_seconds"] == ""
    _, timed = train(nt.build_autoencoder(16, 2), gen_synthetic(4, 16), _cfg(epochs=1), record_time=True)
    assert timed[0].wall_seconds > 0
