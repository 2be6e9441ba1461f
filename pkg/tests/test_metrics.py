import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from dlnet import degrade as dg
from dlnet import metrics as mt
from dlnet import net as nt
from dlnet.data import build_fixed_testset, gen_synthetic
from dlnet.refine import InnerHyper
from dlnet.train import TrainCfg, train


def test_l1_l2_examples():
    x = np.linspace(-0.8, 0.8, 16).reshape(1, 1, 4, 4)
    assert mt.l1(x, x) == 0.0 and mt.l2(x, x) == 0.0
    assert mt.l1(x + 0.1, x) == pytest.approx(0.1)
    assert mt.l2(x + 0.1, x) == pytest.approx(0.01)
    assert mt.l1(np.ones((2, 3)), -np.ones((2, 3))) == 2.0
    assert mt.l2(np.ones((2, 3)), -np.ones((2, 3))) == 4.0


def test_values_are_clamped_first():
    assert mt.l1(np.full(4, 3.0), np.zeros(4)) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mt.l2(np.zeros(3), np.zeros(4))


def test_psnr_examples():
    assert mt.psnr(np.ones(8), -np.ones(8)) == pytest.approx(0.0, abs=1e-12)
    assert mt.psnr(np.zeros(4), np.full(4, 0.2)) == pytest.approx(20.0, abs=1e-12)
    assert mt.psnr(np.zeros(3), np.zeros(3)) == math.inf


def test_psnr_per_image_vs_pooled():
    x = np.zeros((2, 1, 1, 1))
    xh = np.array([0.1, 0.2]).reshape(2, 1, 1, 1)
    assert mt.psnr(xh, x) == pytest.approx(23.0103, abs=1e-4)
    pooled = float(mt.psnr_from_mse(mt.l2(xh, x)))
    assert pooled == pytest.approx(10 * math.log10(4 / 0.025), abs=1e-12)
    assert mt.psnr(xh, x) - pooled > 0.9


def test_exact_images_excluded_from_average():
    x = np.zeros((2, 1, 2, 2))
    xh = x.copy()
    xh[1] += 0.2
    assert mt.psnr(xh, x) == pytest.approx(20.0)


images = hnp.arrays(np.float64, (2, 1, 3, 3), elements=st.floats(-1, 1))


@settings(max_examples=100, deadline=None)
@given(images, images)
def test_psnr_sign_flip_and_zero_error(a, b):
    assert mt.psnr(a, b) == mt.psnr(-a, -b)
    assert (mt.l2(a, b) == 0) == (mt.psnr(a, b) == math.inf)


def test_psnr_monotone_in_error():
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.5, 0.5, size=(1, 1, 8, 8))
    d = rng.normal(size=x.shape)
    d /= np.abs(d).max() * 4
    values = [mt.psnr(x + a * d, x) for a in (0.1, 0.2, 0.4, 0.8, 1.0)]
    assert all(u > v for u, v in zip(values, values[1:]))


def test_report_rows_and_csv(tmp_path):
    rep = mt.EvalReport()
    x = np.zeros((1, 1, 2, 2))
    rep.add(("inpaint", "s", 3.0, 1), x + 0.2, x, 0.5)
    rep.add(("inpaint", "s", 3.0, 1), x, x, 0.5)
    rep.add(("inpaint", "s", 1.0, 1), x + 0.1, x, 0.5)
    path = rep.write_csv(tmp_path / "r.csv", timing=False)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == list(mt.EvalReport.COLUMNS)
    assert [r["value"] for r in rows] == ["1.000000", "3.000000", ""]
    assert rows[1]["n"] == "2" and rows[1]["psnr"] == "20.000000"
    assert rows[2]["task"] == "all" and rows[2]["runtime_s"] == ""
    assert rep.as_dict()["all"]["n_inf"] == 1
    rep.write_csv(tmp_path / "t.csv")
    assert list(csv.DictReader(open(tmp_path / "t.csv")))[2]["runtime_s"] == "1.500000"


@pytest.fixture(scope="module")
def small_testset():
    return build_fixed_testset(gen_synthetic(6, 16, seed=3), dg.INPAINT, 4, seed=1, ranges=dg.SpecRanges(s_max=8))


def test_evaluate_groups_by_setting(small_testset):
    rep = mt.evaluate(nt.build_autoencoder(16, 2), small_testset, strategy="joint", batch=7)
    settings_ = {sp.setting() for sp in small_testset.specs}
    assert len(rep.rows) == len(settings_)
    assert rep.total.n == len(small_testset) == 24


def test_evaluate_k0_matches_reference(small_testset, tmp_path):
    net = nt.build_autoencoder(16, 2, seed=5)
    a = mt.evaluate(net, small_testset, InnerHyper(K=0), "dlnet")
    b = mt.evaluate(net, small_testset, None, "reference")
    a.write_csv(tmp_path / "a.csv", timing=False)
    b.write_csv(tmp_path / "b.csv", timing=False)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_evaluate_matches_training_validation():
    ds = gen_synthetic(8, 16, seed=0)
    ref = dg.DegradationSpec(dg.INPAINT, (16, 16), {"s": 6, "offset": (1, 1)})
    val = build_fixed_testset(gen_synthetic(3, 16, seed=9), dg.INPAINT, 1, seed=0,
                              ranges=dg.SpecRanges(s_min=6, s_max=6, fixed_offset=(1, 1)))
    net = nt.build_autoencoder(16, 2, seed=0)
    cfg = TrainCfg(strategy="reference", ref_spec=dg.serialize_spec(ref), batch=4, epochs=1)
    _, logs = train(net, ds, cfg, val=val)
    assert abs(mt.evaluate(net, val, strategy="reference").total.psnr - logs[-1].val_psnr) <= 1e-9


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        mt.evaluate(nt.build_autoencoder(16, 2), None)
