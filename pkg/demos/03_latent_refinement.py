"""Refining the latent code of a trained network against the observation.

Uses the fine-tuned toy inpainting model from the benchmark cache (it is
trained on first use, which takes a while; see dlnet.bench).
"""
import numpy as np

from dlnet import bench
from dlnet import degrade as dg
from dlnet import metrics
from dlnet.refine import InnerHyper

cfg = bench.ToyConfig()
net = bench.trained_dlnet(cfg, dg.INPAINT, 0, bench.INPAINT_HYPER)
ts = bench.test_set(cfg, dg.INPAINT)

# fidelity ||M h(z_k) - y||^2 per sample, k = 0..5
trace = bench.fidelity_trace(net, cfg, dg.INPAINT, bench.INPAINT_HYPER, n=64)
for k, f in enumerate(trace):
    print(f"k={k}  median fidelity {np.median(f):.4f}")

# same weights, with and without refinement at test time
for K in (0, 5):
    rep = metrics.evaluate(net, ts, InnerHyper(K=K), "dlnet")
    print(f"K={K}: PSNR {rep.total.psnr:.2f} dB over {rep.total.n} pairs")

# PSNR per hole size, from the K=5 report
for row in rep.sorted_rows():
    print(f"  s={int(row.value):2d}  n={row.n:3d}  {row.psnr:.2f} dB")
