"""Joint, naive-likelihood and unrolled-refinement training on the toy benchmark.

Everything comes from dlnet.bench, which caches each run on disk; a cold
cache means about an hour and a half of training on one core.
"""
import numpy as np

from dlnet import bench
from dlnet import degrade as dg

cfg = bench.ToyConfig()
S = bench.SEEDS

def mean(xs):
    return float(np.mean(xs))

joint = {t: mean([bench.joint(cfg, t, s)[0]["psnr"] for s in S]) for t in (dg.INPAINT, dg.INTERPOLATE)}
dl_inp = mean([bench.dlnet(cfg, dg.INPAINT, s, bench.INPAINT_HYPER)[0]["psnr"] for s in S])
dl_int = mean([bench.dlnet(cfg, dg.INTERPOLATE, s, bench.INTERP_HYPER)[0]["psnr"] for s in S])

print("mean PSNR (dB) over", len(S), "seeds")
print(f"{'':24s}{'inpaint':>10s}{'interp':>10s}")
print(f"{'joint':24s}{joint[dg.INPAINT]:10.3f}{joint[dg.INTERPOLATE]:10.3f}")
for lam in bench.NAIVE_LAMBDAS:
    v = mean([bench.naive(cfg, dg.INPAINT, s, lam)["psnr"] for s in S])
    print(f"{f'naive lam={lam}':24s}{v:10.3f}{'':>10s}")
print(f"{'unrolled K=5':24s}{dl_inp:10.3f}{dl_int:10.3f}")

# training loss after 20 epochs from scratch, by unroll length (K=0 is the joint run)
for K in bench.CURVE_KS:
    losses = [bench.curve(cfg, dg.INPAINT, s, K, bench.CURVE_EPOCHS)[-1] for s in S]
    print(f"K={K}: median epoch-{bench.CURVE_EPOCHS} loss {np.median(losses):.5f}")
