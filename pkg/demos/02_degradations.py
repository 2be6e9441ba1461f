"""The three degradation families on a synthetic image.

Writes PNGs to ./demo_out/degradations.
"""
from pathlib import Path

import numpy as np

from dlnet import data
from dlnet import degrade as dg

out = Path("demo_out/degradations")
x = data.gen_synthetic(1, 32, seed=3).images  # (1, 1, 32, 32) in [-1, 1]
data.save_png(x[0], out / "clean.png")

# a 12x12 hole, shifted up and left of centre
hole = dg.DegradationSpec(dg.INPAINT, (32, 32), {"s": 12, "offset": (-4, -3)})
# 60% of pixels removed at random
sparse = dg.DegradationSpec(dg.INTERPOLATE, (32, 32), {"r": 0.6}, seed=1)
# gaussian blur u=1.5, keep every second pixel, small noise
lowres = dg.DegradationSpec(dg.BLUR_DOWNSAMPLE, (32, 32), {"u": 1.5}, t=2, sigma=0.01, seed=2)

for spec in (hole, sparse, lowres):
    y = dg.apply_degradation(x, spec).data
    data.save_png(np.clip(y[0], -1, 1), out / f"{spec.kind}.png")
    print(f"{spec.kind:16s} observation {y.shape[2:]}  record: {dg.serialize_spec(spec)}")

# spec records round-trip exactly, which is how fixed test sets are replayed
assert dg.parse_spec(dg.serialize_spec(lowres)) == lowres

# random settings are drawn per sample from ranges
ranges = dg.SpecRanges(s_max=12)
print("sampled hole sizes:", [dg.sample_spec(dg.INPAINT, s, ranges).params["s"] for s in range(10)])
print("wrote", out)
