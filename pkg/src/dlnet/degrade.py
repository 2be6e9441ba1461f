"""Degradation operators: square holes, Bernoulli masks, Gaussian blur + downsampling.

An observation is ``y = down_t(W x) + noise`` where ``W`` is either an
entrywise binary mask (inpainting, interpolation; ``t = 1``, no noise) or a
blur with a 15x15 kernel.  Missing pixels are encoded as zeros in ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

INPAINT = "inpaint"
INTERPOLATE = "interpolate"
BLUR_DOWNSAMPLE = "blur_downsample"
KINDS = (INPAINT, INTERPOLATE, BLUR_DOWNSAMPLE)

KERNEL_SIZE = 15
KERNEL_PAD = KERNEL_SIZE // 2


class SpecError(ValueError):
    """A degradation spec violates its invariants or does not fit the image."""


def make_square_mask(h: int, w: int, s: int, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Ones everywhere except an s x s block of zeros near the image centre.

    The block's top-left corner is ``(h//2 - s//2 + dy, w//2 - s//2 + dx)``.
    """
    if not 1 <= s <= min(h, w):
        raise SpecError(f"hole side {s} outside [1, {min(h, w)}]")
    dy, dx = offset
    top = h // 2 - s // 2 + dy
    left = w // 2 - s // 2 + dx
    if top < 0 or left < 0 or top + s > h or left + s > w:
        raise SpecError(f"{s}x{s} hole at ({top}, {left}) falls outside a {h}x{w} image")
    mask = np.ones((h, w))
    mask[top:top + s, left:left + s] = 0.0
    return mask


def make_bernoulli_mask(h: int, w: int, r: float, seed: int) -> np.ndarray:
    """Drop every pixel independently with probability ``r``."""
    if not 0.0 <= r <= 1.0:
        raise SpecError(f"removal fraction {r} outside [0, 1]")
    rng = np.random.default_rng(seed)
    return (rng.random((h, w)) >= r).astype(np.float64)


def make_gaussian_kernel(u: float) -> np.ndarray:
    """Isotropic Gaussian of std ``u`` on a fixed 15x15 grid, summing to one.

    ``u = 0`` gives the delta kernel.
    """
    if not 0.0 <= u <= 3.0:
        raise SpecError(f"kernel width {u} outside [0, 3]")
    k = np.zeros((KERNEL_SIZE, KERNEL_SIZE))
    if u == 0:
        k[KERNEL_PAD, KERNEL_PAD] = 1.0
        return k
    ax = np.arange(KERNEL_SIZE) - KERNEL_PAD
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * u * u))
    return g / g.sum()


@dataclass
class DegradationSpec:
    """One degradation setting.

    ``mask`` (inpaint / interpolate) or ``kernel`` (blur_downsample) is
    materialised from ``params`` for an image of ``shape`` = (h, w) of the clean
    image.  ``seed`` drives the Bernoulli mask and the additive noise.
    """

    kind: str
    shape: tuple[int, int]
    params: dict = field(default_factory=dict)
    t: int = 1
    sigma: float = 0.0
    seed: int = 0
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)
    kernel: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        self.t = int(self.t)
        self.sigma = float(self.sigma)
        self.seed = int(self.seed)
        h, w = self.shape
        if self.kind == INPAINT:
            off = tuple(int(v) for v in self.params.get("offset", (0, 0)))
            self.params = {"s": int(self.params["s"]), "offset": off}
            if self.mask is None:
                self.mask = make_square_mask(h, w, self.params["s"], off)
        elif self.kind == INTERPOLATE:
            self.params = {"r": float(self.params["r"])}
            if self.mask is None:
                self.mask = make_bernoulli_mask(h, w, self.params["r"], self.seed)
        elif self.kind == BLUR_DOWNSAMPLE:
            self.params = {"u": float(self.params["u"])}
            if self.kernel is None:
                self.kernel = make_gaussian_kernel(self.params["u"])
        else:
            raise SpecError(f"unknown degradation kind {self.kind!r}")
        self.validate()

    def validate(self) -> None:
        if self.kind in (INPAINT, INTERPOLATE):
            if self.t != 1 or self.sigma != 0.0:
                raise SpecError(f"{self.kind} requires t=1 and sigma=0, got t={self.t}, sigma={self.sigma}")
            if self.mask is None or self.kernel is not None:
                raise SpecError(f"{self.kind} spec must carry a mask and no kernel")
            if self.mask.shape != self.shape or not np.all((self.mask == 0) | (self.mask == 1)):
                raise SpecError("mask must be binary and match the image shape")
        else:
            if self.t < 1 or self.sigma < 0:
                raise SpecError(f"need t >= 1 and sigma >= 0, got t={self.t}, sigma={self.sigma}")
            if self.kernel is None or self.mask is not None:
                raise SpecError("blur_downsample spec must carry a kernel and no mask")
            if np.any(self.kernel < 0) or abs(self.kernel.sum() - 1.0) > 1e-12:
                raise SpecError("blur kernel must be nonnegative and sum to 1")
            if self.shape[0] % self.t or self.shape[1] % self.t:
                raise SpecError(f"image shape {self.shape} not divisible by t={self.t}")

    @property
    def obs_shape(self) -> tuple[int, int]:
        return self.shape[0] // self.t, self.shape[1] // self.t

    @property
    def weight(self) -> float:
        """Fidelity prefactor: 1/(2 sigma^2), or 1 for noise-free settings."""
        return 1.0 / (2.0 * self.sigma ** 2) if self.sigma > 0 else 1.0

    def setting(self) -> tuple[str, str, float, int]:
        """Grouping key (task, param name, binned value, t) for evaluation tables."""
        if self.kind == INPAINT:
            return self.kind, "s", float(self.params["s"]), self.t
        if self.kind == INTERPOLATE:
            # 2.5% levels, reported by their lower edge
            level = min(int(np.floor(self.params["r"] * 40 + 1e-9)), 39)
            return self.kind, "r", round(level / 40, 4), self.t
        return self.kind, "u", round(float(self.params["u"]), 1), self.t

    def to_record(self) -> str:
        return serialize_spec(self)


def serialize_spec(spec: DegradationSpec) -> str:
    """One-line ``key=value`` record, e.g. ``kind=inpaint h=32 w=32 s=12 offset=3,-2 t=1 sigma=0 seed=7``."""
    parts = [f"kind={spec.kind}", f"h={spec.shape[0]}", f"w={spec.shape[1]}"]
    if spec.kind == INPAINT:
        dy, dx = spec.params["offset"]
        parts += [f"s={spec.params['s']}", f"offset={dy},{dx}"]
    elif spec.kind == INTERPOLATE:
        parts.append(f"r={spec.params['r']!r}")
    else:
        parts.append(f"u={spec.params['u']!r}")
    parts += [f"t={spec.t}", f"sigma={spec.sigma!r}", f"seed={spec.seed}"]
    return " ".join(parts)


def parse_spec(record: str) -> DegradationSpec:
    """Inverse of :func:`serialize_spec`."""
    try:
        kv = dict(item.split("=", 1) for item in record.split())
        kind = kv["kind"]
        shape = (int(kv["h"]), int(kv["w"]))
        if kind == INPAINT:
            dy, dx = (int(v) for v in kv.get("offset", "0,0").split(","))
            params = {"s": int(kv["s"]), "offset": (dy, dx)}
        elif kind == INTERPOLATE:
            params = {"r": float(kv["r"])}
        elif kind == BLUR_DOWNSAMPLE:
            params = {"u": float(kv["u"])}
        else:
            raise SpecError(f"unknown degradation kind {kind!r}")
        return DegradationSpec(kind, shape, params, t=int(kv.get("t", 1)),
                               sigma=float(kv.get("sigma", 0.0)), seed=int(kv.get("seed", 0)))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(f"malformed spec record {record!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# application

def blur(x: ad.Tensor, kernels) -> ad.Tensor:
    """Zero-padded 15x15 cross-correlation, one kernel per sample.

    ``kernels`` is (15, 15) shared by the batch or (n, 15, 15).
    """
    k = ad._as_tensor(kernels)
    cols = ad.unfold(x, KERNEL_SIZE, 1, KERNEL_PAD)
    if k.ndim == 2:
        return ad.einsum("ncuvkl,kl->ncuv", cols, k)
    if k.shape[0] != x.shape[0]:
        raise ad.DimensionError(f"{k.shape[0]} kernels for a batch of {x.shape[0]}")
    return ad.einsum("ncuvkl,nkl->ncuv", cols, k)


def degrade_clean(x: ad.Tensor, spec: DegradationSpec) -> ad.Tensor:
    """``down_t(W x)`` without noise; differentiable in ``x``."""
    x = ad._as_tensor(x)
    if x.ndim != 4 or x.shape[2:] != spec.shape:
        raise ad.DimensionError(f"image batch {x.shape} does not match spec shape {spec.shape}")
    if spec.kind in (INPAINT, INTERPOLATE):
        return ad.mul(x, ad.constant(spec.mask[None, None]))
    return ad.downsample(blur(x, spec.kernel), spec.t)


def noise(shape, sigma: float, seed: int) -> np.ndarray:
    return sigma * np.random.default_rng(seed).standard_normal(shape)


def apply_degradation(x, spec: DegradationSpec, seed: int | None = None) -> ad.Tensor:
    """Observation ``down_t(W x) + noise`` for every image in the batch ``x``.

    Noise (only when ``sigma > 0``) is drawn from ``seed``, defaulting to the
    spec's own seed.
    """
    spec.validate()
    y = degrade_clean(x, spec)
    if spec.sigma > 0:
        y = ad.add(y, ad.constant(noise(y.shape, spec.sigma, spec.seed if seed is None else seed)))
    return y


class BatchDegradation:
    """A batch of per-sample specs applied together.

    All specs must share the kind, image shape and ``t``; masks, kernels and
    noise levels may differ per sample.
    """

    def __init__(self, specs: Sequence[DegradationSpec]):
        if not specs:
            raise SpecError("empty spec batch")
        first = specs[0]
        for sp in specs:
            if sp.kind != first.kind or sp.shape != first.shape or sp.t != first.t:
                raise SpecError("batched specs must share kind, shape and t")
        self.specs = list(specs)
        self.kind = first.kind
        self.t = first.t
        self.shape = first.shape
        if self.kind in (INPAINT, INTERPOLATE):
            self.masks = np.stack([sp.mask for sp in specs])[:, None]
            self.kernels = None
        else:
            self.masks = None
            self.kernels = np.stack([sp.kernel for sp in specs])
        self.weights = np.array([sp.weight for sp in specs])

    def __len__(self):
        return len(self.specs)

    def clean(self, x) -> ad.Tensor:
        x = ad._as_tensor(x)
        if x.ndim != 4 or x.shape[0] != len(self) or x.shape[2:] != self.shape:
            raise ad.DimensionError(f"image batch {x.shape} does not match {len(self)} specs of shape {self.shape}")
        if self.masks is not None:
            return ad.mul(x, ad.constant(self.masks))
        return ad.downsample(blur(x, ad.constant(self.kernels)), self.t)

    def observe(self, x) -> np.ndarray:
        """Noisy observation as a plain array, each sample seeded by its own spec."""
        with ad.no_grad():
            y = self.clean(x).data.copy()
        for i, sp in enumerate(self.specs):
            if sp.sigma > 0:
                y[i] += noise(y[i].shape, sp.sigma, sp.seed)
        return y


# ---------------------------------------------------------------------------
# random settings

@dataclass(frozen=True)
class SpecRanges:
    """Sampling ranges for :func:`sample_spec`."""

    s_min: int = 1
    s_max: int = 30
    max_shift: int = 10
    fixed_offset: tuple[int, int] | None = None
    r_min: float = 0.0
    r_max: float = 0.75
    u_min: float = 0.0
    u_max: float = 3.0
    t: int = 1
    sigma: float = 0.0

    def check(self, shape: tuple[int, int], kind: str | None = None) -> None:
        """Validate the ranges; hole sizes only matter for ``kind`` inpaint (or ``None``)."""
        if kind in (None, INPAINT) and not 1 <= self.s_min <= self.s_max <= min(shape):
            raise SpecError(f"hole sizes [{self.s_min}, {self.s_max}] invalid for image {shape}")
        if self.max_shift < 0:
            raise SpecError("max_shift must be >= 0")
        if not 0.0 <= self.r_min <= self.r_max <= 1.0:
            raise SpecError(f"removal range [{self.r_min}, {self.r_max}] invalid")
        if not 0.0 <= self.u_min <= self.u_max <= 3.0:
            raise SpecError(f"kernel width range [{self.u_min}, {self.u_max}] invalid")
        if self.t < 1 or self.sigma < 0:
            raise SpecError("need t >= 1 and sigma >= 0")


def _clip_offset(h: int, w: int, s: int, dy: int, dx: int) -> tuple[int, int]:
    top0, left0 = h // 2 - s // 2, w // 2 - s // 2
    dy = int(np.clip(dy, -top0, h - s - top0))
    dx = int(np.clip(dx, -left0, w - s - left0))
    return dy, dx


def sample_spec(kind: str, seed: int, ranges: SpecRanges = SpecRanges(),
                shape: tuple[int, int] = (32, 32)) -> DegradationSpec:
    """Draw a setting uniformly from ``ranges``; deterministic in ``seed``."""
    ranges.check(shape, kind)
    rng = np.random.default_rng(seed)
    h, w = shape
    if kind == INPAINT:
        s = int(rng.integers(ranges.s_min, ranges.s_max + 1))
        if ranges.fixed_offset is not None:
            dy, dx = ranges.fixed_offset
        else:
            dy, dx = (int(v) for v in rng.integers(-ranges.max_shift, ranges.max_shift + 1, size=2))
        dy, dx = _clip_offset(h, w, s, dy, dx)
        return DegradationSpec(INPAINT, shape, {"s": s, "offset": (dy, dx)}, seed=seed)
    if kind == INTERPOLATE:
        r = float(rng.uniform(ranges.r_min, ranges.r_max))
        return DegradationSpec(INTERPOLATE, shape, {"r": r}, seed=seed)
    if kind == BLUR_DOWNSAMPLE:
        u = float(rng.uniform(ranges.u_min, ranges.u_max))
        return DegradationSpec(BLUR_DOWNSAMPLE, shape, {"u": u}, t=ranges.t, sigma=ranges.sigma, seed=seed)
    raise SpecError(f"unknown degradation kind {kind!r}")
