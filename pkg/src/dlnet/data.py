"""Images in [-1, 1]: synthetic generation, PNG I/O, bicubic resizing, fixed test sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import degrade as dg

MANIFEST_VERSION = 1


@dataclass
class Dataset:
    """Images as an (N, c, h, w) float64 array in [-1, 1]."""

    images: np.ndarray
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.clip(np.asarray(self.images, dtype=np.float64), -1.0, 1.0)
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError(f"dataset must be a nonempty (N, c, h, w) array, got {self.images.shape}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], dict(self.source, subset=True))


# ---------------------------------------------------------------------------
# synthetic images

def _synth_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2.0 - 1.0
    img = rng.uniform(-0.6, 0.6) + rng.uniform(-0.4, 0.4) * xx + rng.uniform(-0.4, 0.4) * yy
    # band-limited texture
    for _ in range(rng.integers(1, 4)):
        fx, fy = rng.uniform(-3.0, 3.0, size=2) * np.pi
        img = img + rng.uniform(0.02, 0.15) * np.sin(fx * xx + fy * yy + rng.uniform(0, 2 * np.pi))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(-0.8, 0.8, size=2)
        ry, rx = rng.uniform(0.15, 0.6, size=2)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (c * (xx - cx) + s * (yy - cy)) / rx
        v = (-s * (xx - cx) + c * (yy - cy)) / ry
        inside = u ** 2 + v ** 2 <= 1.0
        img = np.where(inside, rng.uniform(-0.9, 0.9), img)
    for _ in range(rng.integers(0, 3)):
        y0, x0 = rng.uniform(-1.0, 0.6, size=2)
        hgt, wid = rng.uniform(0.2, 0.8, size=2)
        box = (yy >= y0) & (yy <= y0 + hgt) & (xx >= x0) & (xx <= x0 + wid)
        img = np.where(box, rng.uniform(-0.9, 0.9), img)
    return np.clip(img, -1.0, 1.0)


def gen_synthetic(n: int, size: int = 32, seed: int = 0) -> Dataset:
    """``n`` grayscale images mixing gradients, sinusoids, ellipses and boxes.

    Image ``i`` depends only on ``(seed, i, size)``.
    """
    if size not in (16, 32, 64):
        raise ValueError(f"size must be 16, 32 or 64, got {size}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    imgs = np.empty((n, 1, size, size))
    for i in range(n):
        imgs[i, 0] = _synth_image(np.random.default_rng([seed, i]), size)
    return Dataset(imgs, {"type": "synthetic", "seed": seed, "n": n, "size": size})


# ---------------------------------------------------------------------------
# PNG

def to_uint8(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> {0..255}, rounding half up."""
    p = np.floor((np.clip(x, -1.0, 1.0) + 1.0) * 127.5 + 0.5)
    return np.clip(p, 0, 255).astype(np.uint8)


def from_uint8(p: np.ndarray) -> np.ndarray:
    return p.astype(np.float64) * (2.0 / 255.0) - 1.0


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap to the values an 8-bit PNG can hold."""
    return from_uint8(to_uint8(x))


def save_png(x, path) -> Path:
    """Write a (c, h, w) or (h, w) image in [-1, 1] as an 8-bit PNG (c in {1, 3})."""
    arr = np.asarray(getattr(x, "data", x))
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else np.transpose(arr, (1, 2, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr)).save(path)
    return path


def load_png(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG as a (c, h, w) array in [-1, 1]."""
    try:
        im = Image.open(path)
        im.load()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if im.mode in ("L", "P", "1"):
        arr = np.asarray(im.convert("L"))[None]
    elif im.mode in ("RGB", "RGBA"):
        arr = np.transpose(np.asarray(im.convert("RGB")), (2, 0, 1))
    else:
        raise ValueError(f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit gray or RGB)")
    return from_uint8(arr)


def load_dir(path) -> Dataset:
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files in {path}")
    imgs = [load_png(f) for f in files]
    if len({im.shape for im in imgs}) != 1:
        raise ValueError(f"images in {path} do not share one shape")
    return Dataset(np.stack(imgs), {"type": "directory", "path": str(path), "files": [f.name for f in files]})


def save_dataset(ds: Dataset, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ds.images):
        save_png(img, out / f"{i:06d}.png")
    (out / "source.json").write_text(json.dumps(ds.source, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------------------
# bicubic

def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax ** 2, ax ** 3
    return np.where(
        ax <= 1, (a + 2) * ax3 - (a + 3) * ax2 + 1,
        np.where(ax < 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0),
    )


def cubic_matrix(n_in: int, n_out: int, scale: float, antialias: bool = True) -> np.ndarray:
    """(n_out, n_in) resampling matrix: Catmull-Rom, half-pixel centres, clamped edges.

    When shrinking with ``antialias`` the kernel is stretched by ``1/scale``.
    """
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    half = 2.0 * stretch
    taps = np.arange(int(np.floor(-half)), int(np.ceil(half)) + 2)
    left = np.floor(centers).astype(int)
    idx = left[:, None] + taps[None, :]
    w = _cubic((centers[:, None] - idx) / stretch)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), idx.shape[1]), np.clip(idx, 0, n_in - 1).ravel()), w.ravel())
    return mat


def bicubic_resize(x, scale: float, antialias: bool = True) -> np.ndarray:
    """Resize the last two axes of ``x`` by ``scale`` (output side ``round(side * scale)``)."""
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    h, w = arr.shape[-2:]
    oh, ow = int(round(h * scale)), int(round(w * scale))
    rh = cubic_matrix(h, oh, oh / h, antialias)
    rw = cubic_matrix(w, ow, ow / w, antialias)
    return np.einsum("ij,...jk,lk->...il", rh, arr, rw)


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma in [16, 235] from a (3, h, w) RGB image in [0, 255]."""
    r, g, b = rgb
    return 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0


# ---------------------------------------------------------------------------
# fixed test sets

@dataclass
class TestSet:
    """Degraded/clean pairs plus the specs that produced them.

    ``y`` holds exact float observations; ``x`` the (8-bit quantised) clean
    images.  ``ids`` are ``<image>_<k>`` strings.
    """

    __test__ = False  # not a pytest class

    task: str
    x: np.ndarray
    y: np.ndarray
    specs: list
    ids: list
    seed: int = 0

    def __len__(self) -> int:
        return len(self.specs)

    def network_input(self, idx=slice(None)) -> np.ndarray:
        """What the network sees: ``y`` itself, or ``y`` bicubic-upscaled back to ``x``'s size."""
        y = self.y[idx]
        t = self.specs[0].t
        return y if t == 1 else bicubic_resize(y, t)


def _entry_seed(seed: int, image: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, image, k]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def _observe(x: np.ndarray, specs) -> np.ndarray:
    return dg.BatchDegradation(specs).observe(x)


def build_fixed_testset(ds: Dataset, task: str, n_specs_per_image: int = 10, seed: int = 0,
                        ranges: dg.SpecRanges = dg.SpecRanges(), out_dir=None) -> TestSet:
    """Degrade every image with ``n_specs_per_image`` independently sampled settings.

    With ``out_dir`` the set is written as ``<out_dir>/<task>/manifest.txt``,
    ``<id>_gt.png`` / ``<id>_deg.png`` and an exact ``pairs.npz`` cache, then
    replayed from disk and checked against the in-memory pairs.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    shape = ds.shape
    xs, specs, ids, images = [], [], [], []
    for i in range(len(ds)):
        for k in range(n_specs_per_image):
            specs.append(dg.sample_spec(task, _entry_seed(seed, i, k), ranges, shape))
            ids.append(f"{i:06d}_{k:02d}")
            images.append(i)
    x = quantize(ds.images[np.array(images)])
    y = _observe(x, specs)
    ts = TestSet(task, x, y, specs, ids, seed)
    if out_dir is not None:
        write_testset(ts, images, out_dir)
        replay = load_testset(Path(out_dir) / task)
        if not (np.array_equal(replay.x, ts.x) and np.array_equal(replay.y, ts.y)):
            raise RuntimeError("test set replay does not reproduce the cached pairs")
    return ts


def write_testset(ts: TestSet, images, out_dir) -> Path:
    root = Path(out_dir) / ts.task
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"# dlnet test manifest",
             f"version={MANIFEST_VERSION} task={ts.task} seed={ts.seed} entries={len(ts)}"]
    for i, (tid, sp) in enumerate(zip(ts.ids, ts.specs)):
        save_png(ts.x[i], root / f"{tid}_gt.png")
        save_png(np.clip(ts.y[i], -1, 1), root / f"{tid}_deg.png")
        lines.append(f"id={tid} image={images[i]} {dg.serialize_spec(sp)}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    np.savez(root / "pairs.npz", x=ts.x, y=ts.y)
    return root


def read_manifest(path) -> tuple[dict, list[tuple[str, dg.DegradationSpec]]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}")
    header: dict = {}
    entries = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("version="):
            header = dict(kv.split("=", 1) for kv in line.split())
            continue
        kv = line.split()
        tid = kv[0].split("=", 1)[1]
        rest = " ".join(p for p in kv[1:] if not p.startswith("image="))
        entries.append((tid, dg.parse_spec(rest)))
    if int(header.get("version", -1)) != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {header.get('version')}")
    return header, entries


def load_testset(root) -> TestSet:
    """Replay a test set: reload clean PNGs and regenerate observations from the manifest."""
    root = Path(root)
    header, entries = read_manifest(root)
    x = np.stack([load_png(root / f"{tid}_gt.png") for tid, _ in entries])
    specs = [sp for _, sp in entries]
    y = _observe(x, specs)
    return TestSet(header["task"], x, y, specs, [tid for tid, _ in entries], int(header.get("seed", 0)))


def load_cached_testset(root) -> TestSet:
    """Read ``pairs.npz`` without regenerating observations."""
    root = Path(root)
    header, entries = read_manifest(root)
    cache = np.load(root / "pairs.npz")
    return TestSet(header["task"], cache["x"], cache["y"], [sp for _, sp in entries],
                   [tid for tid, _ in entries], int(header.get("seed", 0)))
