"""Restoration networks split into a deep trunk ``g`` and a one-conv head ``h``.

``Network.layers[:split_idx]`` is ``g``; the rest is ``h`` and always starts
with the ReLU that follows the latent ``z``, then a single convolution and an
optional output nonlinearity or global residual.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

CONV, DECONV, CHANNEL_FC, RELU, TANH, RESIDUAL = (
    "Conv", "Deconv", "ChannelFC", "ReLU", "Tanh", "ResidualAdd",
)


@dataclass
class LayerCfg:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    k: int = 0
    stride: int = 1
    padding: int = 0
    spatial: int = 0  # ChannelFC: spatial positions per channel
    bias: bool = True
    params: list[ad.Tensor] = field(default_factory=list, repr=False)

    def __call__(self, x: ad.Tensor, skip: ad.Tensor | None = None) -> ad.Tensor:
        if self.kind == CONV:
            w, b = self._wb()
            return ad.conv2d(x, w, self.stride, self.padding, bias=b)
        if self.kind == DECONV:
            w, b = self._wb()
            return ad.conv_transpose2d(x, w, self.stride, self.padding, bias=b)
        if self.kind == CHANNEL_FC:
            n, c, hh, ww = x.shape
            flat = ad.reshape(x, (n, c, hh * ww))
            out = ad.einsum("ncp,cpq->ncq", flat, self.params[0])
            return ad.reshape(out, (n, c, hh, ww))
        if self.kind == RELU:
            return ad.relu(x)
        if self.kind == TANH:
            return ad.tanh(x)
        if self.kind == RESIDUAL:
            if skip is None:
                raise ValueError("ResidualAdd needs the network input")
            return ad.add(x, skip)
        raise ValueError(f"unknown layer kind {self.kind!r}")

    def _wb(self):
        return self.params[0], (self.params[1] if self.bias else None)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("kind", "in_ch", "out_ch", "k", "stride", "padding", "spatial", "bias")}


@dataclass
class Network:
    layers: list[LayerCfg]
    split_idx: int
    out_range: str = "tanh"  # or "linear"
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        head = [l.kind for l in self.layers[self.split_idx:]]
        convs = [k for k in head if k in (CONV, DECONV)]
        if not head or head[0] != RELU or len(convs) != 1 or head[1] != CONV:
            raise ValueError(f"head must be ReLU followed by a single Conv, got {head}")

    @property
    def params(self) -> list[ad.Tensor]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def g_params(self) -> list[ad.Tensor]:
        return [p for layer in self.layers[:self.split_idx] for p in layer.params]

    @property
    def h_params(self) -> list[ad.Tensor]:
        return [p for layer in self.layers[self.split_idx:] for p in layer.params]

    @property
    def needs_skip(self) -> bool:
        return any(l.kind == RESIDUAL for l in self.layers)

    def forward_g(self, y_in: ad.Tensor) -> ad.Tensor:
        x = y_in
        for layer in self.layers[:self.split_idx]:
            x = layer(x, y_in)
        return x

    def forward_h(self, z: ad.Tensor, skip: ad.Tensor | None = None) -> ad.Tensor:
        x = z
        for layer in self.layers[self.split_idx:]:
            x = layer(x, skip)
        return x

    def __call__(self, y_in: ad.Tensor) -> ad.Tensor:
        return self.forward_h(self.forward_g(y_in), y_in)

    def get_values(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def set_values(self, values) -> None:
        params = self.params
        if len(values) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(values)}")
        for p, v in zip(params, values):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"parameter shape {p.shape} != {v.shape}")
            p.data = v.copy()


def param_count(net: Network) -> int:
    return int(sum(p.size for p in net.params))


def forward_g(net: Network, y_in: ad.Tensor) -> ad.Tensor:
    return net.forward_g(y_in)


def forward_h(net: Network, z: ad.Tensor, skip: ad.Tensor | None = None) -> ad.Tensor:
    return net.forward_h(z, skip)


# ---------------------------------------------------------------------------
# builders

def _msra(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _conv(rng, kind, cin, cout, k, stride, padding, zero=False) -> LayerCfg:
    layer = LayerCfg(kind, cin, cout, k, stride, padding)
    # conv2d weight layout (o, c, kh, kw); a deconv reuses it with o = its input channels
    wshape = (cout, cin, k, k) if kind == CONV else (cin, cout, k, k)
    # a stride-s deconv output sees k*k/s^2 taps per input channel
    fan_in = cin * k * k if kind == CONV else cin * k * k // (stride * stride)
    w = np.zeros(wshape) if zero else _msra(rng, wshape, fan_in)
    layer.params = [ad.Tensor(w, requires_grad=True), ad.Tensor(np.zeros(cout), requires_grad=True)]
    return layer


def build_autoencoder(img: int = 32, base_ch: int = 8, seed: int = 0, in_ch: int = 1) -> Network:
    """Encoder-decoder with a channel-wise fully connected bottleneck.

    Stride-2 4x4 convolutions halve the image down to 4x4, doubling the width
    each stage from ``base_ch``; deconvolutions mirror them back up.  The last
    decoder map (before its ReLU) is the latent ``z``; the head is ReLU, a 3x3
    conv to ``in_ch`` channels, and tanh.
    """
    if img < 16 or img & (img - 1):
        raise ValueError(f"image side must be a power of two >= 16, got {img}")
    rng = np.random.default_rng(seed)
    depth = int(np.log2(img // 4))
    widths = [base_ch * 2 ** i for i in range(depth)]
    layers: list[LayerCfg] = []
    cin = in_ch
    for wd in widths:
        layers += [_conv(rng, CONV, cin, wd, 4, 2, 1), LayerCfg(RELU)]
        cin = wd
    fc = LayerCfg(CHANNEL_FC, cin, cin, spatial=16, bias=False)
    fc.params = [ad.Tensor(rng.normal(0.0, 0.02, size=(cin, 16, 16)), requires_grad=True)]
    layers += [fc, LayerCfg(RELU)]
    outs = widths[::-1][1:] + [base_ch]
    for i, wd in enumerate(outs):
        layers.append(_conv(rng, DECONV, cin, wd, 4, 2, 1))
        if i < len(outs) - 1:
            layers.append(LayerCfg(RELU))
        cin = wd
    split = len(layers)
    layers += [LayerCfg(RELU), _conv(rng, CONV, cin, in_ch, 3, 1, 1), LayerCfg(TANH)]
    arch = {"type": "autoencoder", "img": img, "base_ch": base_ch, "seed": seed, "in_ch": in_ch}
    return Network(layers, split, "tanh", arch)


def build_sisr_net(depth: int = 6, ch: int = 16, seed: int = 0, in_ch: int = 1,
                   zero_head: bool = False) -> Network:
    """VDSR-style residual net for bicubic-upscaled input.

    ``depth`` 3x3 convolutions; the first ``depth - 1`` form ``g`` (its last
    map, before ReLU, is ``z``), the head is ReLU, the last conv, and the global
    residual add.
    """
    if depth < 3:
        raise ValueError(f"depth must be >= 3, got {depth}")
    rng = np.random.default_rng(seed)
    layers = [_conv(rng, CONV, in_ch, ch, 3, 1, 1)]
    for _ in range(depth - 2):
        layers += [LayerCfg(RELU), _conv(rng, CONV, ch, ch, 3, 1, 1)]
    split = len(layers)
    layers += [LayerCfg(RELU), _conv(rng, CONV, ch, in_ch, 3, 1, 1, zero=zero_head), LayerCfg(RESIDUAL)]
    arch = {"type": "sisr", "depth": depth, "ch": ch, "seed": seed, "in_ch": in_ch, "zero_head": zero_head}
    return Network(layers, split, "linear", arch)


def build_from_arch(arch: dict) -> Network:
    arch = dict(arch)
    kind = arch.pop("type")
    if kind == "autoencoder":
        return build_autoencoder(**arch)
    if kind == "sisr":
        return build_sisr_net(**arch)
    raise ValueError(f"unknown architecture {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON header
# (architecture, metadata, parameter shapes), then all parameters as
# little-endian float64 in layer order.

MAGIC = b"DLNETCKP"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(net: Network, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shapes = [list(p.shape) for p in net.params]
    header = {
        "version": VERSION,
        "arch": net.arch,
        "split_idx": net.split_idx,
        "layers": [l.to_dict() for l in net.layers],
        "shapes": shapes,
        "param_count": param_count(net),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        for p in net.params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    side = {k: header[k] for k in ("version", "arch", "split_idx", "shapes", "param_count", "meta")}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(fh.read(hlen).decode())


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild the network and return ``(net, meta)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode())
    net = build_from_arch(header["arch"])
    shapes = [tuple(s) for s in header["shapes"]]
    if shapes != [p.shape for p in net.params]:
        raise CheckpointError(f"{path}: parameter shapes do not match architecture")
    flat = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    total = int(sum(int(np.prod(s)) for s in shapes))
    if flat.size != total:
        raise CheckpointError(f"{path}: expected {total} values, found {flat.size}")
    values, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        values.append(flat[off:off + n].astype(np.float64).reshape(s))
        off += n
    net.set_values(values)
    return net, header.get("meta", {})
