"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written in terms of the same differentiable ops it
differentiates, so running :func:`grad` with ``create_graph=True`` records the
backward pass itself and gradients of gradients come for free.  The
convolution, its input adjoint and its kernel adjoint form a closed triple;
``unfold``/``fold`` and a two-operand ``einsum`` cover the per-sample blur.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "DimensionError",
    "DomainError",
    "GraphReleasedError",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sqrt",
    "scale",
    "elementwise",
    "relu",
    "tanh",
    "sum",
    "mean",
    "sq_norm",
    "reduce",
    "reshape",
    "sum_to",
    "broadcast_to",
    "einsum",
    "unfold",
    "fold",
    "conv2d",
    "conv_transpose2d",
    "downsample",
    "upsample_zeros",
    "grad",
    "backward",
    "grad_check",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ArithmeticError, ValueError):
    """Input outside an op's domain, e.g. sqrt of a negative number."""


class GraphReleasedError(RuntimeError):
    """Raised when backpropagating a second time through a freed graph."""


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    """Context manager that stops ops from recording graph nodes."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """A float64 array plus an optional reference to the op that produced it.

    Leaves are tensors without a node.  A leaf with ``requires_grad=False`` is a
    constant.
    """

    __slots__ = ("data", "requires_grad", "node", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: Function | None = None
        self.grad: Tensor | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = flag
        return self

    def __repr__(self) -> str:
        tag = f", node={type(self.node).__name__}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


class Function:
    """Graph node.  ``backward`` must build its result from differentiable ops."""

    __slots__ = ("inputs", "released")

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.released = False

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gout: Tensor, needs: Sequence[bool]) -> Sequence[Tensor | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        for key, val in kwargs.items():
            setattr(fn, key, val)
        out = Tensor(fn.forward(*(t.data for t in inputs)))
        if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = fn
        return out


# ---------------------------------------------------------------------------
# broadcasting helpers

class SumTo(Function):
    __slots__ = ("shape", "in_shape")

    def forward(self, a):
        self.in_shape = a.shape
        return _sum_to_array(a, self.shape)

    def backward(self, g, needs):
        return (broadcast_to(g, self.in_shape),)


class BroadcastTo(Function):
    __slots__ = ("shape", "in_shape")

    def forward(self, a):
        self.in_shape = a.shape
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, g, needs):
        return (sum_to(g, self.in_shape),)


def _sum_to_array(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if a.shape == tuple(shape):
        return a
    lead = a.ndim - len(shape)
    out = a.sum(axis=tuple(range(lead))) if lead > 0 else a
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return SumTo.apply(x, shape=shape)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return BroadcastTo.apply(x, shape=shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

class Add(Function):
    __slots__ = ()

    def forward(self, a, b):
        return a + b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )


class Sub(Function):
    __slots__ = ()

    def forward(self, a, b):
        return a - b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )


class Mul(Function):
    __slots__ = ()

    def forward(self, a, b):
        return a * b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )


class Div(Function):
    __slots__ = ()

    def forward(self, a, b):
        return a / b

    def backward(self, g, needs):
        a, b = self.inputs
        ga = gb = None
        if needs[0]:
            ga = sum_to(div(g, b), a.shape)
        if needs[1]:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb


class Neg(Function):
    __slots__ = ()

    def forward(self, a):
        return -a

    def backward(self, g, needs):
        return (neg(g),)


class Sqrt(Function):
    __slots__ = ()

    def forward(self, a):
        if np.any(a < 0):
            idx = tuple(int(i) for i in np.unravel_index(int(np.argmin(a)), a.shape))
            raise DomainError(f"sqrt: negative input {float(a[idx]):g} at index {idx}")
        return np.sqrt(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        # d sqrt(a) = 1 / (2 sqrt(a)), taken as 0 where a == 0
        r = sqrt(a)
        inv = Tensor(np.where(r.data > 0, 0.0, 1.0))
        return (div(g, mul(2.0, r) + inv) * (1.0 - inv),)


class Relu(Function):
    __slots__ = ()

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g, needs):
        (a,) = self.inputs
        # subgradient 0 at the kink
        return (mul(g, constant((a.data > 0).astype(np.float64))),)


class Tanh(Function):
    __slots__ = ()

    def forward(self, a):
        return np.tanh(a)

    def backward(self, g, needs):
        (a,) = self.inputs
        t = tanh(a)
        return (mul(g, 1.0 - mul(t, t)),)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    return Div.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(_as_tensor(a))


def sqrt(a) -> Tensor:
    return Sqrt.apply(_as_tensor(a))


def scale(a, alpha: float) -> Tensor:
    return mul(a, float(alpha))


def relu(a) -> Tensor:
    return Relu.apply(_as_tensor(a))


def tanh(a) -> Tensor:
    return Tanh.apply(_as_tensor(a))


_ELEMENTWISE: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sqrt": lambda a, b=None: sqrt(a),
    "scale": scale,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch one of ``add, sub, mul, div, sqrt, scale`` by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    return sum_to(x, ())


def mean(x) -> Tensor:
    x = _as_tensor(x)
    return mul(sum(x), 1.0 / max(x.size, 1))


def sq_norm(x) -> Tensor:
    x = _as_tensor(x)
    return sum(mul(x, x))


def reduce(op: str, x) -> Tensor:
    if op == "sum":
        return sum(x)
    if op == "mean":
        return mean(x)
    if op == "sq_norm":
        return sq_norm(x)
    raise ValueError(f"unknown reduction {op!r}")


class Reshape(Function):
    __slots__ = ("shape", "in_shape")

    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.shape)

    def backward(self, g, needs):
        return (reshape(g, self.in_shape),)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    return Reshape.apply(x, shape=shape)


# ---------------------------------------------------------------------------
# bilinear contraction

class Einsum(Function):
    __slots__ = ("subs",)

    def forward(self, a, b):
        return np.einsum(self.subs, a, b, optimize=True)

    def backward(self, g, needs):
        lhs, out = self.subs.split("->")
        sa, sb = lhs.split(",")
        ga = einsum(f"{out},{sb}->{sa}", g, self.inputs[1]) if needs[0] else None
        gb = einsum(f"{sa},{out}->{sb}", self.inputs[0], g) if needs[1] else None
        return ga, gb


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum.

    Every index of one operand must appear in the other operand or in the
    output, so that both adjoints are again einsums.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    if len(sa) != a.ndim or len(sb) != b.ndim:
        raise DimensionError(f"einsum {subscripts!r}: operand shapes {a.shape} and {b.shape}")
    for idx in set(sa) | set(sb):
        if (idx in sa) != (idx in sb) and idx not in out:
            raise ValueError(f"einsum {subscripts!r}: index {idx!r} is summed out of one operand")
    return Einsum.apply(a, b, subs=f"{sa},{sb}->{out}")


# ---------------------------------------------------------------------------
# patch extraction

def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


class Unfold(Function):
    """(n, c, H, W) -> (n, c, H', W', kh, kw) sliding patches."""

    __slots__ = ("k", "stride", "pad", "in_hw")

    def forward(self, x):
        kh, kw = self.k
        self.in_hw = x.shape[2:]
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        s = self.stride
        return win[:, :, ::s, ::s] if s > 1 else win

    def backward(self, g, needs):
        return (fold(g, self.k, self.stride, self.pad, self.in_hw),)


class Fold(Function):
    """Adjoint of :class:`Unfold`: scatter-add patches back into an image."""

    __slots__ = ("k", "stride", "pad", "out_hw")

    def forward(self, cols):
        n, c, oh, ow, kh, kw = cols.shape
        H, W = self.out_hw
        p, s = self.pad, self.stride
        out = np.zeros((n, c, H + 2 * p, W + 2 * p))
        for i in range(kh):
            for j in range(kw):
                out[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += cols[:, :, :, :, i, j]
        return out[:, :, p:p + H, p:p + W] if p else out

    def backward(self, g, needs):
        return (unfold(g, self.k, self.stride, self.pad),)


def _pair(k) -> tuple[int, int]:
    return (int(k), int(k)) if np.isscalar(k) else (int(k[0]), int(k[1]))


def unfold(x: Tensor, k, stride: int = 1, padding: int = 0) -> Tensor:
    kh, kw = _pair(k)
    if x.ndim != 4:
        raise DimensionError(f"unfold expects (n, c, h, w), got {x.shape}")
    h, w = x.shape[2:]
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {(kh, kw)} larger than padded input {x.shape}")
    return Unfold.apply(x, k=(kh, kw), stride=int(stride), pad=int(padding))


def fold(cols: Tensor, k, stride: int, padding: int, out_hw) -> Tensor:
    kh, kw = _pair(k)
    H, W = out_hw
    if cols.ndim != 6 or cols.shape[4:] != (kh, kw):
        raise DimensionError(f"fold expects (n, c, h', w', {kh}, {kw}), got {cols.shape}")
    if (_out_size(H, kh, stride, padding), _out_size(W, kw, stride, padding)) != cols.shape[2:4]:
        raise DimensionError(f"fold: patch grid {cols.shape[2:4]} does not tile output {(H, W)}")
    return Fold.apply(cols, k=(kh, kw), stride=int(stride), pad=int(padding), out_hw=(int(H), int(W)))


# ---------------------------------------------------------------------------
# convolution family
#
# conv (y = x * W), its input adjoint conv_t and its kernel adjoint conv_w are
# bilinear and each one's derivatives are expressed through the other two.

def _im2col(x: np.ndarray, kh: int, kw: int, s: int, p: int) -> np.ndarray:
    """(n, c, H, W) -> (c*kh*kw, n*oh*ow) patch matrix."""
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)
    n, c, Hp, Wp = xp.shape
    oh, ow = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(c, kh, kw, n, oh, ow), strides=(sc, sh, sw, sn, sh * s, sw * s), writeable=False
    )
    return view.reshape(c * kh * kw, n * oh * ow)


def _col2im(cols: np.ndarray, n: int, c: int, hw, kh: int, kw: int, s: int, p: int) -> np.ndarray:
    H, W = hw
    oh, ow = _out_size(H, kh, s, p), _out_size(W, kw, s, p)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros((c, n, H + 2 * p, W + 2 * p))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += cols[:, i, j]
    if p:
        out = out[:, :, p:p + H, p:p + W]
    return out.transpose(1, 0, 2, 3)


def _as_rows(g: np.ndarray) -> np.ndarray:
    """(n, o, oh, ow) -> (o, n*oh*ow)."""
    return g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)


class _ConvBase(Function):
    __slots__ = ("stride", "pad", "in_hw", "ksize")


def _flat_padded(x: np.ndarray, p: int) -> np.ndarray:
    """(n, c, H, W) -> (c, n*(H+2p)*(W+2p)), zero padded and contiguous."""
    n, c, H, W = x.shape
    out = np.zeros((c, n, H + 2 * p, W + 2 * p))
    out[:, :, p:p + H, p:p + W] = x.transpose(1, 0, 2, 3)
    return out.reshape(c, -1)


def _conv_np(x: np.ndarray, w: np.ndarray, s: int, p: int) -> np.ndarray:
    o, c, kh, kw = w.shape
    n = x.shape[0]
    oh, ow = _out_size(x.shape[2], kh, s, p), _out_size(x.shape[3], kw, s, p)
    if s == 1 and o < c:
        # few output channels: one (taps*o, c) matmul, then sum the shifted taps
        hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
        y = (w.transpose(2, 3, 0, 1).reshape(kh * kw * o, c) @ _flat_padded(x, p)).reshape(kh, kw, o, n, hp, wp)
        out = y[0, 0, :, :, :oh, :ow].copy()
        for i in range(kh):
            for j in range(kw):
                if i or j:
                    out += y[i, j, :, :, i:i + oh, j:j + ow]
        return out.transpose(1, 0, 2, 3)
    y = w.reshape(o, -1) @ _im2col(x, kh, kw, s, p)
    return y.reshape(o, n, oh, ow).transpose(1, 0, 2, 3)


def _conv_w_np(x: np.ndarray, g: np.ndarray, s: int, p: int, ksize) -> np.ndarray:
    kh, kw = ksize
    n, o, oh, ow = g.shape
    c = x.shape[1]
    if s == 1 and o < c:
        # same layout as the forward shortcut; each tap is an offset view, no patch copies
        hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
        xf = _flat_padded(x, p)
        gf = np.zeros((o, n, hp, wp))
        gf[:, :, :oh, :ow] = g.transpose(1, 0, 2, 3)
        gf = gf.reshape(o, -1)
        total = xf.shape[1]
        dw = np.empty((o, c, kh, kw))
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                dw[:, :, i, j] = gf[:, :total - off] @ xf[:, off:].T
        return dw
    dw = _as_rows(g) @ _im2col(x, kh, kw, s, p).T
    return dw.reshape(o, c, kh, kw)


class Conv(_ConvBase):
    def forward(self, x, w):
        self.in_hw, self.ksize = x.shape[2:], w.shape[2:]
        return _conv_np(x, w, self.stride, self.pad)

    def backward(self, g, needs):
        x, w = self.inputs
        gx = _conv_t(g, w, self.stride, self.pad, self.in_hw) if needs[0] else None
        gw = _conv_w(x, g, self.stride, self.pad, self.ksize) if needs[1] else None
        return gx, gw


class ConvT(_ConvBase):
    """Input adjoint of :class:`Conv`: (n, o, oh, ow) with kernel (o, c, kh, kw) -> (n, c, H, W)."""

    def forward(self, g, w):
        o, c, kh, kw = w.shape
        if self.stride == 1 and self.pad < min(kh, kw) and kh == kw:
            # stride 1: correlation with the flipped, channel-swapped kernel
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            return _conv_np(g, wf, 1, kh - 1 - self.pad)
        cols = w.reshape(o, -1).T @ _as_rows(g)
        return _col2im(cols, g.shape[0], c, self.in_hw, kh, kw, self.stride, self.pad)

    def backward(self, gx, needs):
        g, w = self.inputs
        gg = _conv(gx, w, self.stride, self.pad) if needs[0] else None
        gw = _conv_w(gx, g, self.stride, self.pad, w.shape[2:]) if needs[1] else None
        return gg, gw


class ConvW(_ConvBase):
    """Kernel adjoint of :class:`Conv`: (x, g) -> (o, c, kh, kw)."""

    def forward(self, x, g):
        return _conv_w_np(x, g, self.stride, self.pad, self.ksize)

    def backward(self, gw, needs):
        x, g = self.inputs
        gx = _conv_t(g, gw, self.stride, self.pad, x.shape[2:]) if needs[0] else None
        gg = _conv(x, gw, self.stride, self.pad) if needs[1] else None
        return gx, gg


def _conv(x, w, stride, pad):
    return Conv.apply(x, w, stride=stride, pad=pad)


def _conv_t(g, w, stride, pad, out_hw):
    return ConvT.apply(g, w, stride=stride, pad=pad, in_hw=tuple(out_hw))


def _conv_w(x, g, stride, pad, ksize):
    return ConvW.apply(x, g, stride=stride, pad=pad, ksize=tuple(ksize))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of (n, c, h, w) input with an (o, c, kh, kw) kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    kh, kw = kernel.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    out = _conv(x, kernel, int(stride), int(padding))
    if bias is not None:
        out = add(out, reshape(bias, (1, -1, 1, 1) if bias.ndim == 1 else bias.shape))
    return out


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
                     output_size: tuple[int, int] | None = None, bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` in its input: (n, o, h', w') -> (n, c, h, w).

    ``kernel`` has the conv2d layout (o, c, kh, kw).  ``output_size`` defaults
    to the smallest (h, w) that conv2d maps onto (h', w').
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} incompatible with kernel {kernel.shape}")
    kh, kw = kernel.shape[2:]
    if output_size is None:
        output_size = ((x.shape[2] - 1) * stride - 2 * padding + kh,
                       (x.shape[3] - 1) * stride - 2 * padding + kw)
    if (_out_size(output_size[0], kh, stride, padding), _out_size(output_size[1], kw, stride, padding)) != x.shape[2:]:
        raise DimensionError(f"conv_transpose2d: output size {output_size} does not map onto {x.shape[2:]}")
    out = _conv_t(x, kernel, int(stride), int(padding), output_size)
    if bias is not None:
        out = add(out, reshape(bias, (1, -1, 1, 1) if bias.ndim == 1 else bias.shape))
    return out


# ---------------------------------------------------------------------------
# strided subsampling

class Downsample(Function):
    __slots__ = ("t",)

    def forward(self, x):
        t = self.t
        return np.ascontiguousarray(x[:, :, ::t, ::t])

    def backward(self, g, needs):
        return (upsample_zeros(g, self.t),)


class UpsampleZeros(Function):
    __slots__ = ("t",)

    def forward(self, x):
        t = self.t
        n, c, h, w = x.shape
        out = np.zeros((n, c, h * t, w * t))
        out[:, :, ::t, ::t] = x
        return out

    def backward(self, g, needs):
        return (downsample(g, self.t),)


def downsample(x: Tensor, t: int) -> Tensor:
    """Keep the top-left sample of every t x t block."""
    x = _as_tensor(x)
    t = int(t)
    if t < 1:
        raise ValueError(f"downsample factor must be >= 1, got {t}")
    if x.ndim != 4 or x.shape[2] % t or x.shape[3] % t:
        raise DimensionError(f"downsample: spatial dims of {x.shape} not divisible by {t}")
    if t == 1:
        return x
    return Downsample.apply(x, t=t)


def upsample_zeros(x: Tensor, t: int) -> Tensor:
    """Adjoint of :func:`downsample`: place samples on a t-times finer grid."""
    x = _as_tensor(x)
    if t == 1:
        return x
    return UpsampleZeros.apply(x, t=int(t))


# ---------------------------------------------------------------------------
# backpropagation

def _toposort(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.inputs:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
    return order


def grad(outputs, inputs, grad_outputs=None, create_graph: bool = False,
         retain_graph: bool | None = None) -> list[Tensor]:
    """Gradients of ``outputs`` with respect to each tensor in ``inputs``.

    Inputs the outputs do not depend on get all-zeros gradients.  With
    ``create_graph=True`` the returned tensors carry graph nodes and can be
    differentiated again.  Without ``retain_graph`` the traversed nodes are
    freed, and a second pass through them raises :class:`GraphReleasedError`.
    """
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if retain_graph is None:
        retain_graph = create_graph
    if grad_outputs is None:
        for o in outputs:
            if o.size != 1:
                raise DimensionError(f"grad: root must be a scalar, got shape {o.shape}")
        grad_outputs = [constant(np.ones(o.shape)) for o in outputs]
    else:
        grad_outputs = [_as_tensor(g) for g in grad_outputs]

    order = _toposort(o for o in outputs if o.requires_grad)
    targets = {id(t) for t in inputs}
    relevant: set[int] = set()
    for t in order:
        if id(t) in targets or (t.node is not None and any(id(p) in relevant for p in t.node.inputs)):
            relevant.add(id(t))

    grads: dict[int, Tensor] = {}
    with _grad_mode(create_graph):
        for o, g in zip(outputs, grad_outputs):
            if id(o) in relevant:
                grads[id(o)] = add(grads[id(o)], g) if id(o) in grads else g
        for t in reversed(order):
            node = t.node
            if node is None or id(t) not in relevant or id(t) not in grads:
                continue
            if node.released:
                raise GraphReleasedError(
                    "backward through a graph that was already freed; pass retain_graph=True"
                )
            needs = [id(p) in relevant for p in node.inputs]
            gins = node.backward(grads[id(t)], needs)
            for p, gp, need in zip(node.inputs, gins, needs):
                if not need or gp is None:
                    continue
                grads[id(p)] = add(grads[id(p)], gp) if id(p) in grads else gp
        if not retain_graph:
            for t in order:
                if t.node is not None and id(t) in relevant:
                    t.node.released = True

    result = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = constant(np.zeros(t.shape))
        elif not create_graph and g.node is not None:
            g = g.detach()
        result.append(g)
    return result[0] if single else result


def backward(root: Tensor, create_graph: bool = False, retain_graph: bool | None = None,
             accumulate: bool = False) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``root`` for every leaf that requires grad.

    Returns a ``{leaf: gradient}`` dict.  With ``accumulate=True`` each gradient
    is also added into ``leaf.grad``.
    """
    if root.size != 1:
        raise DimensionError(f"backward: root must be a scalar, got shape {root.shape}")
    leaves = [t for t in _toposort([root]) if t.node is None and t.requires_grad] if root.requires_grad else []
    gs = grad(root, leaves, create_graph=create_graph, retain_graph=retain_graph) if leaves else []
    out = dict(zip(leaves, gs))
    if accumulate:
        for leaf, g in out.items():
            leaf.grad = g if leaf.grad is None else add(leaf.grad, g)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               analytic: np.ndarray | None = None, skip: np.ndarray | None = None) -> float:
    """Largest central-difference discrepancy of ``f``'s gradient at ``x``.

    The error per coordinate is ``|a - b| / max(1, |a|, |b|)``.  ``skip`` is an
    optional boolean mask of coordinates to leave out (e.g. ones within
    ``eps`` of a relu kink, where central differences straddle the
    non-differentiable point).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if analytic is None:
        xt = Tensor(x0.copy(), requires_grad=True)
        analytic = grad(f(xt), xt).data
    flat = x0.reshape(-1)
    a_flat = np.asarray(analytic).reshape(-1)
    skip_flat = None if skip is None else np.asarray(skip, dtype=bool).reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            if skip_flat is not None and skip_flat[i]:
                continue
            xp = flat.copy()
            xp[i] += eps
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            xp[i] -= 2 * eps
            fm = f(Tensor(xp.reshape(x0.shape))).item()
            num = (fp - fm) / (2 * eps)
            a = a_flat[i]
            if not (np.isfinite(num) and np.isfinite(a)):
                raise FloatingPointError(
                    f"grad_check: non-finite value at coordinate {i} (analytic={a}, numeric={num})"
                )
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
