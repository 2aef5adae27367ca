"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only the primitives needed by the separator and the losses are provided.
A :class:`Tensor` created without a tape is a constant; any op that touches
a taped tensor records a node on that tape.  ``Tape.backward`` walks the
nodes once, in reverse creation order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "DomainError",
    "add", "sub", "mul", "div", "scale",
    "conv1d", "conv1d_transposed", "conv_output_length",
    "pointwise", "depthwise_conv1d",
    "relu", "prelu", "softmax_sources", "select",
    "sum", "mean", "log10", "square", "sqrt",
    "reshape", "gather_last",
    "inject_gradient_fault", "OP_NAMES",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


OP_NAMES = (
    "add", "sub", "mul", "div", "scale", "square", "sqrt", "log10", "relu", "prelu",
    "sum", "reshape", "select", "gather_last", "softmax_sources",
    "conv1d", "conv1d_transposed", "pointwise", "depthwise_conv1d",
)

# op name -> multiplier applied to that op's input gradients (test hook only)
_GRAD_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def inject_gradient_fault(op: str, factor: float = 1.01):
    """Deliberately scale the vjp of ``op`` so gradient checks must fail."""
    if op not in OP_NAMES:
        raise ValueError(f"unknown op {op!r}")
    _GRAD_FAULTS[op] = factor
    try:
        yield
    finally:
        _GRAD_FAULTS.pop(op, None)


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    branch: np.ndarray | None = None


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)

    def _record(self, op, inputs, vjp, branch=None) -> int:
        self.nodes.append(_Node(op, tuple(inputs), vjp, branch))
        return len(self.nodes) - 1

    def branch_pattern(self) -> bytes:
        """Which side of its kink every relu/prelu element took.

        Two points with the same pattern lie on the same smooth piece, which
        is what a finite-difference stencil needs.
        """
        return b"".join(np.packbits(n.branch).tobytes() for n in self.nodes
                        if n.branch is not None)

    def leaf(self, value) -> "Tensor":
        data = np.array(value, dtype=np.float64)
        return Tensor(data, self, self._record("leaf", (), None))

    def backward(self, root: "Tensor") -> "Gradients":
        if root.tape is not self:
            raise ValueError("root tensor was not recorded on this tape")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: list[np.ndarray | None] = [None] * (root.node + 1)
        grads[root.node] = np.ones_like(root.data)
        for i in range(root.node, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            input_grads = node.vjp(g)
            factor = _GRAD_FAULTS.get(node.op) if _GRAD_FAULTS else None
            for j, gj in zip(node.inputs, input_grads):
                if j < 0 or gj is None:
                    continue
                if factor is not None:
                    gj = gj * factor
                grads[j] = gj if grads[j] is None else grads[j] + gj
        return Gradients(grads)


class Gradients:
    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, tensor: "Tensor") -> np.ndarray:
        g = self._grads[tensor.node] if tensor.node < len(self._grads) else None
        return np.zeros_like(tensor.data) if g is None else g


class Tensor:
    """Immutable float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tracked = "tracked" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp, branch=None) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("tensors from different tapes cannot be combined")
            tape = t.tape
    if tape is None:
        return Tensor(data)
    ids = [t.node if t.tape is tape else -1 for t in inputs]
    return Tensor(data, tape, tape._record(op, ids, vjp, branch))


# ---------------------------------------------------------------- elementwise

def _check_binary(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sb == () or sa == ():
        return
    if len(sa) == len(sb) and sa[:-1] == sb[:-1] and (sa[-1] == 1 or sb[-1] == 1):
        return
    raise ShapeError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=-1, keepdims=True)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * out / bd, bd.shape))

    return _emit("div", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    """Multiply by a plain Python constant."""
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def log10(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log10 of nonpositive value")
    ad = a.data
    return _emit("log10", np.log10(ad), (a,), lambda g: (g / (ad * np.log(10.0)),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _emit("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), branch=on)


def prelu(a, alpha) -> Tensor:
    """Parametric ReLU with one slope per channel (axis 1)."""
    a, alpha = _as_tensor(a), _as_tensor(alpha)
    if alpha.data.ndim != 1 or a.data.ndim < 2 or alpha.shape[0] != a.shape[1]:
        raise ShapeError(f"prelu slopes {alpha.shape} do not match channels of {a.shape}")
    ad = a.data
    expand = (slice(None),) + (None,) * (ad.ndim - 2)
    slope = alpha.data[expand]
    neg_part = np.minimum(ad, 0.0)
    out = ad + (slope - 1.0) * neg_part

    def vjp(g):
        neg = ad < 0
        ga = g + (slope - 1.0) * (g * neg)
        axes = (0,) + tuple(range(2, ad.ndim))
        galpha = (g * neg_part).sum(axis=axes)
        return ga, galpha

    return _emit("prelu", out, (a, alpha), vjp, branch=ad < 0)


# ---------------------------------------------------------------- reductions

def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def select(a, axis: int, index: int) -> Tensor:
    """Take one slice along ``axis`` (the axis is dropped)."""
    a = _as_tensor(a)
    shape = a.shape
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _emit("select", out, (a,), vjp)


def gather_last(a, index: np.ndarray) -> Tensor:
    """out[..., i] = a[..., index[i]]; used for padding and cropping."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[-1]
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= n)):
        raise ShapeError("gather index out of range")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        if np.unique(index).size == index.size:
            full[..., index] = g
        else:
            np.add.at(full, (Ellipsis, index), g)
        return (full,)

    return _emit("gather_last", a.data[..., index], (a,), vjp)


# ---------------------------------------------------------------- softmax

def softmax_sources(logits) -> Tensor:
    """Softmax across axis 1, the source axis of a B x S x F x T' tensor."""
    logits = _as_tensor(logits)
    if logits.data.ndim < 2:
        raise ShapeError("softmax_sources needs a source axis at position 1")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit("softmax_sources", p, (logits,), vjp)


# ---------------------------------------------------------------- convolution

def conv_output_length(length: int, taps: int, stride: int) -> int:
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if length < taps:
        raise ShapeError(f"signal length {length} shorter than kernel {taps}")
    return (length - taps) // stride + 1


def _frames(x: np.ndarray, taps: int, stride: int) -> np.ndarray:
    # B x T -> B x T' x K (contiguous copy)
    win = np.lib.stride_tricks.sliding_window_view(x, taps, axis=-1)
    return np.ascontiguousarray(win[:, ::stride, :])


def _overlap_add(frames: np.ndarray, stride: int, length: int) -> np.ndarray:
    # B x T' x K -> B x length
    b, n, k = frames.shape
    out = np.zeros((b, length))
    stop = stride * (n - 1) + 1
    for j in range(k):
        out[:, j:j + stop:stride] += frames[:, :, j]
    return out


def conv1d(signal, kernels, stride: int = 1) -> Tensor:
    """Strided cross-correlation of each row with each filter: B x T -> B x F x T'."""
    signal, kernels = _as_tensor(signal), _as_tensor(kernels)
    if signal.data.ndim != 2 or kernels.data.ndim != 2:
        raise ShapeError("conv1d expects B x T signal and F x K kernels")
    length = signal.shape[1]
    taps = kernels.shape[1]
    conv_output_length(length, taps, stride)
    fr = _frames(signal.data, taps, stride)
    w = kernels.data
    out = np.matmul(w, fr.transpose(0, 2, 1))

    def vjp(g):
        gw = np.matmul(g, fr).sum(axis=0)
        gframes = np.matmul(g.transpose(0, 2, 1), w)
        return _overlap_add(gframes, stride, length), gw

    return _emit("conv1d", out, (signal, kernels), vjp)


def conv1d_transposed(features, kernels, stride: int = 1,
                      length: int | None = None) -> Tensor:
    """Adjoint of :func:`conv1d`: B x F x T' -> B x T via overlap-add.

    ``length`` defaults to ``(T'-1)*stride + K``; a longer original length
    (when the last samples were never covered by a frame) may be given.
    """
    features, kernels = _as_tensor(features), _as_tensor(kernels)
    if features.data.ndim != 3 or kernels.data.ndim != 2:
        raise ShapeError("conv1d_transposed expects B x F x T' features and F x K kernels")
    b, f, n = features.shape
    if kernels.shape[0] != f:
        raise ShapeError(f"{f} feature channels but {kernels.shape[0]} kernels")
    taps = kernels.shape[1]
    minimal = (n - 1) * stride + taps
    if length is None:
        length = minimal
    if conv_output_length(length, taps, stride) != n:
        raise ShapeError(f"length {length} inconsistent with {n} frames of {taps} taps, stride {stride}")
    w = kernels.data
    fd = features.data
    frames = np.matmul(fd.transpose(0, 2, 1), w)
    out = _overlap_add(frames, stride, length)

    def vjp(g):
        fr = _frames(g, taps, stride)
        gfeat = np.matmul(w, fr.transpose(0, 2, 1))
        gw = np.matmul(fd, fr).sum(axis=0)
        return gfeat, gw

    return _emit("conv1d_transposed", out, (features, kernels), vjp)


def pointwise(h, weight, bias) -> Tensor:
    """Channel mixing (1x1 convolution): B x G x T -> B x F x T, plus bias."""
    h, weight, bias = _as_tensor(h), _as_tensor(weight), _as_tensor(bias)
    if h.data.ndim != 3 or weight.data.ndim != 2 or weight.shape[1] != h.shape[1]:
        raise ShapeError(f"pointwise weight {weight.shape} does not match input {h.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias {bias.shape} does not match {weight.shape[0]} outputs")
    hd, w = h.data, weight.data
    out = np.matmul(w, hd) + bias.data[:, None]

    def vjp(g):
        gh = np.matmul(w.T, g)
        gw = np.matmul(g, hd.transpose(0, 2, 1)).sum(axis=0)
        return gh, gw, g.sum(axis=(0, 2))

    return _emit("pointwise", out, (h, weight, bias), vjp)


def depthwise_conv1d(h, kernels) -> Tensor:
    """Per-channel 'same' convolution along time, zero padded: B x F x T."""
    h, kernels = _as_tensor(h), _as_tensor(kernels)
    if h.data.ndim != 3 or kernels.data.ndim != 2 or kernels.shape[0] != h.shape[1]:
        raise ShapeError(f"depthwise kernels {kernels.shape} do not match input {h.shape}")
    taps = kernels.shape[1]
    if taps % 2 == 0:
        raise ShapeError("depthwise kernel needs an odd number of taps")
    half = taps // 2
    hd, w = h.data, kernels.data
    n = hd.shape[2]
    padded = np.pad(hd, ((0, 0), (0, 0), (half, half)))
    out = np.zeros_like(hd)
    for k in range(taps):
        out += w[None, :, k, None] * padded[:, :, k:k + n]

    def vjp(g):
        gpad = np.zeros_like(padded)
        gw = np.empty_like(w)
        for k in range(taps):
            gpad[:, :, k:k + n] += w[None, :, k, None] * g
            gw[:, k] = (g * padded[:, :, k:k + n]).sum(axis=(0, 2))
        return gpad[:, :, half:half + n], gw

    return _emit("depthwise_conv1d", out, (h, kernels), vjp)
