"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is a recording tape: every operation appends a node to the
active :class:`Graph`, and :func:`backward` sweeps the tape in reverse
insertion order (which is a topological order by construction).  Tensors
are immutable once produced by an operation; parameter updates between
training steps replace ``.data`` with a fresh array.

Shapes follow the (batch, channels, height, width) convention for the
convolutional operators; elementwise and reduction primitives accept any
rank so that loss expressions can be composed from the same machinery.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One executed operation on the tape.

    ``backward_fn`` maps the output gradient to a list of
    (input node id, input gradient) pairs; ``recompute`` re-executes the
    forward computation from the recorded inputs, used to verify replay
    determinism.
    """

    __slots__ = ("idx", "kind", "input_ids", "tensor", "backward_fn", "recompute")

    def __init__(self, idx, kind, input_ids, tensor, backward_fn, recompute):
        self.idx = idx
        self.kind = kind
        self.input_ids = input_ids
        self.tensor = tensor
        self.backward_fn = backward_fn
        self.recompute = recompute


class Graph:
    """Ordered record of executed operations; insertion order is topological."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _append(self, kind, input_ids, tensor, backward_fn, recompute):
        node = Node(len(self.nodes), kind, tuple(input_ids), tensor, backward_fn, recompute)
        self.nodes.append(node)
        return node

    def check_acyclic(self):
        for node in self.nodes:
            for i in node.input_ids:
                if i >= node.idx:
                    return False
        return True

    def replay_matches(self):
        """Re-run every recorded op from its inputs; True if bit-identical."""
        for node in self.nodes:
            if node.recompute is None:
                continue
            fresh = node.recompute()
            if fresh.shape != node.tensor.data.shape:
                return False
            if not np.array_equal(fresh, node.tensor.data):
                return False
        return True


_active_graph = Graph()


def new_graph() -> Graph:
    """Install and return a fresh tape; prior graphs stay valid for backward."""
    global _active_graph
    _active_graph = Graph()
    return _active_graph


def active_graph() -> Graph:
    return _active_graph


class Tensor:
    """Dense float64 array plus differentiation bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_graph", "_node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._graph: Optional[Graph] = None
        self._node_id: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if not self.requires_grad:
            raise ValueError("tensor does not require grad")
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _ensure_leaf(t: Tensor, g: Graph) -> int:
    """Register ``t`` as a leaf node on ``g`` if it is not already on it."""
    if t._graph is g and t._node_id is not None:
        return t._node_id
    tr = t

    def leaf_backward(gout, _t=tr):
        if _t.requires_grad:
            _t.accumulate_grad(gout)
        return []

    node = g._append("leaf", (), t, leaf_backward, None)
    t._graph = g
    t._node_id = node.idx
    return node.idx


def _record(kind, out_data, inputs: Sequence[Tensor], backward_fn, recompute=None) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording the op on the active tape.

    ``backward_fn(gout, input_ids)`` must return [(input_id, grad_array), ...].
    Recording is skipped entirely under ``no_grad`` or when no input
    requires a gradient.
    """
    out = Tensor(out_data)
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    if not _grad_enabled:
        return out
    g = _active_graph
    ids = tuple(_ensure_leaf(t, g) for t in inputs)
    node = g._append(kind, ids, out, lambda gout: backward_fn(gout, ids), recompute)
    out._graph = g
    out._node_id = node.idx
    return out


def backward(root: Tensor):
    """Reverse sweep from a scalar root; leaf gradients accumulate additively."""
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    g = root._graph
    if g is None or root._node_id is None:
        raise ValueError("root tensor is not part of a recorded graph")
    grads: dict[int, np.ndarray] = {root._node_id: np.ones_like(root.data)}
    for node in reversed(g.nodes[: root._node_id + 1]):
        gout = grads.pop(node.idx, None)
        if gout is None:
            continue
        for input_id, ginp in node.backward_fn(gout):
            if ginp is None:
                continue
            held = grads.get(input_id)
            grads[input_id] = ginp if held is None else held + ginp


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")

    def bwd(gout, ids):
        out = []
        if a.requires_grad:
            out.append((ids[0], gout))
        if b.requires_grad:
            out.append((ids[1], gout))
        return out

    return _record("add", a.data + b.data, (a, b), bwd, lambda: a.data + b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; limited broadcasting for attention-style gating."""
    try:
        out_shape = np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as exc:
        raise ShapeError(f"mul shapes not broadcastable: {a.data.shape} vs {b.data.shape}") from exc
    ad, bd = a.data, b.data

    def bwd(gout, ids):
        out = []
        if a.requires_grad:
            out.append((ids[0], _unbroadcast(gout * bd, ad.shape)))
        if b.requires_grad:
            out.append((ids[1], _unbroadcast(gout * ad, bd.shape)))
        return out

    return _record("mul", np.broadcast_to(ad * bd, out_shape), (a, b), bwd, lambda: ad * bd)


def mul_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(x.data.shape, c.shape) != x.data.shape:
        raise ShapeError(f"constant of shape {c.shape} would broadcast past input {x.data.shape}")

    def bwd(gout, ids):
        return [(ids[0], gout * c)] if x.requires_grad else []

    return _record("mul_const", x.data * c, (x,), bwd, lambda: x.data * c)


def add_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)

    def bwd(gout, ids):
        return [(ids[0], gout)] if x.requires_grad else []

    return _record("add_const", x.data + c, (x,), bwd, lambda: x.data + c)


def rsub_const(c, x: Tensor) -> Tensor:
    """c - x for a non-differentiated constant c."""
    c = np.asarray(c, dtype=np.float64)

    def bwd(gout, ids):
        return [(ids[0], -gout)] if x.requires_grad else []

    return _record("rsub_const", c - x.data, (x,), bwd, lambda: c - x.data)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bwd(gout, ids):
        return [(ids[0], gout * out_data)] if x.requires_grad else []

    return _record("exp", out_data, (x,), bwd, lambda: np.exp(x.data))


def log(x: Tensor) -> Tensor:
    xd = x.data

    def bwd(gout, ids):
        return [(ids[0], gout / xd)] if x.requires_grad else []

    return _record("log", np.log(xd), (x,), bwd, lambda: np.log(xd))


def pow_const(x: Tensor, p: float) -> Tensor:
    p = float(p)
    xd = x.data

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        if p == 0.0:
            return [(ids[0], np.zeros_like(xd))]
        if p == 1.0:
            return [(ids[0], gout)]
        return [(ids[0], gout * p * np.power(xd, p - 1.0))]

    return _record("pow_const", np.power(xd, p), (x,), bwd, lambda: np.power(xd, p))


def absolute(x: Tensor) -> Tensor:
    xd = x.data

    def bwd(gout, ids):
        return [(ids[0], gout * np.sign(xd))] if x.requires_grad else []

    return _record("abs", np.abs(xd), (x,), bwd, lambda: np.abs(xd))


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape

    def bwd(gout, ids):
        return [(ids[0], np.full(shape, gout.sum()))] if x.requires_grad else []

    return _record("sum_all", np.asarray(x.data.sum()), (x,), bwd, lambda: np.asarray(x.data.sum()))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.data.shape
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"cannot reshape {old} to {shape}")

    def bwd(gout, ids):
        return [(ids[0], gout.reshape(old))] if x.requires_grad else []

    return _record("reshape", x.data.reshape(shape), (x,), bwd, lambda: x.data.reshape(shape))


def gather_channel(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick one channel per pixel: out[n,0,h,w] = x[n, index[n,h,w], h, w]."""
    if x.data.ndim != 4:
        raise ShapeError(f"gather_channel expects 4-D input, got {x.data.shape}")
    n, k, h, w = x.data.shape
    index = np.asarray(index)
    if index.shape != (n, h, w):
        raise ShapeError(f"index shape {index.shape} != {(n, h, w)}")
    if index.min() < 0 or index.max() >= k:
        raise ValueError(f"index values outside [0, {k})")
    ni, hi, wi = np.ogrid[:n, :h, :w]

    def fwd():
        return x.data[ni, index, hi, wi][:, None, :, :]

    out_data = fwd()

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        gx = np.zeros((n, k, h, w))
        np.add.at(gx, (ni, index, hi, wi), gout[:, 0, :, :])
        return [(ids[0], gx)]

    return _record("gather_channel", out_data, (x,), bwd, fwd)


def channel_mean(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,1,H,W) mean over channels."""
    c = x.data.shape[1]

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        return [(ids[0], np.repeat(gout / c, c, axis=1))]

    return _record("channel_mean", x.data.mean(axis=1, keepdims=True), (x,), bwd,
                   lambda: x.data.mean(axis=1, keepdims=True))


def channel_max(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,1,H,W) max over channels; gradient routes to argmax."""
    arg = x.data.argmax(axis=1)
    n, c, h, w = x.data.shape
    ni, hi, wi = np.ogrid[:n, :h, :w]

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ni, arg, hi, wi), gout[:, 0, :, :])
        return [(ids[0], gx)]

    return _record("channel_max", x.data.max(axis=1, keepdims=True), (x,), bwd,
                   lambda: x.data.max(axis=1, keepdims=True))


def spatial_max(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C,1,1) max over the spatial extent."""
    n, c, h, w = x.data.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=2)
    ni, ci = np.ogrid[:n, :c]

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        gx = np.zeros((n, c, h * w))
        np.add.at(gx, (ni, ci, arg), gout[:, :, 0, 0])
        return [(ids[0], gx.reshape(n, c, h, w))]

    return _record("spatial_max", flat.max(axis=2)[:, :, None, None], (x,), bwd,
                   lambda: x.data.reshape(n, c, h * w).max(axis=2)[:, :, None, None])


# ---------------------------------------------------------------------------
# activations


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0,1), got {slope}")
    xd = x.data
    factor = np.where(xd > 0, 1.0, slope)

    def bwd(gout, ids):
        return [(ids[0], gout * factor)] if x.requires_grad else []

    return _record("leaky_relu", xd * factor, (x,), bwd, lambda: np.where(xd > 0, xd, slope * xd))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0

    def bwd(gout, ids):
        return [(ids[0], gout * mask)] if x.requires_grad else []

    return _record("relu", np.where(mask, xd, 0.0), (x,), bwd, lambda: np.maximum(xd, 0.0))


def sigmoid(x: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(gout, ids):
        return [(ids[0], gout * out_data * (1.0 - out_data))] if x.requires_grad else []

    return _record("sigmoid", out_data, (x,), bwd, lambda: 1.0 / (1.0 + np.exp(-x.data)))


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.data.shape}")
    return axis % x.data.ndim


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        dot = (gout * out_data).sum(axis=axis, keepdims=True)
        return [(ids[0], out_data * (gout - dot))]

    def fwd():
        s = x.data - x.data.max(axis=axis, keepdims=True)
        ee = np.exp(s)
        return ee / ee.sum(axis=axis, keepdims=True)

    return _record("softmax", out_data, (x,), bwd, fwd)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        return [(ids[0], gout - np.exp(out_data) * gout.sum(axis=axis, keepdims=True))]

    def fwd():
        s = x.data - x.data.max(axis=axis, keepdims=True)
        return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))

    return _record("log_softmax", out_data, (x,), bwd, fwd)


_ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
}


def activation(x: Tensor, kind: str, **kwargs) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[kind](x, **kwargs)


# ---------------------------------------------------------------------------
# convolution


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class Conv2dSpec:
    """Geometry of a 2-D (possibly dilated) cross-correlation."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.stride) < 1:
            raise ValueError("stride must be positive")
        if min(self.padding) < 0:
            raise ValueError("padding must be non-negative")
        if self.dilation < 1:
            raise ValueError("dilation must be positive")

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        d = self.dilation
        oh = (h + 2 * ph - d * (kh - 1) - 1) // sh + 1
        ow = (w + 2 * pw - d * (kw - 1) - 1) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output extent {(oh, ow)} non-positive for input {(h, w)} with {self}")
        return oh, ow


def _conv2d_forward(xd, wd, bd, spec: Conv2dSpec):
    n, c, h, w = xd.shape
    o, ci, kh, kw = wd.shape
    sh, sw = spec.stride
    ph, pw = spec.padding
    d = spec.dilation
    oh, ow = spec.out_extent(h, w)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    eh = d * (kh - 1) + 1
    ew = d * (kw - 1) + 1
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))[:, :, ::sh, ::sw, ::d, ::d]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    out = col @ wd.reshape(o, -1).T
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    if bd is not None:
        out = out + bd[None, :, None, None]
    return np.ascontiguousarray(out)


def _conv2d_backward(gout, xd, wd, spec: Conv2dSpec, need_x, need_w):
    n, c, h, w = xd.shape
    o, _, kh, kw = wd.shape
    sh, sw = spec.stride
    ph, pw = spec.padding
    d = spec.dilation
    oh, ow = gout.shape[2], gout.shape[3]
    gx = gw = None
    if need_w:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        eh = d * (kh - 1) + 1
        ew = d * (kw - 1) + 1
        win = sliding_window_view(xp, (eh, ew), axis=(2, 3))[:, :, ::sh, ::sw, ::d, ::d]
        col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
        g2 = gout.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gw = (g2.T @ col).reshape(o, c, kh, kw)
    if need_x:
        gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
        for a in range(kh):
            for b in range(kw):
                t = np.tensordot(gout, wd[:, :, a, b], axes=([1], [0]))
                t = t.transpose(0, 3, 1, 2)
                gxp[:, :, a * d: a * d + sh * oh: sh, b * d: b * d + sw * ow: sw] += t
        gx = gxp[:, :, ph: ph + h, pw: pw + w]
    return gx, gw


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: Conv2dSpec) -> Tensor:
    """Dilated 2-D cross-correlation; out-of-bounds taps read zero."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D, got {x.data.shape}")
    if weight.data.shape != (spec.out_channels, spec.in_channels) + spec.kernel:
        raise ShapeError(
            f"weight shape {weight.data.shape} incompatible with spec "
            f"{(spec.out_channels, spec.in_channels) + spec.kernel}")
    if x.data.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input channels {x.data.shape[1]} != spec in_channels {spec.in_channels}")
    if bias is not None and bias.data.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({spec.out_channels},)")
    spec.out_extent(x.data.shape[2], x.data.shape[3])

    bd = None if bias is None else bias.data
    out_data = _conv2d_forward(x.data, weight.data, bd, spec)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    xd, wd = x.data, weight.data

    def bwd(gout, ids):
        gx, gw = _conv2d_backward(gout, xd, wd, spec, x.requires_grad, weight.requires_grad)
        out = []
        if x.requires_grad:
            out.append((ids[0], gx))
        if weight.requires_grad:
            out.append((ids[1], gw))
        if bias is not None and bias.requires_grad:
            out.append((ids[2], gout.sum(axis=(0, 2, 3))))
        return out

    return _record("conv2d", out_data, inputs, bwd,
                   lambda: _conv2d_forward(xd, wd, bd, spec))


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor],
           stride: int = 1, padding: int = 0) -> Tensor:
    """1-D analog of conv2d over (N, C, L) inputs."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv1d input must be 3-D, got {x.data.shape}")
    if weight.data.ndim != 3:
        raise ShapeError(f"conv1d weight must be 3-D, got {weight.data.shape}")
    o, ci, k = weight.data.shape
    spec = Conv2dSpec(ci, o, kernel=(1, k), stride=(1, stride), padding=(0, padding))
    n, c, l = x.data.shape
    if c != ci:
        raise ShapeError(f"input channels {c} != weight in_channels {ci}")
    spec.out_extent(1, l)
    bd = None if bias is None else bias.data
    xd4 = x.data[:, :, None, :]
    wd4 = weight.data[:, :, None, :]
    out_data = _conv2d_forward(xd4, wd4, bd, spec)[:, :, 0, :]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(gout, ids):
        gx, gw = _conv2d_backward(gout[:, :, None, :], xd4, wd4, spec,
                                  x.requires_grad, weight.requires_grad)
        out = []
        if x.requires_grad:
            out.append((ids[0], gx[:, :, 0, :]))
        if weight.requires_grad:
            out.append((ids[1], gw[:, :, 0, :]))
        if bias is not None and bias.requires_grad:
            out.append((ids[2], gout.sum(axis=(0, 2))))
        return out

    return _record("conv1d", out_data, inputs, bwd,
                   lambda: _conv2d_forward(xd4, wd4, bd, spec)[:, :, 0, :])


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    """Running statistics updated by exponential moving average in train mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy())


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train", momentum: float = 0.1, epsilon: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm input must be 4-D, got {x.data.shape}")
    c = x.data.shape[1]
    for name, t in (("gamma", gamma.data), ("beta", beta.data),
                    ("running mean", state.mean), ("running var", state.var)):
        if t.shape != (c,):
            raise ShapeError(f"{name} shape {t.shape} != ({c},) for input {x.data.shape}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    xd = x.data
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.var + epsilon)
        m, s = state.mean.copy(), inv

        def fwd():
            return (xd - m[None, :, None, None]) * s[None, :, None, None] \
                * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

        out_data = fwd()
        xhat = (xd - m[None, :, None, None]) * s[None, :, None, None]

        def bwd(gout, ids):
            out = []
            if x.requires_grad:
                out.append((ids[0], gout * (gamma.data * s)[None, :, None, None]))
            if gamma.requires_grad:
                out.append((ids[1], (gout * xhat).sum(axis=(0, 2, 3))))
            if beta.requires_grad:
                out.append((ids[2], gout.sum(axis=(0, 2, 3))))
            return out

        return _record("batch_norm_eval", out_data, (x, gamma, beta), bwd, fwd)

    n, _, h, w = xd.shape
    count = n * h * w
    if count == 0:
        raise ValueError("batch_norm train mode requires a non-empty batch")
    mu = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    state.mean = (1 - momentum) * state.mean + momentum * mu
    state.var = (1 - momentum) * state.var + momentum * var
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out_data = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    gd = gamma.data

    def bwd(gout, ids):
        out = []
        if x.requires_grad:
            mean_g = gout.mean(axis=(0, 2, 3))
            mean_gx = (gout * xhat).mean(axis=(0, 2, 3))
            gx = (gd * inv)[None, :, None, None] * (
                gout - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None])
            out.append((ids[0], gx))
        if gamma.requires_grad:
            out.append((ids[1], (gout * xhat).sum(axis=(0, 2, 3))))
        if beta.requires_grad:
            out.append((ids[2], gout.sum(axis=(0, 2, 3))))
        return out

    # replay uses the batch statistics captured above, not the mutated state
    def fwd():
        return ((xd - mu[None, :, None, None]) * inv[None, :, None, None]
                * gd[None, :, None, None] + beta.data[None, :, None, None])

    return _record("batch_norm_train", out_data, (x, gamma, beta), bwd, fwd)


# ---------------------------------------------------------------------------
# pooling and resampling


def pool2d(x: Tensor, kind: str, window, stride=None) -> Tensor:
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"pool2d input must be 4-D, got {x.data.shape}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    if sh < 1 or sw < 1:
        raise ValueError("stride must be >= 1")
    n, c, h, w = x.data.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool window {(kh, kw)} larger than input extent {(h, w)}")
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]

    if kind == "avg":
        out_data = win.mean(axis=(4, 5))

        def bwd(gout, ids):
            if not x.requires_grad:
                return []
            gx = np.zeros_like(x.data)
            share = gout / (kh * kw)
            for a in range(kh):
                for b in range(kw):
                    gx[:, :, a: a + sh * oh: sh, b: b + sw * ow: sw] += share
            return [(ids[0], gx)]

        return _record("avg_pool", out_data, (x,), bwd,
                       lambda: sliding_window_view(x.data, (kh, kw), axis=(2, 3))
                       [:, :, ::sh, ::sw].mean(axis=(4, 5)))

    flat = win.reshape(n, c, oh, ow, kh * kw)
    arg = flat.argmax(axis=4)
    out_data = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = oi[None, None] * sh + arg // kw
    cols = oj[None, None] * sw + arg % kw
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(ni, arg.shape), np.broadcast_to(ci, arg.shape),
                       rows, cols), gout)
        return [(ids[0], gx)]

    def fwd():
        v = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        return v.reshape(n, c, oh, ow, kh * kw).max(axis=4)

    return _record("max_pool", np.ascontiguousarray(out_data), (x,), bwd, fwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C,1,1) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D, got {x.data.shape}")
    n, c, h, w = x.data.shape

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        return [(ids[0], np.broadcast_to(gout / (h * w), x.data.shape).copy())]

    return _record("global_avg_pool", x.data.mean(axis=(2, 3), keepdims=True), (x,), bwd,
                   lambda: x.data.mean(axis=(2, 3), keepdims=True))


def _interp_axis(src: int, dst: int):
    """align-corners=false source indices and fractional weights."""
    f = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    f = np.clip(f, 0.0, src - 1.0)
    i0 = np.floor(f).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = f - i0
    return i0, i1, frac


def bilinear_upsample(x: Tensor, target) -> Tensor:
    """Bilinear resize (align_corners=false); identity when target matches."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample input must be 4-D, got {x.data.shape}")
    ho, wo = int(target[0]), int(target[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"target extent {(ho, wo)} must be positive")
    n, c, h, w = x.data.shape
    if (ho, wo) == (h, w):
        def bwd(gout, ids):
            return [(ids[0], gout)] if x.requires_grad else []

        return _record("bilinear_identity", x.data.copy(), (x,), bwd, lambda: x.data.copy())

    i0, i1, fi = _interp_axis(h, ho)
    j0, j1, fj = _interp_axis(w, wo)
    wi0, wi1 = (1.0 - fi)[:, None], fi[:, None]
    wj0, wj1 = (1.0 - fj)[None, :], fj[None, :]

    def fwd():
        xd = x.data
        return (xd[:, :, i0[:, None], j0[None, :]] * (wi0 * wj0)
                + xd[:, :, i0[:, None], j1[None, :]] * (wi0 * wj1)
                + xd[:, :, i1[:, None], j0[None, :]] * (wi1 * wj0)
                + xd[:, :, i1[:, None], j1[None, :]] * (wi1 * wj1))

    out_data = fwd()

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        gx = np.zeros_like(x.data)
        for ii, jj, ww in ((i0, j0, wi0 * wj0), (i0, j1, wi0 * wj1),
                           (i1, j0, wi1 * wj0), (i1, j1, wi1 * wj1)):
            np.add.at(gx, (slice(None), slice(None), ii[:, None], jj[None, :]), gout * ww)
        return [(ids[0], gx)]

    return _record("bilinear_upsample", out_data, (x,), bwd, fwd)


# ---------------------------------------------------------------------------
# linear and combination


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """(N,F) @ (O,F)^T, plus (O,) bias when given."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"inner extents disagree: input {x.data.shape} vs weight {weight.data.shape}")
    if bias is not None and bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
    xd, wd = x.data, weight.data
    out_data = xd @ wd.T if bias is None else xd @ wd.T + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(gout, ids):
        out = []
        if x.requires_grad:
            out.append((ids[0], gout @ wd))
        if weight.requires_grad:
            out.append((ids[1], gout.T @ xd))
        if bias is not None and bias.requires_grad:
            out.append((ids[2], gout.sum(axis=0)))
        return out

    return _record("linear", out_data, inputs, bwd,
                   lambda: xd @ wd.T if bias is None else xd @ wd.T + bias.data)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(base) or s[:1] + s[2:] != base[:1] + base[2:]:
            raise ShapeError(f"concat non-channel extents differ: {base} vs {s}")
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(gout, ids):
        out = []
        for k, t in enumerate(tensors):
            if t.requires_grad:
                sl = [slice(None)] * gout.ndim
                sl[1] = slice(offsets[k], offsets[k + 1])
                out.append((ids[k], np.ascontiguousarray(gout[tuple(sl)])))
        return out

    return _record("concat", np.concatenate([t.data for t in tensors], axis=1), tuple(tensors),
                   bwd, lambda: np.concatenate([t.data for t in tensors], axis=1))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Take channels [start, stop) of an (N, C, ...) tensor."""
    if x.data.ndim < 2:
        raise ShapeError(f"channel_slice expects a channel axis, got {x.data.shape}")
    c = x.data.shape[1]
    if not (0 <= start < stop <= c):
        raise ValueError(f"slice [{start}, {stop}) invalid for {c} channels")

    def fwd():
        return np.ascontiguousarray(x.data[:, start:stop])

    def bwd(gout, ids):
        if not x.requires_grad:
            return []
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = gout
        return [(ids[0], gx)]

    return _record("channel_slice", fwd(), (x,), bwd, fwd)


def combine(inputs: Sequence[Tensor], kind: str) -> Tensor:
    if kind == "concat":
        return concat_channels(inputs)
    if kind == "add":
        if not inputs:
            raise ValueError("add requires at least one tensor")
        out = inputs[0]
        for t in inputs[1:]:
            out = add(out, t)
        return out
    raise ValueError(f"combine kind must be 'add' or 'concat', got {kind!r}")
