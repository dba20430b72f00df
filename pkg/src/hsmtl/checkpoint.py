"""Binary checkpoint container for parameters, norm statistics, and balancer.

Layout, all integers little-endian:

  magic "MTLC" | version u32
  u32 parameter count, then per parameter:
      u32 name length | name utf-8 | u32 ndim | u32 dims... | f64 values
  u32 norm-state count, then per state:
      u32 name length | name utf-8 | u32 channels | f64 means | f64 vars
  u8 balancer kind (0 none, 1 per-task log-variances, 2 adaptive weights)
      kind 1: u32 count | f64 s values
      kind 2: u32 count | f64 weights | f64 initial losses
"""

from __future__ import annotations

import struct

import numpy as np

from .losses import GradNormState, UncertaintyState

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"MTLC"
VERSION = 1


class CheckpointError(Exception):
    pass


def _pack_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _pack_named(name: str, payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + payload


def save_checkpoint(path, model, balancer=None):
    """Write every parameter, running stat, and the balancer state."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    params = model.named_params()
    chunks.append(struct.pack("<I", len(params)))
    for name, tensor in params:
        shape = tensor.data.shape
        payload = struct.pack("<I", len(shape))
        payload += struct.pack(f"<{len(shape)}I", *shape) if shape else b""
        payload += _pack_array(tensor.data)
        chunks.append(_pack_named(name, payload))
    states = model.named_states()
    chunks.append(struct.pack("<I", len(states)))
    for name, st in states:
        payload = struct.pack("<I", st.mean.size)
        payload += _pack_array(st.mean) + _pack_array(st.var)
        chunks.append(_pack_named(name, payload))
    if balancer is None:
        chunks.append(struct.pack("<B", 0))
    elif isinstance(balancer, UncertaintyState):
        values = [float(t.data) for t in balancer.s]
        chunks.append(struct.pack("<B", 1) + struct.pack("<I", len(values)))
        chunks.append(_pack_array(np.array(values)))
    elif isinstance(balancer, GradNormState):
        if balancer.weights is None:
            chunks.append(struct.pack("<B", 2) + struct.pack("<I", 0))
        else:
            chunks.append(struct.pack("<B", 2) + struct.pack("<I", balancer.weights.size))
            chunks.append(_pack_array(balancer.weights))
            chunks.append(_pack_array(balancer.initial_losses))
    else:
        raise CheckpointError(f"unknown balancer type {type(balancer).__name__}")
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes at offset {self.off}, "
                f"{len(self.raw) - self.off} remain")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").copy()


def load_checkpoint(path, model, balancer=None):
    """Restore a model in place; names and shapes must match exactly.

    The first incompatible parameter is named in the error.  When
    ``balancer`` is given its stored state is restored into it; a stored
    balancer of a different kind is an error.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    stored = {}
    order = []
    for _ in range(r.u32()):
        name = r.name()
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        stored[name] = r.f64(count).reshape(shape)
        order.append(name)
    params = model.named_params()
    have = dict(params)
    for name, _ in params:
        if name not in stored:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
    for name in order:
        if name not in have:
            raise CheckpointError(f"checkpoint has unexpected parameter {name!r}")
        if stored[name].shape != have[name].data.shape:
            raise CheckpointError(
                f"shape mismatch for parameter {name!r}: checkpoint "
                f"{stored[name].shape}, model {have[name].data.shape}")
    for name, tensor in params:
        # stored arrays are fresh and contiguous; ascontiguousarray would
        # promote 0-d shapes to (1,)
        tensor.data = stored[name]

    states = model.named_states()
    stored_states = {}
    for _ in range(r.u32()):
        name = r.name()
        channels = r.u32()
        stored_states[name] = (r.f64(channels), r.f64(channels))
    for name, st in states:
        if name not in stored_states:
            raise CheckpointError(f"checkpoint is missing norm state {name!r}")
        mean, var = stored_states[name]
        if mean.size != st.mean.size:
            raise CheckpointError(f"channel mismatch for norm state {name!r}")
        st.mean = mean
        st.var = var
    for name in stored_states:
        if name not in dict(states):
            raise CheckpointError(f"checkpoint has unexpected norm state {name!r}")

    kind = struct.unpack("<B", r.take(1))[0]
    if kind == 1:
        values = r.f64(r.u32())
        if balancer is not None:
            if not isinstance(balancer, UncertaintyState):
                raise CheckpointError("stored balancer is per-task log-variances")
            if len(balancer.s) != values.size:
                raise CheckpointError(
                    f"balancer task count mismatch: checkpoint {values.size}, "
                    f"model {len(balancer.s)}")
            for t, v in zip(balancer.s, values):
                t.data = np.asarray(v, dtype=np.float64)
    elif kind == 2:
        count = r.u32()
        if count:
            weights = r.f64(count)
            initial = r.f64(count)
            if balancer is not None:
                if not isinstance(balancer, GradNormState):
                    raise CheckpointError("stored balancer is adaptive weights")
                balancer.weights = weights
                balancer.initial_losses = initial
    elif kind != 0:
        raise CheckpointError(f"unknown balancer kind {kind}")
    if r.off != len(r.raw):
        raise CheckpointError(
            f"trailing garbage: {len(r.raw) - r.off} bytes past the balancer state")
    return kind
