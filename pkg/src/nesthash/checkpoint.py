"""Per-length model snapshots and the NHLC binary checkpoint format.

Layout (all integers little-endian u32, all floats little-endian f64)::

    "NHLC" version=1 n_layers
    per layer: out in  W[out*in] bias[out]
    nested layer: b_m (l+1) m lengths[m] W[b_m*(l+1)]
    run lengths: count lengths[count]

A passthrough backbone has ``n_layers = 0``; its input dim is ``l``.
"""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import MlpParams
from .nhl import NestedHashLayer

MAGIC = b"NHLC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    backbone: MlpParams
    layer: NestedHashLayer
    run_lengths: tuple
    best_loss: float = float("inf")
    epoch: int = 0

    @property
    def bits(self):
        return self.layer.lengths[-1]


def _u32(*vals):
    return struct.pack(f"<{len(vals)}I", *vals)


def to_bytes(ckpt):
    bb, layer = ckpt.backbone, ckpt.layer
    parts = [MAGIC, _u32(VERSION, len(bb.weights))]
    for w, b in zip(bb.weights, bb.biases):
        parts.append(_u32(*w.shape))
        parts.append(w.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    parts.append(_u32(layer.W.shape[0], layer.W.shape[1], layer.m, *layer.lengths))
    parts.append(layer.W.astype("<f8").tobytes())
    parts.append(_u32(len(ckpt.run_lengths), *ckpt.run_lengths))
    return b"".join(parts)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, n, what):
        if self.off + n > len(self.raw):
            missing = self.off + n - len(self.raw)
            raise CheckpointError(
                f"{self.path}: truncated while reading {what} at byte {self.off} "
                f"(missing {missing} bytes)")
        chunk = self.raw[self.off: self.off + n]
        self.off += n
        return chunk

    def u32(self, count, what):
        return struct.unpack(f"<{count}I", self.take(4 * count, what))

    def f64(self, count, what):
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def from_bytes(raw, path="<bytes>"):
    r = _Reader(raw, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not an NHLC checkpoint")
    version, n_layers = r.u32(2, "header")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    weights, biases = [], []
    for i in range(n_layers):
        out, inp = r.u32(2, f"layer {i} dims")
        weights.append(r.f64(out * inp, f"layer {i} weight").reshape(out, inp))
        biases.append(r.f64(out, f"layer {i} bias"))
    b_m, cols, m = r.u32(3, "nested layer header")
    lengths = r.u32(m, "nested layer lengths")
    W = r.f64(b_m * cols, "nested layer weights").reshape(b_m, cols)
    (count,) = r.u32(1, "run lengths count")
    run_lengths = r.u32(count, "run lengths")
    if r.off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.off} trailing bytes")
    input_dim = weights[0].shape[1] if weights else cols - 1
    backbone = MlpParams(weights, biases, input_dim)
    if backbone.out_dim != cols - 1:
        raise CheckpointError(
            f"{path}: backbone output {backbone.out_dim} != hash layer input {cols - 1}")
    return Checkpoint(backbone, NestedHashLayer(W, lengths), tuple(run_lengths))


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path):
    path = Path(path)
    return from_bytes(path.read_bytes(), path)
