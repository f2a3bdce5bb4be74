"""Nested hash layer: one weight matrix whose row prefixes are the hash heads.

``W`` has shape ``(b_m, l + 1)``; the last column is the bias, applied to the
augmented feature ``[v, 1]``. The head for length ``b_k`` is ``W[:b_k]``.
"""
from dataclasses import dataclass

import numpy as np


@dataclass
class NestedHashLayer:
    W: np.ndarray
    lengths: tuple

    def __post_init__(self):
        self.lengths = tuple(int(b) for b in self.lengths)
        if not self.lengths or self.lengths[0] <= 0:
            raise ValueError("lengths must be positive")
        if any(a >= b for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValueError(f"lengths must be strictly increasing, got {self.lengths}")
        if self.W.ndim != 2 or self.W.shape[0] != self.lengths[-1]:
            raise ValueError(
                f"W has shape {self.W.shape}; expected {self.lengths[-1]} rows")

    @property
    def m(self):
        return len(self.lengths)

    @property
    def feature_dim(self):
        return self.W.shape[1] - 1

    def head(self, k):
        """Row-prefix view for length index ``k`` (0-based)."""
        return self.W[: self.lengths[k]]

    def truncated(self, k):
        """A standalone layer holding lengths ``b_1..b_k`` (0-based ``k``)."""
        return NestedHashLayer(self.W[: self.lengths[k]].copy(), self.lengths[: k + 1])

    def copy(self):
        return NestedHashLayer(self.W.copy(), self.lengths)


def init_layer(lengths, feature_dim, seed):
    rng = np.random.default_rng(seed)
    b_m = int(lengths[-1])
    bound = np.sqrt(6.0 / (feature_dim + b_m))
    W = np.zeros((b_m, feature_dim + 1))
    W[:, :feature_dim] = rng.uniform(-bound, bound, size=(b_m, feature_dim))
    return NestedHashLayer(W, tuple(lengths))


def augment(V):
    V = np.asarray(V, dtype=np.float64)
    return np.hstack([V, np.ones((V.shape[0], 1))])


def nhl_forward(layer, V):
    """Relaxed codes at the longest length; shorter ones are column prefixes.

    Returns ``U_m`` of shape ``(B, b_m)``. Use :func:`code_prefix` to read ``U_k``.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != layer.feature_dim:
        raise ValueError(f"features of shape {V.shape} do not match layer dim {layer.feature_dim}")
    return np.tanh(V @ layer.W[:, :-1].T + layer.W[:, -1])


def code_prefix(layer, U, k):
    return U[:, : layer.lengths[k]]


def code_batch(layer, U):
    return [code_prefix(layer, U, k) for k in range(layer.m)]


def binarize(U):
    return np.where(np.asarray(U) >= 0, 1.0, -1.0)


def head_backward(layer, V, U, k, dU_k):
    """Gradient of a loss on ``U_k`` w.r.t. ``W[:b_k]`` and w.r.t. ``V``.

    ``U`` is the full relaxed output of :func:`nhl_forward`; only its first
    ``b_k`` columns are read.
    """
    if not 0 <= k < layer.m:
        raise IndexError(f"length index {k} outside [0, {layer.m})")
    b = layer.lengths[k]
    dU_k = np.asarray(dU_k, dtype=np.float64)
    if dU_k.shape != (U.shape[0], b):
        raise ValueError(f"dL/dU has shape {dU_k.shape}, expected {(U.shape[0], b)}")
    u = U[:, :b]
    delta = dU_k * (1.0 - u * u)
    G = delta.T @ augment(V)
    dV = delta @ layer.W[:b, :-1]
    return G, dV


def accumulate_W_grad(layer, parts):
    """Sum ``weight * G_k`` into the row prefixes of a zero ``W``-shaped matrix.

    ``parts`` is an iterable of ``(k, G_k, weight)`` with 0-based ``k``.
    """
    out = np.zeros_like(layer.W)
    for k, G, w in parts:
        b = layer.lengths[k]
        if G.shape != (b, layer.W.shape[1]):
            raise ValueError(f"part for length {b} has shape {G.shape}")
        out[:b] += w * G
    return out
