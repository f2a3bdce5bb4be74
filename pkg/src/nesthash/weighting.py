"""Dominance-aware dynamic weighting of the per-length objectives.

Length indices are 0-based in code. ``g[i]`` is the gradient of task loss
``L_i`` w.r.t. ``W[:b_i]``; its first ``b_k`` rows (``k <= i``) are the share of
that gradient landing on the length-``b_k`` head. ``g[k][:b_k]`` is the
dominant gradient for head ``k``.
"""
from dataclasses import dataclass

import numpy as np

from ._kernels import alpha_sequence
from .nhl import head_backward


@dataclass
class GradSet:
    g: list
    lengths: tuple

    def __post_init__(self):
        self.lengths = tuple(self.lengths)
        if len(self.g) != len(self.lengths):
            raise ValueError(f"{len(self.g)} gradients for {len(self.lengths)} lengths")
        for b, gi in zip(self.lengths, self.g):
            if gi.shape[0] != b:
                raise ValueError(f"gradient for length {b} has {gi.shape[0]} rows")
            if not np.all(np.isfinite(gi)):
                raise FloatingPointError(f"non-finite gradient for length {b}")

    @property
    def m(self):
        return len(self.lengths)

    def slice(self, i, k):
        return self.g[i][: self.lengths[k]]

    def stacked(self):
        """All gradients stacked by rows, objective 1 first."""
        st = getattr(self, "_stacked", None)
        if st is None:
            st = np.ascontiguousarray(np.vstack(self.g), dtype=np.float64)
            self._stacked = st
        return st

    @classmethod
    def from_stack(cls, G3, lengths):
        """Views into a zero-padded ``(m, b_m, l+1)`` stack."""
        return cls([G3[i, :b] for i, b in enumerate(lengths)], lengths)

    @classmethod
    def from_rows(cls, G, lengths):
        """Views into a row stack ``[g_1; g_2; ...; g_m]`` (the trainer's layout)."""
        lengths = tuple(int(b) for b in lengths)
        if G.ndim != 2 or G.shape[0] != sum(lengths):
            raise ValueError(f"stack of shape {G.shape} does not hold lengths {lengths}")
        if not np.all(np.isfinite(G)):
            raise FloatingPointError("non-finite task gradient")
        stops = np.cumsum(lengths)
        gs = cls.__new__(cls)
        gs.g = [G[s - b: s] for s, b in zip(stops, lengths)]
        gs.lengths = lengths
        gs._stacked = np.ascontiguousarray(G, dtype=np.float64)
        return gs


@dataclass
class AlphaWeights:
    raw: np.ndarray
    normalized: np.ndarray = None


def collect_task_grads(layer, V, U, dU_list):
    """Per-objective gradients on the nested head; ``dU_list[i]`` is dL_i/dU_i."""
    if len(dU_list) != layer.m:
        raise ValueError(f"expected {layer.m} loss gradients, got {len(dU_list)}")
    return GradSet([head_backward(layer, V, U, i, dU)[0] for i, dU in enumerate(dU_list)],
                   layer.lengths)


def _alpha_from_scalars(inner, dom_sq, alpha_k, m, k):
    # k is 0-based; the closed form uses the 1-based index k + 1
    if inner >= 0.0 or dom_sq == 0.0:
        return 1.0
    a = alpha_k / (k + 1 - m) * dom_sq / inner
    return min(a, 1.0)


def alpha_pair(g_i_k, g_k_k, alpha_k, m, k):
    """Largest weight (capped at 1) for objective i that keeps head k align-dominated.

    ``k`` is the 0-based length index of the dominant objective.
    """
    if g_i_k.shape != g_k_k.shape:
        raise ValueError(f"shape mismatch {g_i_k.shape} vs {g_k_k.shape}")
    a, b = g_i_k.ravel(), g_k_k.ravel()
    return _alpha_from_scalars(float(a @ b), float(b @ b), alpha_k, m, k)


def _starts(lengths):
    return np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)


def compute_alphas(gs):
    """Raw weights, computed in ascending order with alpha_1 fixed at 1."""
    lengths = np.asarray(gs.lengths, dtype=np.int64)
    alphas = np.empty(gs.m)
    alpha_sequence(gs.stacked(), _starts(lengths), lengths, alphas)
    return AlphaWeights(alphas)


class RowAlphas:
    """:func:`compute_alphas` on the trainer's row stack ``[g_1; ...; g_m]``.

    The last objective may be cut to ``lengths[-2]`` rows since no head reads
    the rest. Index arrays are built once per instance.
    """

    def __init__(self, lengths):
        self.lengths = np.asarray(lengths, dtype=np.int64)
        self.starts = _starts(self.lengths)

    def __call__(self, G):
        alphas = np.empty(self.lengths.size)
        alpha_sequence(np.ascontiguousarray(G, dtype=np.float64), self.starts, self.lengths,
                       alphas)
        return AlphaWeights(alphas)


def renormalize(a):
    raw = np.asarray(a.raw, dtype=np.float64)
    return AlphaWeights(raw, raw * (raw.size / raw.sum()))


def uniform_alphas(m):
    return AlphaWeights(np.ones(m), np.ones(m))


@dataclass
class DominationReport:
    inner: np.ndarray  # <sum_i alpha_i g_i^(k), g_k^(k)> per head
    total_norm: np.ndarray
    dominant_norm: np.ndarray
    anti: np.ndarray  # bool per head

    @property
    def fraction(self):
        return float(self.anti.mean()) if self.anti.size else 0.0

    def violations(self, rtol=1e-9):
        """Heads whose inner product is below ``-rtol * |total| * |dominant|``."""
        bound = -rtol * self.total_norm * self.dominant_norm
        return np.flatnonzero(self.inner < bound)


def domination_report(gs, weights):
    """Anti-domination verdict per head; a zero inner product counts as aligned."""
    w = np.asarray(weights, dtype=np.float64)
    m = gs.m
    inner = np.zeros(m)
    tnorm = np.zeros(m)
    dnorm = np.zeros(m)
    for k in range(m):
        total = w[k] * gs.g[k]
        for i in range(k + 1, m):
            total = total + w[i] * gs.slice(i, k)
        d = gs.g[k].ravel()
        t = total.ravel()
        inner[k] = float(t @ d)
        tnorm[k] = float(np.sqrt(t @ t))
        dnorm[k] = float(np.sqrt(d @ d))
    return DominationReport(inner, tnorm, dnorm, inner < 0.0)
