"""Per-length hashing losses and long-to-short similarity distillation.

Each loss returns its value together with the exact gradient w.r.t. the relaxed
codes it was given. The multi-length objectives evaluate every nested length of
one batch together. Their gradients use a *segment* layout: the columns of
``U[:, :b_1] | U[:, :b_2] | ... | U[:, :b_m]`` side by side, width ``sum(b_k)``.
"""
from dataclasses import dataclass

import numpy as np

from ._kernels import cascade_rows, weighted_suffix

PROB_CLAMP = 1e-7
LCS_EPS = 1e-12


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "central"
    quant_weight: float = 0.1
    margin: float = 2.0

    def __post_init__(self):
        if self.kind not in ("central", "pairwise"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.quant_weight < 0:
            raise ValueError("quant_weight must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


@dataclass(frozen=True)
class LcsConfig:
    lam: float = 1.0
    epsilon: float = LCS_EPS

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


class Segments:
    """Index bookkeeping for the concatenated per-length layout."""

    def __init__(self, lengths):
        self.lengths = tuple(int(b) for b in lengths)
        self.m = len(self.lengths)
        self.stops = np.cumsum(self.lengths)
        self.starts = self.stops - np.asarray(self.lengths)
        self.index = np.concatenate([np.arange(b) for b in self.lengths])
        self.owner = np.repeat(np.arange(self.m), self.lengths)
        self.width = int(self.stops[-1])

    def gather(self, U):
        return U[:, self.index]

    def part(self, X, k):
        return X[:, self.starts[k]: self.stops[k]]

    def split(self, X):
        return [self.part(X, k) for k in range(self.m)]

    def fold(self, X, weights):
        """``sum_k weights[k] * pad(part k)`` as a ``(B, b_m)`` matrix."""
        out = np.zeros((X.shape[0], self.lengths[-1]))
        for k, b in enumerate(self.lengths):
            if weights[k]:
                out[:, :b] += weights[k] * X[:, self.starts[k]: self.stops[k]]
        return out

    def column_sums_per_segment(self, X):
        return np.add.reduceat(X.sum(axis=0), self.starts)


# ---- hash centers ---------------------------------------------------------

def sylvester_hadamard(n):
    if n < 1 or n & (n - 1):
        raise ValueError(f"Sylvester construction needs a power of two, got {n}")
    H = np.ones((1, 1))
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    return H


def gen_hash_centers(num_classes, bits, seed, max_attempts=1000):
    """One +-1 target code per class.

    Uses rows of ``[H; -H]`` when ``bits`` is a power of two and
    ``num_classes <= 2 * bits``; otherwise distinct random Bernoulli rows.
    """
    if num_classes < 2 or bits < 1:
        raise ValueError("need num_classes >= 2 and bits >= 1")
    if bits & (bits - 1) == 0 and num_classes <= 2 * bits:
        H = sylvester_hadamard(bits)
        return np.vstack([H, -H])[:num_classes].copy()
    rng = np.random.default_rng(seed)
    centers = np.where(rng.random((num_classes, bits)) < 0.5, -1.0, 1.0)
    attempts = 0
    while True:
        _, first = np.unique(centers, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(num_classes), first)
        if dup.size == 0:
            return centers
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(
                f"could not draw {num_classes} distinct {bits}-bit centers in "
                f"{max_attempts} attempts; use a longer code length")
        centers[dup] = np.where(rng.random((dup.size, bits)) < 0.5, -1.0, 1.0)


# ---- quantization ---------------------------------------------------------

def _quant_terms(U, seg, quant_weight):
    # per-length mean((|u|-1)^2) and its gradient in segment layout
    a = np.abs(U) - 1.0
    counts = U.shape[0] * np.asarray(seg.lengths, dtype=np.float64)
    prefix = np.cumsum((a * a).sum(axis=0))
    losses = quant_weight * prefix[np.asarray(seg.lengths) - 1] / counts
    g = (2.0 * quant_weight) * a * np.sign(U)
    return losses, g[:, seg.index] / counts[seg.owner]


# ---- center-based objective ----------------------------------------------

class CentralObjective:
    """Binary cross entropy toward per-class hash centers, plus quantization."""

    def __init__(self, lengths, num_classes, seed, quant_weight=0.0, centers=None):
        self.seg = Segments(lengths)
        self.quant_weight = quant_weight
        if centers is None:
            centers = [gen_hash_centers(num_classes, b, seed + b) for b in self.seg.lengths]
        self.centers = centers
        self._cat = np.hstack(centers)

    def evaluate(self, U, labels):
        """Per-length losses and their gradients in segment layout."""
        seg = self.seg
        U = np.asarray(U, dtype=np.float64)
        if U.shape[1] < seg.lengths[-1]:
            raise ValueError(f"codes have {U.shape[1]} bits, need {seg.lengths[-1]}")
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self._cat.shape[0]):
            raise ValueError("label outside the range of hash centers")
        C = self._cat[labels]
        # t = (1+c)/2 turns the cross entropy into -log q with q = (1 + c*u)/2
        q = 0.5 + 0.5 * C * seg.gather(U)
        qc = np.clip(q, PROB_CLAMP, 1.0 - PROB_CLAMP)
        counts = U.shape[0] * np.asarray(seg.lengths, dtype=np.float64)
        losses = -seg.column_sums_per_segment(np.log(qc)) / counts
        grad = np.where(q == qc, -0.5 * C / qc, 0.0) / counts[seg.owner]
        if self.quant_weight:
            ql, qg = _quant_terms(U, seg, self.quant_weight)
            losses = losses + ql
            grad = grad + qg
        return losses, grad


def central_loss(U_k, labels, centers_k, quant_weight=0.0):
    U_k = np.asarray(U_k, dtype=np.float64)
    if centers_k.shape[1] != U_k.shape[1]:
        raise ValueError("center width differs from code width")
    obj = CentralObjective((U_k.shape[1],), centers_k.shape[0], 0, quant_weight, [centers_k])
    losses, grad = obj.evaluate(U_k, labels)
    return float(losses[0]), grad


# ---- pairwise objective ---------------------------------------------------

class PairwiseObjective:
    """Contrastive loss over all unordered in-batch pairs, plus quantization.

    Similar pairs pay their squared distance; dissimilar pairs pay the hinge
    ``max(0, margin * b - d)``. A hinge exactly at zero contributes nothing.
    """

    def __init__(self, lengths, margin, quant_weight=0.0):
        self.seg = Segments(lengths)
        self.margin = margin
        self.quant_weight = quant_weight

    def evaluate(self, U, labels):
        seg = self.seg
        U = np.asarray(U, dtype=np.float64)
        B = U.shape[0]
        if B < 2:
            raise ValueError("pairwise loss needs at least two samples")
        labels = np.asarray(labels)
        off = ~np.eye(B, dtype=bool)
        sim = (labels[:, None] == labels[None, :]) & off
        dis = ~sim & off
        n_pairs = B * (B - 1) / 2.0
        losses = np.zeros(seg.m)
        grad = np.empty((B, seg.width))
        S = np.zeros((B, B))
        lo = 0
        for k, b in enumerate(seg.lengths):
            blk = U[:, lo:b]
            S = S + blk @ blk.T
            lo = b
            sq = S.diagonal()
            D = sq[:, None] + sq[None, :] - 2.0 * S
            slack = self.margin * b - D
            active = dis & (slack > 0)
            # full symmetric matrices count each unordered pair twice
            losses[k] = (D[sim].sum() + slack[active].sum()) / (2.0 * n_pairs)
            coef = sim.astype(np.float64) - active
            Uk = U[:, :b]
            grad[:, seg.starts[k]: seg.stops[k]] = (2.0 / n_pairs) * (
                coef.sum(axis=1)[:, None] * Uk - coef @ Uk)
        if self.quant_weight:
            ql, qg = _quant_terms(U, seg, self.quant_weight)
            losses = losses + ql
            grad = grad + qg
        return losses, grad


def pairwise_loss(U_k, labels, margin, quant_weight=0.0):
    U_k = np.asarray(U_k, dtype=np.float64)
    losses, grad = PairwiseObjective((U_k.shape[1],), margin, quant_weight).evaluate(U_k, labels)
    return float(losses[0]), grad


# ---- long-short cascade self-distillation --------------------------------

def _lcs_core(sims, eps):
    """Cascade over a stack of similarity matrices, ``sims[k+1]`` teaching ``sims[k]``.

    Returns ``(losses, G)`` with ``G[k] = dL/dS_k + (dL/dS_k)^T``; the student
    code gradient is then ``G[k] @ U_k``. Teachers are constants.
    """
    sims = np.ascontiguousarray(sims, dtype=np.float64)
    n = sims.shape[0] - 1
    losses = np.empty(n)
    G = np.empty((n,) + sims.shape[1:])
    cascade_rows(sims, float(eps), losses, G)
    return losses, G


def lcs_loss(U_k, U_next, eps=LCS_EPS):
    """Match normalized in-batch similarity rows of ``U_k`` to those of ``U_next``.

    ``U_next`` is a stop-gradient teacher; only ``dL/dU_k`` is returned.
    """
    U_k = np.asarray(U_k, dtype=np.float64)
    U_next = np.asarray(U_next, dtype=np.float64)
    if U_k.shape[0] != U_next.shape[0]:
        raise ValueError("student and teacher codes come from different batches")
    if U_k.shape[0] < 2:
        raise ValueError("distillation needs at least two samples")
    losses, G = _lcs_core(np.stack([U_k @ U_k.T, U_next @ U_next.T]), eps)
    return float(losses[0]), G[0] @ U_k


def nested_similarities(U, lengths):
    """Stack of ``U[:, :b_k] @ U[:, :b_k].T`` for every length, built blockwise."""
    out = np.empty((len(lengths), U.shape[0], U.shape[0]))
    lo = 0
    for k, b in enumerate(lengths):
        blk = U[:, lo:b]
        if k:
            np.add(out[k - 1], blk @ blk.T, out=out[k])
        else:
            np.matmul(blk, blk.T, out=out[k])
        lo = b
    return out


class CascadeDistillation:
    """Distillation from every length ``b_{k+1}`` into ``b_k``, k = 1..m-1."""

    def __init__(self, lengths, eps=LCS_EPS):
        self.lengths = tuple(lengths)
        self.eps = eps

    def evaluate(self, U):
        """Losses (m-1,) and the per-pair symmetric similarity gradients."""
        return _lcs_core(nested_similarities(U, self.lengths), self.eps)

    def code_grad(self, U, G, weights):
        """``sum_k weights[k] * dL^lcs_k/dU`` folded to a ``(B, b_m)`` matrix.

        Column block ``j`` (between ``b_{j-1}`` and ``b_j``) only feeds the
        students ``k >= j``, so a suffix sum of the weighted ``G`` handles all
        pairs with one product per block.
        """
        out = np.zeros((U.shape[0], self.lengths[-1]))
        if len(G) == 0:
            return out
        w = np.ascontiguousarray(weights[: len(G)], dtype=np.float64)
        suffix = np.empty_like(G)
        weighted_suffix(G, w, suffix)
        lo = 0
        for j, b in enumerate(self.lengths[:-1]):
            np.matmul(suffix[j], U[:, lo:b], out=out[:, lo:b])
            lo = b
        return out

    def grads(self, U):
        """Losses and the per-pair gradients w.r.t. each student ``U[:, :b_k]``."""
        losses, G = self.evaluate(U)
        return losses, [G[k] @ U[:, :b] for k, b in enumerate(self.lengths[:-1])]


def make_objective(cfg, lengths, num_classes, seed):
    if cfg.kind == "central":
        return CentralObjective(lengths, num_classes, seed, cfg.quant_weight)
    return PairwiseObjective(lengths, cfg.margin, cfg.quant_weight)
