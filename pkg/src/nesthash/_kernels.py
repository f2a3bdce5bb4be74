"""Compiled inner loops for the per-step distillation and weighting math.

Compiled eagerly (explicit signatures, on-disk cache) so that no JIT pause
lands inside a timed training run.
"""
import numba as nb
import numpy as np

# reassociation and FMA contraction only, so NaN and inf still propagate
_FAST = {"reassoc", "contract", "nsz", "arcp"}


@nb.njit("void(f8[:, :, ::1], f8, f8[::1], f8[:, :, ::1])", cache=True, fastmath=_FAST)
def cascade_rows(sims, eps, losses, grads):
    """Distill row-normalized ``sims[k + 1]`` (teacher) into ``sims[k]`` (student).

    Writes the loss of every adjacent pair into ``losses`` and
    ``dL/dS + (dL/dS)^T`` for each student into ``grads``.
    """
    m, B = sims.shape[0], sims.shape[1]
    inv = np.empty((m, B))
    live = np.empty((m, B))
    for k in range(m):
        for i in range(B):
            ss = 0.0
            for j in range(B):
                ss += sims[k, i, j] * sims[k, i, j]
            n = np.sqrt(ss)
            # a norm at the floor is a constant, so it has no projection term
            live[k, i] = 1.0 if n > eps else 0.0
            inv[k, i] = 1.0 / max(n, eps)
    scale = 2.0 / (B * B)
    r = np.empty(B)
    d = np.empty(B)
    for k in range(m - 1):
        total = 0.0
        for i in range(B):
            a = inv[k, i]
            t = inv[k + 1, i]
            proj = 0.0
            for j in range(B):
                rj = sims[k, i, j] * a
                dj = rj - sims[k + 1, i, j] * t
                r[j] = rj
                d[j] = dj
                total += dj * dj
                proj += rj * dj
            proj *= live[k, i]
            c = scale * a
            for j in range(B):
                grads[k, i, j] = c * (d[j] - r[j] * proj)
        losses[k] = total / (B * B)
        for i in range(B):
            grads[k, i, i] *= 2.0
            for j in range(i + 1, B):
                s = grads[k, i, j] + grads[k, j, i]
                grads[k, i, j] = s
                grads[k, j, i] = s


@nb.njit("void(f8[:, :, ::1], f8[::1], f8[:, :, ::1])", cache=True, fastmath=_FAST)
def weighted_suffix(G, w, out):
    """``out[j] = sum_{k >= j} w[k] * G[k]``."""
    n, B = G.shape[0], G.shape[1]
    wl = w[n - 1]
    for i in range(B):
        for j in range(B):
            out[n - 1, i, j] = wl * G[n - 1, i, j]
    for k in range(n - 2, -1, -1):
        wk = w[k]
        for i in range(B):
            for j in range(B):
                out[k, i, j] = out[k + 1, i, j] + wk * G[k, i, j]



@nb.njit("void(f8[:, ::1], i8[::1], i8[::1], f8[::1])", cache=True, fastmath=_FAST)
def alpha_sequence(G, starts, lengths, alphas):
    """Raw dominance-aware weights from per-length gradients stacked by rows.

    Rows ``starts[i]:`` of ``G`` hold the gradient of objective ``i``; its
    first ``lengths[k]`` rows are its share on head ``k``. Only rows that some
    head reads must be present, so the last objective may be cut to
    ``lengths[m - 2]`` rows.
    """
    m, cols = lengths.shape[0], G.shape[1]
    dom_sq = np.zeros(m)
    for k in range(m - 1):
        s = 0.0
        for r in range(starts[k], starts[k] + lengths[k]):
            for c in range(cols):
                s += G[r, c] * G[r, c]
        dom_sq[k] = s
    alphas[0] = 1.0
    for i in range(1, m):
        a_i = 1.0
        for k in range(i):
            inner = 0.0
            for r in range(lengths[k]):
                gi = starts[i] + r
                gk = starts[k] + r
                for c in range(cols):
                    inner += G[gi, c] * G[gk, c]
            if inner < 0.0 and dom_sq[k] != 0.0:
                # k is 0-based here, so (k + 1) - m is the 1-based k - m
                a = alphas[k] / (k + 1 - m) * dom_sq[k] / inner
                if a < a_i:
                    a_i = a
        alphas[i] = a_i
