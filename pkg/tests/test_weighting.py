import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nesthash.nhl import head_backward, init_layer, nhl_forward
from nesthash.weighting import (AlphaWeights, GradSet, RowAlphas, alpha_pair, collect_task_grads,
                                compute_alphas, domination_report, renormalize, uniform_alphas)


def random_gradset(rng, m=None):
    m = int(rng.integers(2, 7)) if m is None else m
    lengths = np.sort(rng.choice(np.arange(1, 33), size=m, replace=False))
    # l + 1 columns with l >= 1; one-column sets are covered in exact arithmetic below
    cols = int(rng.integers(2, 7))
    # shared direction plus noise gives a mix of aligned and conflicting pairs
    base = rng.normal(size=(lengths[-1], cols))
    g = [rng.normal() * base[:b] + rng.normal(size=(b, cols)) for b in lengths]
    return GradSet(g, tuple(int(b) for b in lengths))


def python_alphas(gs):
    """Sequential recursion written directly on alpha_pair."""
    out = [1.0]
    for i in range(1, gs.m):
        out.append(min([1.0] + [alpha_pair(gs.slice(i, k), gs.g[k], out[k], gs.m, k)
                                for k in range(i)]))
    return np.array(out)


# ---- alpha_pair --------------------------------------------------------------

def test_alpha_pair_aligned_is_one():
    g = np.array([[1.0, 2.0]])
    assert alpha_pair(g, g, 1.0, 3, 0) == 1.0
    assert alpha_pair(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0, 3, 0) == 1.0


def test_alpha_pair_worked_example():
    # m=2, k=1: inner = -2, |g_1|^2 = 1 -> (1/(1-2)) * (1/(-2)) = 0.5
    a = alpha_pair(np.array([[-2.0, 0.0]]), np.array([[1.0, 0.0]]), 1.0, 2, 0)
    assert a == 0.5
    # substitution check: alpha * inner + alpha_1 * |g_1|^2 / (m - k) = -1 + 1 = 0
    assert a * -2.0 + 1.0 * 1.0 / (2 - 1) == 0.0


def test_alpha_pair_weak_conflict_is_clamped():
    g1 = np.array([[1.0, 0.0]])
    a = alpha_pair(-0.1 * g1, g1, 1.0, 2, 0)
    assert a == 1.0
    assert 1.0 * -0.1 + 1.0 >= 0.0


def test_alpha_pair_zero_dominant_gradient():
    assert alpha_pair(np.array([[-1.0]]), np.array([[0.0]]), 1.0, 2, 0) == 1.0


def test_alpha_pair_shape_mismatch():
    with pytest.raises(ValueError):
        alpha_pair(np.ones((2, 1)), np.ones((1, 1)), 1.0, 2, 0)


# ---- compute_alphas and renormalize ---------------------------------------

def test_compute_alphas_worked_example():
    gs = GradSet([np.array([[1.0, 0.0]]), np.array([[-2.0, 0.0], [5.0, 5.0]])], (1, 2))
    a = compute_alphas(gs)
    assert a.raw.tolist() == [1.0, 0.5]
    n = renormalize(a).normalized
    assert np.allclose(n, [4 / 3, 2 / 3]) and n.sum() == pytest.approx(2.0, abs=1e-12)


def test_worked_example_domination_verdicts():
    gs = GradSet([np.array([[1.0, 0.0]]), np.array([[-2.0, 0.0], [5.0, 5.0]])], (1, 2))
    rep = domination_report(gs, [1.0, 0.5])
    assert rep.inner[0] == 0.0 and not rep.anti[0]
    off = domination_report(gs, [1.0, 1.0])
    assert off.inner[0] == -1.0 and off.anti[0]
    assert off.fraction == 0.5


def test_all_aligned_gives_ones(rng):
    lengths = (2, 4, 8)
    base = np.abs(rng.normal(size=(8, 3)))
    gs = GradSet([base[:b] * (1 + i) for i, b in enumerate(lengths)], lengths)
    assert compute_alphas(gs).raw.tolist() == [1.0, 1.0, 1.0]


def test_kernel_matches_python_recursion(rng):
    for _ in range(300):
        gs = random_gradset(rng)
        assert np.allclose(compute_alphas(gs).raw, python_alphas(gs), rtol=1e-13, atol=0)


def test_row_alphas_accepts_cut_last_objective(rng):
    gs = random_gradset(rng, m=4)
    full = np.vstack(gs.g)
    cut = full[: full.shape[0] - (gs.lengths[-1] - gs.lengths[-2])]
    rule = RowAlphas(gs.lengths)
    assert np.array_equal(rule(full).raw, rule(cut).raw)
    assert np.array_equal(rule(full).raw, compute_alphas(gs).raw)


def test_uniform_and_fixed_point():
    u = uniform_alphas(4)
    assert u.raw.tolist() == [1.0] * 4 and u.normalized.tolist() == [1.0] * 4
    assert renormalize(AlphaWeights(np.ones(3))).normalized.tolist() == [1.0] * 3


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_alpha_invariants_property(seed):
    rng = np.random.default_rng(seed)
    gs = random_gradset(rng)
    a = renormalize(compute_alphas(gs))
    assert a.raw[0] == 1.0
    assert np.all(a.raw > 0.0) and np.all(a.raw <= 1.0)
    assert abs(a.normalized.sum() - gs.m) <= 1e-12
    # a common positive factor never flips a verdict outside the rounding band around zero
    r_raw = domination_report(gs, a.raw)
    r_norm = domination_report(gs, a.normalized)
    clear = np.abs(r_raw.inner) > 1e-9 * r_raw.total_norm * r_raw.dominant_norm
    assert np.array_equal(r_raw.anti[clear], r_norm.anti[clear])


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_guarantee_property(seed):
    gs = random_gradset(np.random.default_rng(seed))
    rep = domination_report(gs, compute_alphas(gs).raw)
    assert rep.violations(1e-9).size == 0


def test_gradset_validation():
    with pytest.raises(ValueError, match="rows"):
        GradSet([np.ones((2, 1)), np.ones((3, 1))], (2, 4))
    with pytest.raises(ValueError):
        GradSet([np.ones((2, 1))], (2, 4))
    with pytest.raises(FloatingPointError):
        GradSet([np.array([[np.nan]])], (1,))
    with pytest.raises(FloatingPointError):
        GradSet.from_rows(np.array([[np.inf], [0.0], [0.0]]), (1, 2))


def test_from_rows_views():
    G = np.arange(6.0).reshape(6, 1)
    gs = GradSet.from_rows(G, (2, 4))
    assert gs.g[0].ravel().tolist() == [0, 1] and gs.g[1].ravel().tolist() == [2, 3, 4, 5]
    assert gs.slice(1, 0).ravel().tolist() == [2, 3]


def test_collect_task_grads(rng):
    layer = init_layer((2, 5), 3, 0)
    V = rng.normal(size=(4, 3))
    U = nhl_forward(layer, V)
    zero = collect_task_grads(layer, V, U, [np.zeros((4, 2)), np.zeros((4, 5))])
    assert all(np.all(g == 0) for g in zero.g)
    dU = [rng.normal(size=(4, 2)), rng.normal(size=(4, 5))]
    gs = collect_task_grads(layer, V, U, dU)
    assert np.array_equal(gs.g[1], head_backward(layer, V, U, 1, dU[1])[0])
    assert np.allclose(gs.slice(1, 0), head_backward(layer, V, U, 0, dU[1][:, :2])[0])
    with pytest.raises(ValueError):
        collect_task_grads(layer, V, U, dU[:1])
    one = init_layer((4,), 3, 0)
    d = rng.normal(size=(4, 4))
    U1 = nhl_forward(one, V)
    assert np.array_equal(collect_task_grads(one, V, U1, [d]).g[0],
                          head_backward(one, V, U1, 0, d)[0])


def test_single_length_never_anti_dominated(rng):
    gs = GradSet([rng.normal(size=(3, 2))], (3,))
    assert not domination_report(gs, [1.0]).anti.any()
    assert compute_alphas(gs).raw.tolist() == [1.0]


def test_cost_exponent_in_m():
    """Wall time grows like m^2 at fixed l and b_m."""
    rng = np.random.default_rng(0)
    l, b_m = 255, 512
    ms = [4, 8, 16, 32]
    times = []
    for m in ms:
        lengths = tuple(int(round(b_m * (i + 1) / m)) for i in range(m))
        # every objective conflicts with every earlier head, so no pair is skipped
        g = [rng.normal(size=(b, l + 1)) for b in lengths]
        gs = GradSet(g, lengths)
        compute_alphas(gs)
        best = min(_time(lambda: compute_alphas(gs)) for _ in range(7))
        times.append(best)
    slope = np.polyfit(np.log(ms), np.log(times), 1)[0]
    assert 1.5 <= slope <= 2.5, f"fitted exponent {slope:.2f}, times {times}"


def _time(f):
    t0 = time.perf_counter()
    f()
    return time.perf_counter() - t0


def _dot(u, v, n):
    return sum(u[r] * v[r] for r in range(n))


def _exact_alphas(g, lengths):
    """The alpha recursion in rational arithmetic; g[i] is a list of b_i Fractions."""
    m = len(lengths)
    out = [Fraction(1)]
    for i in range(1, m):
        a = Fraction(1)
        for k in range(i):
            inner = _dot(g[i], g[k], lengths[k])
            sq = _dot(g[k], g[k], lengths[k])
            if inner < 0 and sq != 0:
                a = min(a, out[k] / (k + 1 - m) * sq / inner)
        out.append(a)
    return out


def test_scalar_head_holds_in_exact_arithmetic():
    """With a one-element first head the total on it is collinear with its gradient.

    When a constraint binds there, the exact projection is 0 and a float
    evaluation returns a rounding residue of either sign, so no tolerance
    relative to the total's norm can hold. The recursion itself is sound: in
    rationals the guarantee holds exactly, and the float alphas agree with the
    rational ones.
    """
    rng = np.random.default_rng(11)
    binding = 0
    for _ in range(1000):
        m = int(rng.integers(2, 7))
        lengths = tuple(range(1, m + 1))
        vals = [rng.normal(size=b) * 10.0 ** rng.uniform(-3, 3) for b in lengths]
        g = [[Fraction(float(x)) for x in v] for v in vals]
        exact = _exact_alphas(g, lengths)
        for k, b in enumerate(lengths):
            inner = sum(exact[i] * _dot(g[i], g[k], b) for i in range(k, m))
            assert inner >= 0
            binding += k == 0 and inner == 0
        gs = GradSet([v[:, None] for v in vals], lengths)
        assert np.allclose(compute_alphas(gs).raw, [float(a) for a in exact], rtol=1e-12, atol=0)
    assert binding > 0
