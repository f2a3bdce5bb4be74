import numpy as np
import pytest

from nesthash.checkpoint import to_bytes
from nesthash.data import gen_synthetic, make_split
from nesthash.trainer import (TrainConfig, Trainer, TrainingError, _batches, apply_variant, bench_speed,
                              effective_lengths, parse_variant, single, train)
from nesthash.weighting import AlphaWeights
from oracles import (FD_RTOL, central_loss_naive, fd_check, lcs_loss_naive, mlp_codes_naive,
                     pairwise_loss_naive, pairwise_slacks)


def _cfg(**kw):
    base = dict(lengths=(4, 8, 16), epochs=2, batch_size=16, backbone_dims=(8, 12, 10), seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small():
    ds = gen_synthetic(4, 20, 8, 0.8, 5)
    return ds, make_split(ds, 4, 12, 5)


def test_parse_variant():
    assert parse_variant("full") == ("full", None)
    assert parse_variant("single:32") == ("single", 32)
    for bad in ("fast", "single:", "single:x", "single:0", "single:-4"):
        with pytest.raises(ValueError, match="unknown variant"):
            parse_variant(bad)


def test_variant_switches():
    table = {"full": (True, True), "basic": (False, False), "no_D": (False, True),
             "no_L": (True, False), "single:8": (False, False)}
    for v, expect in table.items():
        assert apply_variant(_cfg(variant=v)) == expect
    assert effective_lengths(_cfg(variant="single:8")) == (8,)
    assert single(_cfg(), 16).variant == "single:16"


def test_config_validation():
    with pytest.raises(ValueError, match="strictly increasing"):
        _cfg(lengths=(8, 8))
    with pytest.raises(ValueError):
        _cfg(batch_size=1)
    with pytest.raises(ValueError):
        _cfg(epochs=-1)


def test_batches_cover_all_and_merge_singleton():
    rng = np.random.default_rng(0)
    parts = _batches(33, 16, rng)
    assert [p.size for p in parts] == [16, 17]
    assert sorted(np.concatenate(parts).tolist()) == list(range(33))
    # the leftover sample joins the batch before it, nothing is dropped or repeated
    perm = np.random.default_rng(1).permutation(33)
    parts = _batches(33, 16, np.random.default_rng(1))
    assert parts[0].tolist() == perm[:16].tolist() and parts[1].tolist() == perm[16:].tolist()
    assert [p.size for p in _batches(32, 16, rng)] == [16, 16]


def test_zero_epochs_returns_initial_snapshots(small):
    ds, sp = small
    ckpts, stats = train(_cfg(epochs=0), ds, sp)
    assert stats == []
    assert sorted(ckpts.checkpoints) == [4, 8, 16]
    assert all(c.best_loss == float("inf") and c.epoch == 0 for c in ckpts.checkpoints.values())


def test_training_is_deterministic(small):
    ds, sp = small
    a, sa = train(_cfg(), ds, sp)
    b, sb = train(_cfg(), ds, sp)
    for bits in (4, 8, 16):
        assert to_bytes(a.checkpoints[bits]) == to_bytes(b.checkpoints[bits])
    strip = [{k: v for k, v in s.as_dict().items() if k != "seconds"} for s in sa]
    assert strip == [{k: v for k, v in s.as_dict().items() if k != "seconds"} for s in sb]


def test_best_loss_is_non_increasing(small):
    ds, sp = small
    ckpts, stats = train(_cfg(epochs=5), ds, sp)
    for bits, hist in ckpts.history.items():
        assert len(hist) == 5
        assert all(b <= a for a, b in zip(hist, hist[1:]))
        k = (4, 8, 16).index(bits)
        assert hist[-1] == min(s.task_loss[k] for s in stats)


def test_snapshot_is_truncated_layer(small):
    ds, sp = small
    ckpts, _ = train(_cfg(epochs=1), ds, sp)
    c = ckpts.checkpoints[8]
    assert c.layer.lengths == (4, 8) and c.layer.W.shape == (8, 11)
    assert c.run_lengths == (4, 8, 16)


def test_single_variant_is_one_length(small):
    ds, sp = small
    ckpts, stats = train(_cfg(variant="single:8", epochs=1), ds, sp)
    assert list(ckpts.checkpoints) == [8]
    assert stats[0].lcs_loss == [] and stats[0].alpha_mean == [1.0]


def test_basic_equals_full_with_unit_alphas_and_no_distillation(small):
    """With the weights pinned to 1 and lam=0 the full variant is the plain sum."""
    ds, sp = small
    tr = Trainer(_cfg(variant="full", lam=0.0, monitor=False), ds)
    tr.alpha_rule = lambda G: AlphaWeights(np.ones(3))
    full, _ = train(tr.cfg, ds, sp, trainer=tr)
    basic, _ = train(_cfg(variant="basic", monitor=False), ds, sp)
    for bits in (4, 8, 16):
        assert to_bytes(full.checkpoints[bits]) == to_bytes(basic.checkpoints[bits])


def test_basic_reports_unit_alphas(small):
    ds, sp = small
    _, stats = train(_cfg(variant="basic"), ds, sp)
    assert all(s.alpha_mean == [1.0, 1.0, 1.0] for s in stats)
    assert all(s.lcs_loss == [0.0, 0.0] for s in stats)


@pytest.mark.parametrize("objective", ["central", "pairwise"])
def test_full_pass_finite_differences(objective):
    """Backbone + nested layer + weighted objectives + distillation against finite differences.

    The weights and the distillation teachers are held at their values at the
    evaluation point, which is what the analytic pass differentiates.
    """
    rng = np.random.default_rng(7)
    ds = gen_synthetic(3, 4, 10, 1.0, 1)
    cfg = TrainConfig(lengths=(4, 8, 16), backbone_dims=(10, 16, 12), objective=objective,
                      quant_weight=0.1, margin=2.0, lam=0.7, seed=2, monitor=False)
    tr = Trainer(cfg, ds)
    for p in tr.params:
        p += rng.normal(scale=0.3, size=p.shape)
    # pin distinct weights so each objective's scale is visible to the check
    tr.alpha_rule = lambda G: AlphaWeights(np.array([1.0, 0.6, 0.3]))
    X, y = ds.features, ds.labels
    grads, _, _, alphas, _ = tr.gradients(X, y)
    w = alphas.normalized
    assert np.allclose(w, np.array([1.0, 0.6, 0.3]) * 3 / 1.9)
    lengths = cfg.lengths
    U0 = mlp_codes_naive(tr.params, X)
    if objective == "pairwise":
        slack = np.concatenate([pairwise_slacks(U0[:, :b], y, 2.0) for b in lengths])
        assert np.abs(slack).min() > 1e-3

    # extended precision keeps rounding noise of the O(10) loss out of the step-1e-6 quotient
    ext = np.longdouble
    U0x = U0.astype(ext)

    def loss():
        U = mlp_codes_naive(tr.params, X, ext)
        total = ext(0)
        for k, b in enumerate(lengths):
            if objective == "central":
                task = central_loss_naive(U[:, :b], y, tr.objective.centers[k], 0.1)
            else:
                task = pairwise_loss_naive(U[:, :b], y, 2.0, 0.1)
            total += w[k] * task
        for k in range(len(lengths) - 1):
            total += 0.7 * w[k] * lcs_loss_naive(U[:, :lengths[k]], U0x[:, :lengths[k + 1]])
        return total

    checked = 0
    for p, g in zip(tr.params, grads):
        coords = list(np.ndindex(p.shape))
        assert fd_check(loss, p, g, coords) < FD_RTOL
        checked += len(coords)
    assert checked >= 500


def test_non_finite_loss_raises(small, monkeypatch):
    ds, sp = small
    tr = Trainer(_cfg(), ds)
    real = tr.objective.evaluate

    def poisoned(U, labels):
        losses, grad = real(U, labels)
        losses = losses.copy()
        losses[1] = np.nan
        return losses, grad

    monkeypatch.setattr(tr.objective, "evaluate", poisoned)
    with pytest.raises(TrainingError, match="task loss at 8 bits"):
        train(tr.cfg, ds, sp, trainer=tr)


def test_monitor_reports_no_violations(small):
    ds, sp = small
    _, stats = train(_cfg(epochs=3), ds, sp)
    assert all(s.guarantee_violations == 0 for s in stats)
    assert all(0.0 <= a <= 1.0 for s in stats for a in s.anti_domination)


def test_input_dim_mismatch(small):
    ds, _ = small
    with pytest.raises(ValueError, match="input dim"):
        Trainer(_cfg(backbone_dims=(5, 10)), ds)


def test_bench_speed_single_length_ratio_near_one():
    ds = gen_synthetic(4, 150, 8, 0.8, 0)
    sp = make_split(ds, 10, 140, 0)
    rep = bench_speed(_cfg(lengths=(16,), epochs=3), ds, sp, repeats=3)
    assert rep.t_nhl > 0 and all(t > 0 for t in rep.t_separate.values())
    assert 0.8 <= rep.ratio <= 1.2, rep.as_dict()
