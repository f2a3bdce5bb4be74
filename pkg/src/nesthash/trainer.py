"""Multi-length training loop with dynamic weighting and cascade distillation."""
import logging
import resource
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone as bb
from .checkpoint import Checkpoint
from .nhl import augment, init_layer, nhl_forward
from .objectives import CascadeDistillation, ObjectiveConfig, make_objective
from .weighting import GradSet, RowAlphas, domination_report, renormalize, uniform_alphas

log = logging.getLogger(__name__)

VARIANTS = ("full", "basic", "no_D", "no_L")
GUARANTEE_RTOL = 1e-9


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lengths: tuple = (8, 16, 32, 64, 128)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 1.0
    objective: str = "central"
    quant_weight: float = 0.1
    margin: float = 2.0
    seed: int = 0
    variant: str = "full"
    backbone_dims: tuple = (64, 128, 64)
    monitor: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(b) for b in self.lengths))
        object.__setattr__(self, "backbone_dims", tuple(int(d) for d in self.backbone_dims))
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.lengths or any(a >= b for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValueError(f"lengths must be strictly increasing, got {self.lengths}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.backbone_dims:
            raise ValueError("backbone_dims must name at least the input dim")
        parse_variant(self.variant)
        ObjectiveConfig(self.objective, self.quant_weight, self.margin)


def parse_variant(variant):
    """``(name, bits)``; ``bits`` is set only for ``single:<bits>``."""
    if variant in VARIANTS:
        return variant, None
    if variant.startswith("single:"):
        try:
            bits = int(variant.split(":", 1)[1])
        except ValueError:
            bits = 0
        if bits > 0:
            return "single", bits
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS} or single:<bits>")


def apply_variant(cfg):
    """(weighting on, distillation on) for a config's variant."""
    name, _ = parse_variant(cfg.variant)
    return {"full": (True, True), "basic": (False, False), "no_D": (False, True),
            "no_L": (True, False), "single": (False, False)}[name]


def effective_lengths(cfg):
    name, bits = parse_variant(cfg.variant)
    return (bits,) if name == "single" else cfg.lengths


def single(cfg, bits):
    return replace(cfg, variant=f"single:{bits}")


@dataclass
class EpochStats:
    epoch: int
    lengths: tuple
    task_loss: list
    lcs_loss: list
    alpha_mean: list
    anti_domination: list
    guarantee_violations: int
    steps: int
    seconds: float

    def as_dict(self):
        return {
            "epoch": self.epoch,
            "lengths": list(self.lengths),
            "task_loss": self.task_loss,
            "lcs_loss": self.lcs_loss,
            "alpha_mean": self.alpha_mean,
            "anti_domination": self.anti_domination,
            "guarantee_violations": self.guarantee_violations,
            "steps": self.steps,
            "seconds": self.seconds,
        }


@dataclass
class CheckpointSet:
    checkpoints: dict = field(default_factory=dict)  # bits -> Checkpoint
    history: dict = field(default_factory=dict)  # bits -> [best loss after each epoch]

    def update(self, epoch, losses, backbone, layer, run_lengths):
        improved = []
        for k, bits in enumerate(layer.lengths):
            ck = self.checkpoints.get(bits)
            if ck is None or losses[k] < ck.best_loss:
                self.checkpoints[bits] = Checkpoint(
                    backbone.copy(), layer.truncated(k), run_lengths, float(losses[k]), epoch)
                improved.append(bits)
            self.history.setdefault(bits, []).append(self.checkpoints[bits].best_loss)
        return improved


class Trainer:
    """Holds model/optimizer state; :meth:`step` runs one mini-batch update."""

    def __init__(self, cfg, ds):
        self.cfg = cfg
        self.ds = ds
        self.lengths = effective_lengths(cfg)
        self.m = len(self.lengths)
        self.weighting, lcs_on = apply_variant(cfg)
        self.lam = cfg.lam if lcs_on and self.m > 1 else 0.0
        dims = list(cfg.backbone_dims)
        if dims[0] != ds.dim:
            raise ValueError(f"backbone input dim {dims[0]} != dataset dim {ds.dim}")
        self.backbone = bb.init_mlp(dims, cfg.seed)
        self.layer = init_layer(self.lengths, dims[-1], cfg.seed + 1)
        self.objective = make_objective(
            ObjectiveConfig(cfg.objective, cfg.quant_weight, cfg.margin),
            self.lengths, ds.num_classes, cfg.seed)
        self.params = self.backbone.arrays() + [self.layer.W]
        self.param_names = self.backbone.names() + ["hash.W"]
        self.opt = bb.AdamState.for_params(self.params)
        self.distill = CascadeDistillation(self.lengths)
        self.monitor = cfg.monitor and self.m > 1
        # row stack of per-length W gradients -> raw AlphaWeights
        self.alpha_rule = RowAlphas(self.lengths)
        seg = self.objective.seg
        # without the monitor, rows of the last objective past b_{m-1} are never read
        keep = seg.width - (self.lengths[-1] - self.lengths[-2]) if self.m > 1 else 0
        self._alpha_cols = slice(0, keep)

    def gradients(self, X, y):
        """Gradients of the weighted objective for one batch, without updating.

        Returns (grads aligned with ``self.params``, task losses, lcs losses,
        AlphaWeights, DominationReport or None).
        """
        seg = self.objective.seg
        V, cache = bb.forward(self.backbone, X)
        U = nhl_forward(self.layer, V)
        task, dU_task = self.objective.evaluate(U, y)
        dtanh = 1.0 - U * U
        Xa = augment(V)

        gs = None
        if self.monitor:
            # rows of G are the per-length head gradients stacked in segment order
            G = (dU_task * seg.gather(dtanh)).T @ Xa
            gs = GradSet.from_rows(G, self.lengths)
        elif self.weighting and self.m > 1:
            cols = self._alpha_cols
            G = (dU_task[:, cols] * dtanh[:, seg.index[cols]]).T @ Xa
        if self.weighting and self.m > 1:
            alphas = renormalize(self.alpha_rule(G))
        else:
            alphas = uniform_alphas(self.m)
        w = alphas.normalized
        report = domination_report(gs, w) if self.monitor else None

        dU = seg.fold(dU_task, w)
        if self.lam:
            lcs, G_lcs = self.distill.evaluate(U)
            dU += self.lam * self.distill.code_grad(U, G_lcs, w)
        else:
            lcs = np.zeros(self.m - 1)
        D = dU * dtanh
        dW_hash = D.T @ Xa
        dV = D @ self.layer.W[:, :-1]
        dWs, dbs, _ = bb.backward(self.backbone, cache, dV)
        grads = []
        for gw, gb in zip(dWs, dbs):
            grads += [gw, gb]
        grads.append(dW_hash)
        return grads, task, lcs, alphas, report

    def step(self, X, y):
        """One update. Returns (task losses, lcs losses, raw alphas, report or None)."""
        grads, task, lcs, alphas, report = self.gradients(X, y)
        bb.adam_step(self.params, grads, self.opt, self.cfg.lr, self.param_names)
        return task, lcs, alphas.raw, report


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    out = [perm[s: s + batch_size] for s in range(0, n, batch_size)]
    if len(out) > 1 and out[-1].size < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def init_checkpoints(tr):
    """A CheckpointSet holding the initial parameters for every length."""
    ckpts = CheckpointSet()
    for k, bits in enumerate(tr.lengths):
        ckpts.checkpoints[bits] = Checkpoint(
            tr.backbone.copy(), tr.layer.truncated(k), tr.lengths, float("inf"), 0)
    return ckpts


def run_epochs(tr, split, ckpts):
    """Train epoch by epoch, updating ``ckpts``; yields one EpochStats per epoch."""
    cfg, ds, m = tr.cfg, tr.ds, tr.m
    X = ds.features[split.train_idx]
    Y = ds.labels[split.train_idx]
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        task_sum = np.zeros(m)
        lcs_sum = np.zeros(max(m - 1, 0))
        alpha_sum = np.zeros(m)
        anti = np.zeros(m)
        violations = 0
        batches = _batches(X.shape[0], cfg.batch_size, rng)
        for bi, idx in enumerate(batches):
            task, lcs, raw, report = tr.step(X[idx], Y[idx])
            if not (np.all(np.isfinite(task)) and np.all(np.isfinite(lcs))):
                bad = int(np.flatnonzero(~np.isfinite(np.concatenate([task, lcs])))[0])
                what = (f"task loss at {tr.lengths[bad]} bits" if bad < m
                        else f"distillation loss at {tr.lengths[bad - m]} bits")
                raise TrainingError(f"non-finite {what} (epoch {epoch}, batch {bi})")
            task_sum += task
            lcs_sum += lcs
            alpha_sum += raw
            if report is not None:
                anti += report.anti
                bad = report.violations(GUARANTEE_RTOL)
                if tr.weighting and bad.size:
                    violations += int(bad.size)
                    log.warning("align-domination violated at heads %s (epoch %d, batch %d)",
                                bad.tolist(), epoch, bi)
        n = len(batches)
        mean_task = task_sum / n
        ckpts.update(epoch, mean_task, tr.backbone, tr.layer, tr.lengths)
        st = EpochStats(
            epoch=epoch,
            lengths=tr.lengths,
            task_loss=[float(v) for v in mean_task],
            lcs_loss=[float(v) for v in lcs_sum / n],
            alpha_mean=[float(v) for v in alpha_sum / n],
            anti_domination=[float(v) for v in anti / n],
            guarantee_violations=violations,
            steps=n,
            seconds=time.perf_counter() - t0,
        )
        log.info("epoch %d: task %s", epoch, np.round(mean_task, 4).tolist())
        yield st


def train(cfg, ds, split, on_epoch=None, trainer=None):
    """Run training; returns (CheckpointSet, [EpochStats]).

    ``on_epoch`` is called with each EpochStats as soon as it is available.
    """
    tr = trainer or Trainer(cfg, ds)
    ckpts = init_checkpoints(tr)
    stats = []
    for st in run_epochs(tr, split, ckpts):
        stats.append(st)
        if on_epoch is not None:
            on_epoch(st)
    return ckpts, stats


@dataclass
class SpeedReport:
    lengths: tuple
    t_nhl: float
    t_separate: dict
    ratio: float
    peak_rss_mb: float = None

    def as_dict(self):
        return {"lengths": list(self.lengths), "t_nhl": self.t_nhl,
                "t_separate": {str(b): t for b, t in self.t_separate.items()},
                "t_separate_total": sum(self.t_separate.values()),
                "ratio": self.ratio, "peak_rss_mb": self.peak_rss_mb}


def _peak_rss_mb():
    try:
        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    except (OSError, AttributeError):
        return None


def timed_runs(cfgs, ds, split):
    """Wall seconds of several complete training runs, executed in lockstep.

    Every run is set up and then advanced one epoch at a time in round-robin
    order, so slow drifts in machine speed hit all runs alike. Returns, per
    config, ``(total seconds, [seconds of each epoch])``; the total includes
    the run's own setup.
    """
    runs, totals = [], []
    for cfg in cfgs:
        t0 = time.perf_counter()
        tr = Trainer(cfg, ds)
        gen = run_epochs(tr, split, init_checkpoints(tr))
        totals.append(time.perf_counter() - t0)
        runs.append(gen)
    epochs = [[] for _ in cfgs]
    live = list(range(len(cfgs)))
    while live:
        for i in list(live):
            t0 = time.perf_counter()
            try:
                next(runs[i])
            except StopIteration:
                live.remove(i)
            dt = time.perf_counter() - t0
            totals[i] += dt
            if i in live:
                epochs[i].append(dt)
    return [(t, e) for t, e in zip(totals, epochs)]


def bench_speed(cfg, ds, split, repeats=1):
    """Wall time of one multi-length run vs. one run per length.

    The m + 1 runs are executed in lockstep (see :func:`timed_runs`); with
    ``repeats > 1`` each run keeps its fastest total.
    """
    cfg = replace(cfg, monitor=False)
    cfgs = [cfg] + [single(cfg, b) for b in cfg.lengths]
    best = [float("inf")] * len(cfgs)
    for _ in range(max(1, repeats)):
        for i, (t, _) in enumerate(timed_runs(cfgs, ds, split)):
            best[i] = min(best[i], t)
    t_sep = dict(zip(cfg.lengths, best[1:]))
    return SpeedReport(cfg.lengths, best[0], t_sep, sum(t_sep.values()) / best[0], _peak_rss_mb())


def bench_overhead(cfg, ds, split, repeats=1):
    """Mean seconds per epoch of the full and the basic variant, run in lockstep.

    With ``repeats > 1`` each variant keeps its fastest mean.
    """
    cfg = replace(cfg, monitor=False)
    cfgs = [replace(cfg, variant="full"), replace(cfg, variant="basic")]
    best = [float("inf")] * 2
    for _ in range(max(1, repeats)):
        for i, (_, ep) in enumerate(timed_runs(cfgs, ds, split)):
            if ep:
                best[i] = min(best[i], sum(ep) / len(ep))
    return best[0], best[1]
