"""Command-line entry point: ``nesthash <command> ...``.

All experiment settings live in one JSON file (see ``RunConfig`` for keys and
defaults); flags only name files and directories. Exit codes: 0 success,
2 config error, 3 data or I/O error, 4 numeric failure.
"""
import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, gen_synthetic, load_features, make_split, save_features
from .retrieval import (RetrievalError, encode, eval_report, evaluate_checkpoints, load_codes,
                        save_codes)
from .trainer import TrainConfig, TrainingError, bench_speed, single, train

log = logging.getLogger("nesthash")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ABLATION_VARIANTS = ("full", "basic", "no_D", "no_L")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class RunConfig:
    # synthetic data
    num_classes: int = 10
    per_class: int = 100
    dim: int = 64
    cluster_std: float = 2.0
    data_seed: int = 0
    # split
    query_per_class: int = 10
    train_per_class: int = 90
    split_seed: int = 0
    # model and training
    lengths: tuple = (8, 16, 32, 64, 128)
    backbone_dims: tuple = (64, 128, 64)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 1.0
    objective: str = "central"
    quant_weight: float = 0.1
    margin: float = 2.0
    seed: int = 0
    variant: str = "full"
    monitor: bool = True
    # evaluation
    eval_k: object = "ALL"
    ablate_singles: bool = False
    bench_repeats: int = 1

    def train_config(self):
        return TrainConfig(
            lengths=self.lengths, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            lam=self.lam, objective=self.objective, quant_weight=self.quant_weight,
            margin=self.margin, seed=self.seed, variant=self.variant,
            backbone_dims=self.backbone_dims, monitor=self.monitor)

    @property
    def k(self):
        return parse_k(self.eval_k)


def parse_k(value):
    """``None`` for ALL, else a positive int."""
    if isinstance(value, str) and value.upper() == "ALL":
        return None
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise ConfigError(f"eval_k must be a positive integer or 'ALL', got {value!r}")
    try:
        k = int(value)
    except ValueError:
        raise ConfigError(f"eval_k must be a positive integer or 'ALL', got {value!r}") from None
    if k < 1:
        raise ConfigError(f"eval_k must be >= 1, got {k}")
    return k


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, value):
    default = _FIELDS[name].default
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool)
                                                  for v in value):
            raise ConfigError(f"{name} must be a list of integers")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if isinstance(default, str) and name != "eval_k" and not isinstance(value, str):
        raise ConfigError(f"{name} must be a string")
    return value


def config_from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in raw.items()})
    validate(cfg)
    return cfg


def load_config(path):
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return config_from_dict(raw)


def validate(cfg):
    """Reject bad settings before any work starts."""
    if cfg.num_classes < 2 or cfg.per_class < 4 or cfg.dim < 2:
        raise ConfigError("need num_classes >= 2, per_class >= 4, dim >= 2")
    if cfg.cluster_std < 0:
        raise ConfigError("cluster_std must be >= 0")
    if cfg.query_per_class < 1 or cfg.train_per_class < 1:
        raise ConfigError("query_per_class and train_per_class must be >= 1")
    if cfg.bench_repeats < 1:
        raise ConfigError("bench_repeats must be >= 1")
    parse_k(cfg.eval_k)
    try:
        cfg.train_config()
    except ValueError as e:
        raise ConfigError(str(e)) from None


def config_dict(cfg):
    out = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


# ---- helpers ---------------------------------------------------------------

def _load_data(cfg, path):
    ds = load_features(path)
    if ds.dim != cfg.backbone_dims[0]:
        raise ConfigError(f"backbone_dims starts with {cfg.backbone_dims[0]} "
                          f"but {path} has {ds.dim} features")
    try:
        split = make_split(ds, cfg.query_per_class, cfg.train_per_class, cfg.split_seed)
    except ValueError as e:
        raise DataError(str(e), path) from None
    return ds, split


def _write(path, data):
    path = Path(path)
    try:
        if path.parent != Path("."):
            path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data)
    except OSError as e:
        raise DataError(f"cannot write: {e.strerror}", path) from None


def _outdir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory: {e.strerror}", path) from None
    return path


def ckpt_name(bits):
    return f"ckpt_{bits}.nhlc"


def _format_table(header, rows):
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _variant_maps(cfg, ds, split, variant):
    ckpts, _ = train(dataclasses.replace(cfg.train_config(), variant=variant, monitor=False),
                     ds, split)
    reps = evaluate_checkpoints(ckpts.checkpoints, ds, split, cfg.k)
    return {b: r.map for b, r in reps.items()}


# ---- commands -------------------------------------------------------------

def cmd_gen_data(args, cfg):
    ds = gen_synthetic(cfg.num_classes, cfg.per_class, cfg.dim, cfg.cluster_std, cfg.data_seed)
    out = Path(args.out)
    try:
        save_features(ds, out)
    except OSError as e:
        raise DataError(f"cannot write: {e.strerror}", out) from None
    print(f"wrote {out}: N={ds.n} d={ds.dim} C={ds.num_classes}")


def cmd_train(args, cfg):
    ds, split = _load_data(cfg, args.data)
    out = _outdir(args.out)
    metrics = out / "metrics.jsonl"
    _write(metrics, "")
    _write(out / "config.json", json.dumps(config_dict(cfg), indent=2) + "\n")

    def on_epoch(st):
        try:
            with metrics.open("a") as fh:
                fh.write(json.dumps(st.as_dict()) + "\n")
        except OSError as e:
            raise DataError(f"cannot write: {e.strerror}", metrics) from None

    ckpts, stats = train(cfg.train_config(), ds, split, on_epoch=on_epoch)
    for bits, ck in ckpts.checkpoints.items():
        save_path = out / ckpt_name(bits)
        try:
            save_checkpoint(ck, save_path)
        except OSError as e:
            raise DataError(f"cannot write: {e.strerror}", save_path) from None
        print(f"{bits:>4} bits: best task loss {ck.best_loss:.5f} at epoch {ck.epoch} -> {save_path}")
    print(f"{len(stats)} epochs, metrics in {metrics}")


def cmd_encode(args, cfg):
    ds, split = _load_data(cfg, args.data)
    ck = load_checkpoint(args.checkpoint)
    idx = {"database": split.database_idx, "query": split.query_idx,
           "train": split.train_idx}[args.part]
    db = encode(ck, ds, idx, args.bits)
    out = Path(args.out)
    try:
        save_codes(db, out)
    except OSError as e:
        raise DataError(f"cannot write: {e.strerror}", out) from None
    print(f"wrote {out}: {db.n} codes of {db.bits} bits ({args.part})")


def cmd_eval(args, cfg):
    k = parse_k(args.k) if args.k is not None else cfg.k
    q = load_codes(args.query)
    db = load_codes(args.db)
    rep = eval_report(q, db, k)
    print(f"bits={rep.bits} K={rep.k} queries={rep.n_queries} "
          f"mAP@K={rep.map:.6f} precision@K={rep.precision:.6f}")
    print(json.dumps(rep.as_dict()))
    if args.json:
        _write(args.json, json.dumps(rep.as_dict()) + "\n")


def cmd_ablate(args, cfg):
    ds, split = _load_data(cfg, args.data)
    out = _outdir(args.out)
    variants = list(ABLATION_VARIANTS)
    rows = {v: _variant_maps(cfg, ds, split, v) for v in variants}
    if cfg.ablate_singles:
        rows["single"] = {}
        for b in cfg.lengths:
            rows["single"].update(_variant_maps(cfg, ds, split, single(cfg.train_config(), b).variant))
    header = ["variant"] + [f"{b}" for b in cfg.lengths] + ["mean"]
    table = []
    for v, maps in rows.items():
        vals = [maps[b] for b in cfg.lengths]
        table.append([v] + [f"{x:.4f}" for x in vals] + [f"{np.mean(vals):.4f}"])
    csv_path = out / "ablation.csv"
    try:
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(table)
    except OSError as e:
        raise DataError(f"cannot write: {e.strerror}", csv_path) from None
    text = _format_table(header, table)
    _write(out / "ablation.txt", text + "\n")
    k = "ALL" if cfg.k is None else cfg.k
    print(f"mAP@{k} per code length")
    print(text)


def cmd_bench_speed(args, cfg):
    ds, split = _load_data(cfg, args.data)
    rep = bench_speed(cfg.train_config(), ds, split, cfg.bench_repeats)
    for b, t in rep.t_separate.items():
        print(f"single {b:>4} bits: {t:8.3f} s")
    print(f"sum of single-length runs: {sum(rep.t_separate.values()):8.3f} s")
    print(f"nested run ({len(rep.lengths)} lengths): {rep.t_nhl:8.3f} s")
    print(f"speedup: {rep.ratio:.2f}x")
    if rep.peak_rss_mb is not None:
        print(f"peak RSS: {rep.peak_rss_mb:.1f} MB")
    if args.json:
        _write(args.json, json.dumps(rep.as_dict()) + "\n")


def build_parser():
    p = argparse.ArgumentParser(
        prog="nesthash", description="Train and evaluate multi-length hash codes from one nested layer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write a synthetic dataset (.csv or NHLF)")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train all code lengths; write checkpoints and metrics.jsonl")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("encode", cmd_encode, "encode one split part with a checkpoint to an NHLB file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--part", choices=("database", "query", "train"), default="database")
    sp.add_argument("--bits", type=int, help="code length (default: the checkpoint's own)")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "mAP@K and precision@K of query codes against database codes")
    sp.add_argument("--query", required=True)
    sp.add_argument("--db", required=True)
    sp.add_argument("--k", help="cutoff, an integer or ALL (default: config eval_k)")
    sp.add_argument("--json", help="also write the report here")

    sp = add("ablate", cmd_ablate, "train full/basic/no_D/no_L and tabulate mAP per length")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("bench-speed", cmd_bench_speed, "time one nested run against per-length runs")
    sp.add_argument("--data", required=True)
    sp.add_argument("--json", help="also write the report here")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.fn(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RetrievalError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
