"""Labeled feature datasets: synthetic generation, splitting and file I/O."""
import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NHLF_MAGIC = b"NHLF"
NHLF_VERSION = 1
_NHLF_HEADER = struct.Struct("<4sIIII")


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""

    def __init__(self, message, path=None, position=None):
        self.path = path
        self.position = position
        where = []
        if path is not None:
            where.append(str(path))
        if position is not None:
            where.append(position)
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} samples")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        present = np.unique(self.labels)
        if present.size != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
            raise DataError(f"classes without samples: {missing}")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class Split:
    train_idx: np.ndarray
    query_idx: np.ndarray
    database_idx: np.ndarray

    def validate(self, n):
        for name in ("train_idx", "query_idx", "database_idx"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DataError(f"{name} has indices outside [0, {n})")
            if np.unique(idx).size != idx.size:
                raise DataError(f"{name} contains duplicates")
        if np.intersect1d(self.query_idx, self.database_idx).size:
            raise DataError("query and database sets overlap")
        if np.setdiff1d(self.train_idx, self.database_idx).size:
            raise DataError("training indices must be drawn from the database")


def gen_synthetic(num_classes, per_class, dim, cluster_std, seed):
    """Gaussian class clusters around centers drawn from [0, 4]^dim."""
    if num_classes < 2 or per_class < 4 or dim < 2:
        raise ValueError("need num_classes >= 2, per_class >= 4, dim >= 2")
    if cluster_std < 0:
        raise ValueError("cluster_std must be non-negative")
    rng = np.random.default_rng(seed)
    centers = 4.0 * rng.random((num_classes, dim))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    noise = rng.standard_normal((labels.size, dim))
    features = centers[labels] + cluster_std * noise
    return Dataset(features, labels, num_classes)


def make_split(ds, query_per_class, train_per_class, seed):
    """Stratified query selection; the rest is the database, training is drawn from it."""
    if query_per_class < 1 or train_per_class < 1:
        raise ValueError("per-class counts must be positive")
    rng = np.random.default_rng(seed)
    query, database, train = [], [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if query_per_class >= members.size:
            raise ValueError(
                f"class {c} has {members.size} samples; cannot take {query_per_class} "
                "queries and keep a non-empty database")
        if train_per_class > members.size - query_per_class:
            raise ValueError(
                f"class {c}: {train_per_class} training samples requested but only "
                f"{members.size - query_per_class} remain in the database")
        perm = rng.permutation(members)
        q, rest = perm[:query_per_class], perm[query_per_class:]
        query.append(q)
        database.append(rest)
        train.append(rng.choice(rest, size=train_per_class, replace=False))
    split = Split(
        train_idx=np.sort(np.concatenate(train)),
        query_idx=np.sort(np.concatenate(query)),
        database_idx=np.sort(np.concatenate(database)),
    )
    split.validate(ds.n)
    return split


def is_similar(y_i, y_j):
    return y_i == y_j


def shares_label(labels_i, labels_j):
    """Multi-label similarity: true when the two label sets intersect."""
    return bool(set(labels_i) & set(labels_j))


def similarity_matrix(query_labels, db_labels):
    return np.asarray(query_labels)[:, None] == np.asarray(db_labels)[None, :]


# ---- file formats ---------------------------------------------------------

def save_features(ds, path):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        _save_csv(ds, path)
    else:
        _save_nhlf(ds, path)


def load_features(path):
    path = Path(path)
    if not path.exists():
        raise DataError("file does not exist", path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    return _load_nhlf(path)


def _save_nhlf(ds, path):
    header = _NHLF_HEADER.pack(NHLF_MAGIC, NHLF_VERSION, ds.n, ds.dim, ds.num_classes)
    body = ds.features.astype("<f4").tobytes() + ds.labels.astype("<u4").tobytes()
    path.write_bytes(header + body)


def _load_nhlf(path):
    raw = path.read_bytes()
    if len(raw) < _NHLF_HEADER.size:
        raise DataError(
            f"truncated header: need {_NHLF_HEADER.size} bytes, file has {len(raw)} "
            f"(missing {_NHLF_HEADER.size - len(raw)} bytes)", path, "byte 0")
    magic, version, n, d, c = _NHLF_HEADER.unpack_from(raw, 0)
    if magic != NHLF_MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {NHLF_MAGIC!r}", path, "byte 0")
    if version != NHLF_VERSION:
        raise DataError(f"unsupported version {version}", path, "byte 4")
    off = _NHLF_HEADER.size
    need = off + 4 * n * d + 4 * n
    if len(raw) < need:
        raise DataError(
            f"truncated payload: expected {need} bytes, got {len(raw)} "
            f"(missing {need - len(raw)} bytes)", path, f"byte {len(raw)}")
    if len(raw) > need:
        raise DataError(f"{len(raw) - need} trailing bytes after payload", path, f"byte {need}")
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 4 * n * d)
    bad = np.flatnonzero(labels >= c)
    if bad.size:
        i = int(bad[0])
        raise DataError(
            f"label {int(labels[i])} of sample {i} is not below num_classes={c}",
            path, f"byte {off + 4 * n * d + 4 * i}")
    return Dataset(feats.astype(np.float64), labels.astype(np.int64), int(c))


def _save_csv(ds, path):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.dim)] + ["label"])
        for row, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def _load_csv(path, num_classes=None):
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file, expected a header row", path, "line 1") from None
        if "label" not in header:
            raise DataError("missing required column 'label' in header", path, "line 1")
        li = header.index("label")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"expected {len(header)} fields, found {len(row)}", path, f"line {lineno}")
            try:
                y = int(row[li])
                x = [float(v) for j, v in enumerate(row) if j != li]
            except ValueError as exc:
                raise DataError(str(exc), path, f"line {lineno}") from None
            if y < 0:
                raise DataError(f"negative label {y}", path, f"line {lineno}")
            feats.append(x)
            labels.append(y)
    if not labels:
        raise DataError("no data rows", path, "line 2")
    labels = np.asarray(labels, dtype=np.int64)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(np.asarray(feats, dtype=np.float64), labels, c)
