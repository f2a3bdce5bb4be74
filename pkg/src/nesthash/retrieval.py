"""Bit-packed code databases, Hamming ranking and mAP@K evaluation."""
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import forward
from .data import similarity_matrix
from .nhl import binarize, nhl_forward

MAGIC = b"NHLB"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class RetrievalError(ValueError):
    pass


def n_words(bits):
    return (bits + 63) // 64


def pack(H):
    """Pack a (n, b) +-1 matrix into (n, ceil(b/64)) uint64 words, LSB first."""
    H = np.asarray(H)
    n, b = H.shape
    bits = np.zeros((n, 64 * n_words(b)), dtype=np.uint8)
    bits[:, :b] = H > 0
    return np.packbits(bits, axis=1, bitorder="little").view("<u8").astype(np.uint64)


def unpack(codes, b):
    raw = np.ascontiguousarray(codes, dtype="<u8").view(np.uint8)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, :b]
    return np.where(bits == 1, 1.0, -1.0)


def _tail_mask(b):
    mask = np.full(n_words(b), np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = b % 64
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


@dataclass(frozen=True)
class CodeDatabase:
    codes: np.ndarray  # (n, words) uint64
    labels: np.ndarray
    bits: int

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[1] != n_words(self.bits):
            raise RetrievalError(f"codes of shape {self.codes.shape} do not hold {self.bits} bits")
        if self.labels.shape[0] != self.codes.shape[0]:
            raise RetrievalError("one label per code is required")
        if np.any(self.codes & ~_tail_mask(self.bits)):
            raise RetrievalError("padding bits beyond the code length must be zero")

    @property
    def n(self):
        return self.codes.shape[0]

    @classmethod
    def from_signs(cls, H, labels):
        return cls(pack(H), np.asarray(labels, dtype=np.int64), int(H.shape[1]))

    def signs(self):
        return unpack(self.codes, self.bits)


def encode(ckpt, ds, indices, bits=None):
    """Binary codes for ``ds[indices]`` at ``bits`` (default: the checkpoint's length)."""
    layer = ckpt.layer
    bits = layer.lengths[-1] if bits is None else int(bits)
    if bits not in layer.lengths:
        raise RetrievalError(f"checkpoint provides lengths {layer.lengths}, not {bits}")
    indices = np.asarray(indices)
    X = ds.features[indices]
    if X.shape[1] != ckpt.backbone.in_dim:
        raise RetrievalError(
            f"dataset dim {X.shape[1]} != model input dim {ckpt.backbone.in_dim}")
    V, _ = forward(ckpt.backbone, X)
    H = binarize(nhl_forward(layer, V)[:, :bits])
    return CodeDatabase.from_signs(H, ds.labels[indices])


def hamming(a, b, bits):
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    return int(np.bitwise_count((a ^ b) & _tail_mask(bits)).sum())


def hamming_to_all(query, db):
    return np.bitwise_count(db.codes ^ np.asarray(query, dtype=np.uint64)).sum(
        axis=1, dtype=np.int64)


def rank(query, db):
    """Database indices by ascending Hamming distance, ties by index."""
    return np.argsort(hamming_to_all(query, db), kind="stable")


def average_precision_at_k(rel, k):
    if k < 1:
        raise ValueError("K must be >= 1")
    top = np.asarray(rel, dtype=bool)[:k]
    if not top.size:
        return 0.0
    ap, _ = _ap_rows(top[None, :])
    return float(ap[0])


def _ap_rows(rel):
    # precision terms are added in rank order (cumsum is sequential), so the
    # result does not depend on numpy's pairwise summation blocking
    hits = np.cumsum(rel, axis=1)
    ranks = np.arange(1, rel.shape[1] + 1)
    num = np.cumsum(np.where(rel, hits / ranks, 0.0), axis=1)[:, -1]
    n_rel = hits[:, -1]
    ap = np.divide(num, n_rel, out=np.zeros_like(num), where=n_rel > 0)
    return ap, n_rel


def _query_chunk(q_codes, q_labels, db, similarity, k):
    d = np.bitwise_count(q_codes[:, None, :] ^ db.codes[None, :, :]).sum(axis=2, dtype=np.int64)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    rel = np.take_along_axis(similarity(q_labels, db.labels), order, axis=1)
    return _ap_rows(rel)


def _threads():
    try:
        return max(1, int(os.environ.get("NHL_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_codes(queries, db, k=None, similarity=similarity_matrix, chunk=256):
    """Per-query (AP@K, relevant-in-top-K); ``k=None`` means the whole database."""
    if queries.bits != db.bits:
        raise RetrievalError(f"query codes have {queries.bits} bits, database {db.bits}")
    k = db.n if k is None else min(int(k), db.n)
    if k < 1:
        raise ValueError("K must be >= 1")
    starts = range(0, queries.n, chunk)
    jobs = [(queries.codes[s: s + chunk], queries.labels[s: s + chunk]) for s in starts]
    workers = _threads()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda j: _query_chunk(*j, db, similarity, k), jobs))
    else:
        parts = [_query_chunk(*j, db, similarity, k) for j in jobs]
    if not parts:
        return np.zeros(0), np.zeros(0), k
    ap = np.concatenate([p[0] for p in parts])
    n_rel = np.concatenate([p[1] for p in parts])
    return ap, n_rel, k


def _mean(x):
    return math.fsum(x) / len(x) if len(x) else 0.0


def map_at_k(queries, db, similarity=similarity_matrix, k=None):
    ap, _, _ = evaluate_codes(queries, db, k, similarity)
    return _mean(ap)


@dataclass
class EvalReport:
    bits: int
    map: float
    precision: float
    k: int
    n_queries: int

    def as_dict(self):
        return {"bits": self.bits, "map": self.map, "precision": self.precision,
                "k": self.k, "n_queries": self.n_queries}


def eval_report(queries, db, k=None, similarity=similarity_matrix):
    ap, n_rel, k_used = evaluate_codes(queries, db, k, similarity)
    prec = n_rel / k_used
    return EvalReport(db.bits, _mean(ap), _mean(prec), k_used, queries.n)


def evaluate_checkpoints(checkpoints, ds, split, k=None):
    """EvalReport per length for a {bits: Checkpoint} mapping."""
    out = {}
    for bits, ckpt in checkpoints.items():
        q = encode(ckpt, ds, split.query_idx, bits)
        db = encode(ckpt, ds, split.database_idx, bits)
        out[bits] = eval_report(q, db, k)
    return out


# ---- NHLB file format -----------------------------------------------------

def save_codes(db, path):
    header = _HEADER.pack(MAGIC, VERSION, db.n, db.bits)
    Path(path).write_bytes(header + db.codes.astype("<u8").tobytes()
                           + db.labels.astype("<u4").tobytes())


def load_codes(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise RetrievalError(f"{path}: truncated header (missing {_HEADER.size - len(raw)} bytes)")
    magic, version, n, bits = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise RetrievalError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise RetrievalError(f"{path}: unsupported version {version}")
    w = n_words(bits)
    need = _HEADER.size + 8 * n * w + 4 * n
    if len(raw) != need:
        raise RetrievalError(f"{path}: expected {need} bytes, found {len(raw)}")
    codes = np.frombuffer(raw, dtype="<u8", count=n * w, offset=_HEADER.size).reshape(n, w)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=_HEADER.size + 8 * n * w)
    return CodeDatabase(codes.astype(np.uint64), labels.astype(np.int64), int(bits))
