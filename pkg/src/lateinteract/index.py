"""Exact late-interaction index: offline precomputation, top-k scan, cost model.

Video tokens are normalized and their fusion weights computed once at build
time; a WTI query only runs the text weight head on the query itself.
"""

from __future__ import annotations

import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DimMismatch, FormatError, ChecksumError, ShapeMismatch
from .interaction import (
    MECHANISMS,
    ScoringModel,
    _global_vectors,
    _unit_levels,
    head_weights,
    mlp_pairs,
    xti_pairs,
)
from .numerics import TokenMatrix, l2_normalize_rows, normalize_array

MAGIC = b"DRLE"
VERSION = 1
FLAG_WEIGHTS = 0x1
FLAG_TEXT = 0x2
_HEADER = struct.Struct("<4sHHIH")
_DOC = struct.Struct("<IH")
_CRC = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class IndexShard:
    """Immutable set of normalized video documents and their fusion weights."""

    docs: tuple
    weights: tuple | None
    dim: int
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(d.dim != self.dim for d in self.docs):
            raise ShapeMismatch("all documents must share D")
        n = max((d.n for d in self.docs), default=1)
        tokens = np.zeros((len(self.docs), n, self.dim))
        mask = np.zeros((len(self.docs), n), dtype=bool)
        dw = np.zeros((len(self.docs), n))
        for i, d in enumerate(self.docs):
            tokens[i, : d.n] = d.tokens
            mask[i, : d.n] = d.mask
            dw[i, : d.n] = self.weights[i] if self.weights is not None else d.mask / d.mask.sum()
        ids = np.array([d.id for d in self.docs], dtype=np.int64)
        uw = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)
        means = tokens.sum(axis=1) / np.maximum(mask.sum(axis=1, keepdims=True), 1)
        norms = np.linalg.norm(means, axis=1, keepdims=True)
        means = np.divide(means, norms, out=np.zeros_like(means), where=norms > 0)
        for name, arr in (("_tokens", tokens), ("_mask", mask), ("_dw", dw), ("_ids", ids), ("_means", means),
                          ("_uw", uw)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for d in self.docs:
            d.tokens.setflags(write=False)
            d.mask.setflags(write=False)
        for w in self.weights or ():
            w.setflags(write=False)
        object.__setattr__(self, "_levels", {})

    def __len__(self):
        return len(self.docs)

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    @property
    def mechanism_support(self) -> tuple:
        return tuple(m for m in MECHANISMS if m != "wti" or self.weights is not None)

    def levels(self, s: int) -> np.ndarray:
        if s not in self._levels:
            self._levels[s] = _unit_levels(self.docs, s)
        return self._levels[s]


def build_index(docs, vw=None, dim=None, manifest=None) -> IndexShard:
    """Normalize documents to float32 and precompute video weights with ``vw``."""
    docs = list(docs)
    if dim is None:
        if not docs:
            raise ShapeMismatch("empty index needs an explicit dim")
        dim = docs[0].dim
    stored, weights = [], []
    for d in docs:
        if d.dim != dim:
            raise ShapeMismatch(f"doc {d.id} has D={d.dim}, expected {dim}")
        n = l2_normalize_rows(d)
        tm = TokenMatrix(d.id, n.tokens.astype(np.float32), n.mask, "video")
        stored.append(tm)
        if vw is not None:
            w = head_weights(vw, tm.tokens.astype(np.float64), tm.mask)
            weights.append(w.astype(np.float32))
    info = dict(manifest or {})
    info.setdefault("mechanism_support", ",".join(m for m in MECHANISMS if m != "wti" or vw is not None))
    return IndexShard(tuple(stored), tuple(weights) if vw is not None else None, dim, info)


@dataclass
class RetrievalResult:
    query_id: int
    ranked: list
    rank_of_truth: int | None = None


def shard_scores(q: TokenMatrix, shard: IndexShard, mechanism: str, model: ScoringModel | None = None) -> np.ndarray:
    """Score one query against every document of the shard (exact scan)."""
    if q.dim != shard.dim:
        raise DimMismatch(f"query D={q.dim} vs shard D={shard.dim}")
    model = model or ScoringModel()
    if len(shard) == 0:
        return np.zeros(0)
    if mechanism == "dp":
        return shard._means @ _global_vectors([q])[0]
    if mechanism == "hi":
        w = np.asarray(model.level_weights, dtype=np.float64)
        return np.einsum("s,sd,nsd->n", w, _unit_levels([q], len(w))[0], shard.levels(len(w)))
    if mechanism == "mlp":
        return mlp_pairs(_global_vectors([q]), shard._means, model.mlp)[0]
    qn = normalize_array(q.tokens, q.mask)
    if mechanism == "xti":
        return xti_pairs(qn[None], q.mask[None], shard._tokens, shard._mask, model.xti)[0]
    # padded query rows never contribute, so only valid rows enter the matmul
    rows = qn[q.mask]
    keep = np.ones(len(rows), dtype=bool)
    nd, nv, d = shard._tokens.shape
    sims = (shard._tokens.reshape(nd * nv, d) @ rows.T).reshape(nd, nv, len(rows))
    if mechanism == "ti":
        # same kernel as wti with uniform weights, so wti's work is a superset
        if model.ti_form == "sum":
            return _kernels.scan(sims, keep, np.ones(len(rows)), shard._mask, shard._mask.astype(np.float64))
        return _kernels.scan(sims, keep, np.full(len(rows), 1.0 / len(rows)), shard._mask, shard._uw)
    if mechanism == "wti":
        if shard.weights is None:
            raise ValueError("shard was built without video weights")
        qw = head_weights(model.text_head, qn, q.mask)[q.mask]
        return _kernels.scan(sims, keep, qw, shard._mask, shard._dw)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def rank_order(scores, ids) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending doc id."""
    return np.lexsort((ids, -np.asarray(scores)))


def query_topk(q, shard, k, mechanism="wti", model=None, truth=None) -> RetrievalResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = shard_scores(q, shard, mechanism, model)
    order = rank_order(scores, shard.ids)
    ranked = [(int(shard.ids[i]), float(scores[i])) for i in order[:k]]
    rank = None
    if truth is not None:
        hits = np.flatnonzero(shard.ids[order] == truth)
        rank = int(hits[0]) + 1 if hits.size else None
    return RetrievalResult(q.id, ranked, rank)


def query_many(queries, shard, k, mechanism="wti", model=None, truth=None, threads=1) -> list:
    """Run queries in order; ``threads > 1`` uses a pool but keeps result order."""
    truth = truth or {}

    def one(q):
        return query_topk(q, shard, k, mechanism, model, truth.get(q.id))

    if threads <= 1:
        return [one(q) for q in queries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, queries))


# ---------------------------------------------------------------- cost model


@dataclass(frozen=True)
class FlopReport:
    mechanism: str
    flops: int
    memory_units: int
    params: dict
    per_layer_flops: Fraction | int | None = None


def flop_count(mechanism, n=1, d=512, nt=32, nv=12, l=4, s=3) -> FlopReport:
    """Closed-form cost of scoring one query against ``n`` documents.

    ``memory_units`` is the per-document storage count.  For XTI,
    ``per_layer_flops`` is the cost of a single attention block.
    """
    if min(n, d, nt, nv, l, s) < 1:
        raise ValueError("cost parameters must be positive")
    ntv = nt + nv
    per_layer = None
    if mechanism == "dp":
        flops, mem = n * d, d
    elif mechanism == "hi":
        flops, mem = n * s * d, s * d
    elif mechanism == "mlp":
        flops, mem = n * (l * d * d + d), d
    elif mechanism == "xti":
        per_layer = n * (d * d * ntv + ntv * ntv * d)
        flops, mem = per_layer * l, nv * d
    elif mechanism == "ti":
        flops, mem = n * nt * nv * d, nv * d
    elif mechanism == "wti":
        flops, mem = n * (nt * nv * d + ntv), nv * (d + 1)
    else:
        raise ValueError(f"unknown mechanism {mechanism!r}")
    params = {"n": n, "d": d, "nt": nt, "nv": nv, "l": l, "s": s}
    return FlopReport(mechanism, flops, mem, params, per_layer)


def flop_ratio(mechanism, baseline, per_layer=False, **params) -> Fraction:
    """Exact cost ratio; ``per_layer`` swaps in XTI's single-block cost."""

    def cost(m):
        r = flop_count(m, **params)
        return r.per_layer_flops if per_layer and r.per_layer_flops is not None else r.flops

    return Fraction(cost(mechanism), cost(baseline))


# ----------------------------------------------------------------- benchmark


@dataclass
class BenchRow:
    mechanism: str
    backend: str
    docs: int
    queries: int
    repetitions: int
    median_scan_ms: float
    docs_per_sec: float
    p50_ms: float
    p95_ms: float
    flops: FlopReport = None


def bench(shard, queries, mechanism, repetitions=5, model=None, warmup=1) -> BenchRow:
    """Wall-clock scan timing; each repetition scores every query once."""
    return bench_suite(shard, queries, [mechanism], repetitions, model, warmup)[0]


def bench_suite(shard, queries, mechanisms, repetitions=5, model=None, warmup=1) -> list:
    """Like ``bench`` for several mechanisms, round-robin within each repetition.

    Interleaving spreads machine drift evenly over the mechanisms, which
    matters when two of them cost nearly the same.  The order reverses on
    every other repetition.
    """
    if len(shard) == 0:
        raise ValueError("benchmark needs a nonempty shard")
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    for mech in mechanisms:
        for _ in range(warmup):
            shard_scores(queries[0], shard, mech, model)
    mechanisms = list(mechanisms)
    per_query = {m: [] for m in mechanisms}
    totals = {m: [] for m in mechanisms}
    for rep in range(repetitions):
        # ABBA order: reversing every other pass cancels cache and order effects
        for mech in (mechanisms if rep % 2 == 0 else mechanisms[::-1]):
            start = time.perf_counter()
            for q in queries:
                t0 = time.perf_counter()
                shard_scores(q, shard, mech, model)
                per_query[mech].append(time.perf_counter() - t0)
            totals[mech].append(time.perf_counter() - start)
    return [_bench_row(shard, queries, m, repetitions, model, totals[m], per_query[m]) for m in mechanisms]


def _bench_row(shard, queries, mechanism, repetitions, model, totals, per_query) -> BenchRow:
    scan = float(np.median(totals))
    report = flop_count(
        mechanism,
        n=len(shard),
        d=shard.dim,
        nt=queries[0].n_valid,
        nv=max(1, int(round(shard._mask.sum(axis=1).mean()))),
        l=len(model.xti.blocks) if model is not None and model.xti is not None else 1,
        s=len(model.level_weights) if model is not None and model.level_weights is not None else 3,
    )
    return BenchRow(
        mechanism,
        _kernels.backend(),
        len(shard),
        len(queries),
        repetitions,
        scan * 1e3,
        len(shard) * len(queries) / scan,
        float(np.percentile(per_query, 50)) * 1e3,
        float(np.percentile(per_query, 95)) * 1e3,
        report,
    )


# --------------------------------------------------------------- persistence


def _encode(items, weights, text=False) -> bytes:
    items = list(items)
    dim = items[0].dim if items else 0
    flags = (FLAG_WEIGHTS if weights is not None else 0) | (FLAG_TEXT if text else 0)
    if len(items) >= 2**32 or dim >= 2**16:
        raise FormatError("too many documents or D too large for DRLE v1")
    parts = [_HEADER.pack(MAGIC, VERSION, flags, len(items), dim)]
    for i, it in enumerate(items):
        if it.n >= 2**16 or not 0 <= it.id < 2**32:
            raise FormatError(f"item {it.id}: id or length out of range")
        parts.append(_DOC.pack(it.id, it.n))
        parts.append(np.ascontiguousarray(it.tokens, dtype="<f4").tobytes())
        parts.append(it.mask.astype(np.uint8).tobytes())
        if weights is not None:
            parts.append(np.ascontiguousarray(weights[i], dtype="<f4").tobytes())
    payload = b"".join(parts)
    return payload + _CRC.pack(zlib.crc32(payload))


def _decode(data: bytes):
    if len(data) < _HEADER.size + _CRC.size:
        raise FormatError("file too short for a DRLE header")
    magic, version, flags, count, dim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported DRLE version {version}")
    has_w = bool(flags & FLAG_WEIGHTS)
    modality = "text" if flags & FLAG_TEXT else "video"
    end = len(data) - _CRC.size
    off = _HEADER.size
    items, weights = [], []
    for _ in range(count):
        if off + _DOC.size > end:
            raise FormatError("truncated document header")
        doc_id, n = _DOC.unpack_from(data, off)
        off += _DOC.size
        need = n * dim * 4 + n + (n * 4 if has_w else 0)
        if n < 1 or off + need > end:
            raise FormatError(f"truncated or empty document {doc_id}")
        tokens = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off).reshape(n, dim).astype(np.float32)
        off += n * dim * 4
        raw_mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=off)
        off += n
        if np.any(raw_mask > 1):
            raise FormatError(f"document {doc_id}: mask bytes must be 0 or 1")
        if has_w:
            weights.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32))
            off += n * 4
        try:
            items.append(TokenMatrix(doc_id, tokens, raw_mask.astype(bool), modality))
        except Exception as exc:
            raise FormatError(f"document {doc_id}: {exc}") from exc
    if off != end:
        raise FormatError("trailing bytes after last document")
    (crc,) = _CRC.unpack_from(data, end)
    if zlib.crc32(data[:end]) != crc:
        raise ChecksumError("CRC32 mismatch")
    return items, (weights if has_w else None), dim


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def _write_manifest(path, info):
    lines = [f"{k}: {info[k]}" for k in sorted(info)]
    manifest_path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    p = manifest_path(path)
    if not p.exists():
        return {}
    out = {}
    for line in p.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            out[key.strip()] = value.strip()
    return out


def save_shard(shard: IndexShard, path) -> None:
    path = Path(path)
    path.write_bytes(_encode(shard.docs, shard.weights))
    info = dict(shard.manifest)
    info.update(format="DRLE", version=VERSION, doc_count=len(shard), dim=shard.dim,
                mechanism_support=",".join(shard.mechanism_support))
    _write_manifest(path, info)


def load_shard(path) -> IndexShard:
    items, weights, dim = _decode(Path(path).read_bytes())
    if any(it.modality != "video" for it in items):
        raise FormatError("shard file holds text items")
    return IndexShard(tuple(items), tuple(weights) if weights is not None else None, dim, read_manifest(path))


def save_items(items, path, manifest=None) -> None:
    """Write raw (un-normalized) token matrices in DRLE, without weights."""
    items = list(items)
    text = bool(items) and items[0].modality == "text"
    Path(path).write_bytes(_encode(items, None, text=text))
    if manifest is not None:
        _write_manifest(path, manifest)


def load_items(path) -> list:
    items, _, _ = _decode(Path(path).read_bytes())
    return items
