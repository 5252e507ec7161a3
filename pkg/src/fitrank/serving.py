"""Offline item store and online candidate scoring.

The store is a flat little-endian file::

    header  magic "FITS" | version u16 | H_v u16 | p u16 | N u32 | count u64 | crc32 u32
    record  item id u64 | query index s u16 | z_v f32[H_v * p]   (repeated ``count`` times)

The CRC covers the record region.  Records are fixed width, so the file is
memory-mapped and indexed by row.
"""
from __future__ import annotations

import os
import statistics
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .data import Batch
from .model import FITModel

STORE_MAGIC = b"FITS"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sHHHIQI")


class StoreError(ValueError):
    pass


def record_dtype(heads: int, head_dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("s", "<u2"), ("z", "<f4", (heads * head_dim,))])


def record_size(heads: int, head_dim: int) -> int:
    return 8 + 2 + 4 * heads * head_dim


class ItemStore:
    """Read-only view over a store file; safe to share between threads."""

    def __init__(self, path, verify: bool = True):
        self.path = Path(path)
        size = self.path.stat().st_size
        if size < _HEADER.size:
            raise StoreError(f"{path}: truncated header")
        with open(self.path, "rb") as fh:
            head = fh.read(_HEADER.size)
        magic, version, hv, p, n_queries, count, crc = _HEADER.unpack(head)
        if magic != STORE_MAGIC:
            raise StoreError(f"{path}: bad magic {magic!r}")
        if version != STORE_VERSION:
            raise StoreError(f"{path}: unsupported store version {version}")
        self.heads, self.head_dim, self.n_queries, self.count = hv, p, n_queries, count
        self.dtype = record_dtype(hv, p)
        if size != _HEADER.size + count * self.dtype.itemsize:
            raise StoreError(f"{path}: size {size} does not match {count} records of {self.dtype.itemsize} bytes")
        if count:
            self.records = np.memmap(self.path, dtype=self.dtype, mode="r", offset=_HEADER.size, shape=(count,))
        else:
            self.records = np.zeros(0, dtype=self.dtype)
        if verify and zlib.crc32(memoryview(self.records).cast("B") if count else b"") != crc:
            raise StoreError(f"{path}: checksum mismatch")
        ids = np.asarray(self.records["id"])
        self._row = {int(i): r for r, i in enumerate(ids.tolist())}
        if len(self._row) != count:
            raise StoreError(f"{path}: duplicate item ids")
        self._z = np.asarray(self.records["z"]).reshape(count, hv, p) if count else np.zeros((0, hv, p), np.float32)
        self._s = np.asarray(self.records["s"]).astype(np.int64)
        if count and self._s.max() >= n_queries:
            raise StoreError(f"{path}: stored query index exceeds N={n_queries}")

    def __len__(self) -> int:
        return self.count

    def __contains__(self, item_id) -> bool:
        return int(item_id) in self._row

    def rows(self, item_ids: Sequence[int]) -> np.ndarray:
        """Row per id, -1 where the id is unknown."""
        get = self._row.get
        return np.fromiter((get(int(i), -1) for i in item_ids), dtype=np.int64, count=len(item_ids))

    def fetch(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(query index s [k], item heads [k, H_v, p]) for valid rows."""
        return self._s[rows], self._z[rows]

    def record(self, item_id: int) -> tuple[int, np.ndarray]:
        r = self._row[int(item_id)]
        return int(self._s[r]), np.array(self._z[r])


def precompute_store(model: FITModel, items: np.ndarray, cats: np.ndarray, path, chunk: int = 4096) -> None:
    """Run the item tower over a catalog and write (id, s, z_v) records."""
    items = np.asarray(items, dtype=np.int64)
    cats = np.asarray(cats, dtype=np.int64)
    if items.shape != cats.shape:
        raise StoreError("catalog items and categories differ in length")
    cfg = model.config
    if items.size and (items.min() < 1 or items.max() > cfg.n_items):
        raise StoreError(f"catalog item ids must lie in [1, {cfg.n_items}] for this checkpoint")
    if cats.size and (cats.min() < 0 or cats.max() > cfg.n_categories):
        raise StoreError(f"catalog categories must lie in [0, {cfg.n_categories}] for this checkpoint")
    if len(np.unique(items)) != len(items):
        raise StoreError("catalog has duplicate item ids")
    n_queries = model.mqm.n_queries if model.mqm is not None else 1
    parts = []
    heads = head_dim = None
    for start in range(0, max(len(items), 1), chunk):
        it, ct = items[start:start + chunk], cats[start:start + chunk]
        if not len(it):
            break
        z, s = model.item_representation(it, ct)
        heads, head_dim = z.shape[1], z.shape[2]
        rec = np.zeros(len(it), dtype=record_dtype(heads, head_dim))
        rec["id"] = it
        rec["s"] = s
        rec["z"] = z.reshape(len(it), -1)
        parts.append(rec)
    if heads is None:  # empty catalog: shapes still come from the model
        probe, _ = model.item_representation(np.array([1]), np.array([0]))
        heads, head_dim = probe.shape[1], probe.shape[2]
        parts.append(np.zeros(0, dtype=record_dtype(heads, head_dim)))
    body = np.concatenate(parts).tobytes()
    header = _HEADER.pack(STORE_MAGIC, STORE_VERSION, heads, head_dim, n_queries, len(items), zlib.crc32(body))
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(body)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def catalog_of(item_category: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Every item id (1..n) with its category, from an item -> category table."""
    items = np.arange(1, len(item_category), dtype=np.int64)
    return items, np.asarray(item_category[1:], dtype=np.int64)


# --------------------------------------------------------------------------
# online scoring


@dataclass
class ServeRequest:
    user_features: Sequence[int]
    seq_items: Sequence[int]
    seq_cats: Sequence[int]
    candidates: Sequence[int]


@dataclass
class ScoredItem:
    item_id: int
    score: float | None
    error: str | None = None


@dataclass
class StageTimes:
    user_tower: float = 0.0
    candidates: float = 0.0


class ServingSession:
    """Model + store for one serving process; Q* is computed once here.

    Nothing is mutated after construction, so concurrent ``score`` calls
    need no locking.
    """

    def __init__(self, model: FITModel, store: ItemStore):
        model.eval()
        cfg = model.config
        n_queries = model.mqm.n_queries if model.mqm is not None else 1
        if store.n_queries != n_queries:
            raise StoreError(f"store built for N={store.n_queries}, checkpoint has N={n_queries}")
        expect = (1, cfg.widths[-1]) if cfg.scorer == "dot" else (cfg.heads_item, cfg.head_dim)
        if (store.heads, store.head_dim) != expect:
            raise StoreError(f"store heads {(store.heads, store.head_dim)} do not match checkpoint {expect}")
        self.model = model
        self.store = store
        self.group = model.query_group()
        self.kind = cfg.scorer
        sc = model.scorer
        if self.kind == "lss":
            self.weights = tuple(np.ascontiguousarray(t.data) for t in
                                 (sc.w_row, sc.b_row, sc.w_col, sc.b_col, sc.w_out))
        elif self.kind == "flatten_fc":
            self.weights = tuple(np.ascontiguousarray(t.data) for t in (sc.w_fc, sc.b_fc, sc.w_out))
        else:
            self.weights = ()
        self.max_len = None

    def user_stack(self, request: ServeRequest) -> np.ndarray:
        seq_items = np.asarray(request.seq_items, dtype=np.int64)
        seq_cats = np.asarray(request.seq_cats, dtype=np.int64)
        if seq_items.shape != seq_cats.shape:
            raise ValueError("sequence items and categories differ in length")
        n = len(seq_items)
        width = max(n, 1)
        items = np.zeros(width, dtype=np.int64)
        cats = np.zeros(width, dtype=np.int64)
        items[:n], cats[:n] = seq_items, seq_cats
        return self.model.user_tower_inference_stack(np.asarray(request.user_features, dtype=np.int64),
                                                     items, cats, n, query_group=self.group)

    def score_stack(self, stack: np.ndarray, query_index: np.ndarray, heads: np.ndarray) -> np.ndarray:
        sim = kernels.candidate_similarity(stack, query_index, heads)
        if self.kind == "dot":
            return sim[:, 0, 0]
        if self.kind == "summax":
            return kernels.summax_scores(sim)
        if self.kind == "lss":
            return kernels.lss_scores(sim, *self.weights)
        return kernels.flatten_fc_scores(sim, *self.weights)

    def score(self, request: ServeRequest, times: StageTimes | None = None) -> list[ScoredItem]:
        """Logits for every candidate, in request order; unknown ids get an error entry."""
        t0 = time.perf_counter()
        stack = self.user_stack(request)
        t1 = time.perf_counter()
        cand = list(request.candidates)
        rows = self.store.rows(cand)
        ok = rows >= 0
        scores = np.zeros(len(cand), dtype=np.float32)
        if ok.any():
            s, heads = self.store.fetch(rows[ok])
            scores[ok] = self.score_stack(stack, s, heads)
        t2 = time.perf_counter()
        if times is not None:
            times.user_tower += t1 - t0
            times.candidates += t2 - t1
        return [ScoredItem(int(i), float(v), None) if good else ScoredItem(int(i), None, "unknown item id")
                for i, v, good in zip(cand, scores, ok)]


def serve_score(request: ServeRequest, store: ItemStore, model: FITModel) -> list[ScoredItem]:
    """One-shot convenience wrapper; long-lived servers should keep a ServingSession."""
    return ServingSession(model, store).score(request)


def serve_concurrent(session: ServingSession, requests: Sequence[ServeRequest], workers: int = 4):
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(session.score, requests))


def joint_forward_scores(model: FITModel, request: ServeRequest, item_category: np.ndarray) -> np.ndarray:
    """Single-tower oracle: the full model graph with each candidate's hard query.

    Every candidate gets its own user-tower pass (batched into one call),
    which is the O(k * N_fwd) cost late interaction avoids.
    """
    cand = np.asarray(request.candidates, dtype=np.int64)
    k = len(cand)
    n = len(request.seq_items)
    width = max(n, 1)
    seq_items = np.zeros((k, width), dtype=np.int64)
    seq_cats = np.zeros((k, width), dtype=np.int64)
    seq_items[:, :n] = np.asarray(request.seq_items)
    seq_cats[:, :n] = np.asarray(request.seq_cats)
    mask = np.zeros((k, width), dtype=bool)
    mask[:, :n] = True
    feats = np.tile(np.asarray(request.user_features, dtype=np.int64), (k, 1))
    batch = Batch(feats, seq_items, seq_cats, mask, np.stack([cand, item_category[cand]], axis=1),
                  np.zeros(k, dtype=np.float32))
    with model._inference():
        logits, _ = model(batch, hard=True)
    return logits.data


# --------------------------------------------------------------------------
# latency


@dataclass
class LatencyReport:
    k: int
    repetitions: int
    user_tower: float  # median seconds per request
    candidate_phase: float
    per_candidate: float
    total: float
    single_tower_oracle: float
    backend: str
    extra: dict = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        return self.single_tower_oracle / self.total if self.total > 0 else float("inf")

    def lines(self) -> list[str]:
        rows = [("k", self.k), ("repetitions", self.repetitions), ("backend", self.backend),
                ("user_tower_ms", self.user_tower * 1e3), ("candidate_phase_ms", self.candidate_phase * 1e3),
                ("per_candidate_us", self.per_candidate * 1e6), ("total_ms", self.total * 1e3),
                ("single_tower_oracle_ms", self.single_tower_oracle * 1e3), ("speedup", self.speedup)]
        rows += sorted(self.extra.items())
        return [f"{k}\t{v:.6g}" if isinstance(v, float) else f"{k}\t{v}" for k, v in rows]


def bench_request(store: ItemStore, k: int, seq_len: int, rng: np.random.Generator,
                  item_category: np.ndarray) -> ServeRequest:
    ids = np.asarray(store.records["id"]).astype(np.int64)
    cand = rng.choice(ids, size=k, replace=len(ids) < k)
    seq = rng.choice(ids, size=seq_len)
    return ServeRequest([1], seq.tolist(), item_category[seq].tolist(), cand.tolist())


def latency_bench(store: ItemStore, model: FITModel, k: int, repetitions: int = 7, seq_len: int = 50,
                  item_category: np.ndarray | None = None, oracle_repetitions: int | None = None,
                  seed: int = 0) -> LatencyReport:
    """Median request latency split into user-tower and candidate phases, plus the oracle."""
    if item_category is None:
        raise ValueError("latency_bench needs the item -> category table for the oracle")
    rng = np.random.default_rng(seed)
    session = ServingSession(model, store)
    request = bench_request(store, k, seq_len, rng, item_category)
    session.score(request)  # warm-up
    users, cands, totals = [], [], []
    for _ in range(repetitions):
        st = StageTimes()
        t0 = time.perf_counter()
        session.score(request, st)
        totals.append(time.perf_counter() - t0)
        users.append(st.user_tower)
        cands.append(st.candidates)
    oracle = []
    joint_forward_scores(model, request, item_category)
    for _ in range(oracle_repetitions or max(1, repetitions // 2)):
        t0 = time.perf_counter()
        joint_forward_scores(model, request, item_category)
        oracle.append(time.perf_counter() - t0)
    cand_med = statistics.median(cands)
    return LatencyReport(k, repetitions, statistics.median(users), cand_med, cand_med / max(k, 1),
                         statistics.median(totals), statistics.median(oracle), kernels.BACKEND)


def backend_comparison(k: int = 2000, heads: int = 2, head_dim: int = 64, n_queries: int = 64, d: int = 16,
                       repetitions: int = 20, seed: int = 0) -> dict[str, dict[str, float]]:
    """Median seconds for each candidate-phase kernel under every available backend."""
    rng = np.random.default_rng(seed)
    stack = rng.normal(size=(n_queries, heads, head_dim)).astype(np.float32)
    items = rng.normal(size=(k, heads, head_dim)).astype(np.float32)
    s = rng.integers(0, n_queries, size=k)
    lss = [rng.normal(size=sh).astype(np.float32) for sh in ((d, heads), (d,), (d, heads), (d,), (d * d,))]
    a = rng.normal(size=(256, 300)).astype(np.float32)
    b = rng.normal(size=(300, 300)).astype(np.float32)
    out = {}
    for name in kernels.AVAILABLE:
        mod = kernels.backend_module(name)
        sim = mod.candidate_similarity(stack, s, items)
        cases = {
            "candidate_similarity": lambda: mod.candidate_similarity(stack, s, items),
            "summax_scores": lambda: mod.summax_scores(sim),
            "lss_scores": lambda: mod.lss_scores(sim, *lss),
            "matmul_ordered_256x300x300": lambda: mod.matmul_ordered(a, b),
        }
        timings = {}
        for label, fn in cases.items():
            fn()
            runs = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                fn()
                runs.append(time.perf_counter() - t0)
            timings[label] = statistics.median(runs)
        out[name] = timings
    return out
