"""MovieLens ingestion, example construction, synthetic data and batching.

Ids everywhere are dense integers with 0 reserved as the padding id, so
real users/items/categories are numbered from 1.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

MAX_LEN = 50


class DataError(ValueError):
    pass


@dataclass
class InteractionLog:
    """Events sorted by (user, timestamp, file order)."""

    user: np.ndarray
    item: np.ndarray
    category: np.ndarray
    timestamp: np.ndarray
    n_users: int
    n_items: int
    n_categories: int
    item_category: np.ndarray  # item id -> category id, index 0 = padding
    counts: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.user)

    def user_slices(self) -> Iterator[tuple[int, slice]]:
        bounds = np.flatnonzero(np.diff(self.user)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [len(self.user)]])
        for s, e in zip(starts, ends):
            yield int(self.user[s]), slice(int(s), int(e))


@dataclass
class TrainingExample:
    user: int
    user_features: tuple
    sequence: list  # (item, category) pairs, oldest first
    candidate: tuple  # (item, category)
    label: int
    final: bool


@dataclass
class ExampleSet:
    """Columnar example storage; one row per (sequence, candidate, label)."""

    user_feats: np.ndarray  # [n, A] int32 (column 0 is the user id)
    seq_items: np.ndarray  # [n, L] int32, zero padded on the right
    seq_cats: np.ndarray  # [n, L] int32
    seq_len: np.ndarray  # [n] int16
    cand_item: np.ndarray  # [n] int32
    cand_cat: np.ndarray  # [n] int32
    label: np.ndarray  # [n] int8
    final: np.ndarray  # [n] bool: candidate is the user's last event
    n_users: int
    n_items: int
    n_categories: int
    item_category: np.ndarray
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.label)

    @property
    def user(self) -> np.ndarray:
        return self.user_feats[:, 0]

    @property
    def max_len(self) -> int:
        return self.seq_items.shape[1]

    def __getitem__(self, i: int) -> TrainingExample:
        n = int(self.seq_len[i])
        seq = list(zip(self.seq_items[i, :n].tolist(), self.seq_cats[i, :n].tolist()))
        return TrainingExample(int(self.user_feats[i, 0]), tuple(self.user_feats[i].tolist()), seq,
                               (int(self.cand_item[i]), int(self.cand_cat[i])), int(self.label[i]),
                               bool(self.final[i]))

    def __iter__(self) -> Iterator[TrainingExample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, rows: np.ndarray) -> "ExampleSet":
        return ExampleSet(self.user_feats[rows], self.seq_items[rows], self.seq_cats[rows],
                          self.seq_len[rows], self.cand_item[rows], self.cand_cat[rows],
                          self.label[rows], self.final[rows], self.n_users, self.n_items,
                          self.n_categories, self.item_category, dict(self.info))

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a).tobytes() for a in
                        (self.user_feats, self.seq_items, self.seq_cats, self.seq_len,
                         self.cand_item, self.cand_cat, self.label, self.final))


@dataclass
class Batch:
    user_feats: np.ndarray  # [B, A]
    seq_items: np.ndarray  # [B, L]
    seq_cats: np.ndarray  # [B, L]
    mask: np.ndarray  # [B, L] bool, True on real events
    cand: np.ndarray  # [B, 2] (item, category)
    labels: np.ndarray  # [B] float32

    def __len__(self) -> int:
        return len(self.labels)


def make_batch(ex: ExampleSet, rows: np.ndarray) -> Batch:
    seq_items = ex.seq_items[rows]
    mask = np.arange(ex.max_len)[None, :] < ex.seq_len[rows][:, None]
    return Batch(ex.user_feats[rows], seq_items, ex.seq_cats[rows], mask,
                 np.stack([ex.cand_item[rows], ex.cand_cat[rows]], axis=1),
                 ex.label[rows].astype(np.float32))


# --------------------------------------------------------------------------
# MovieLens


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        raise FileNotFoundError(f"missing MovieLens file: {path}")
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:  # the official movies.dat is latin-1
        text = raw.decode("latin-1")
    return text.splitlines()


def _parse_ml1m(root: Path):
    rows = []
    for lineno, line in enumerate(_read_lines(root / "ratings.dat"), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise DataError(f"ratings.dat line {lineno}: expected 4 '::' fields, got {len(parts)}")
        try:
            rows.append((int(parts[0]), int(parts[1]), int(parts[3])))
        except ValueError as exc:
            raise DataError(f"ratings.dat line {lineno}: {exc}") from None
    genres = {}
    for lineno, line in enumerate(_read_lines(root / "movies.dat"), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3:
            raise DataError(f"movies.dat line {lineno}: expected 3 '::' fields, got {len(parts)}")
        try:
            genres[int(parts[0])] = parts[2].split("|")[0].strip()
        except ValueError as exc:
            raise DataError(f"movies.dat line {lineno}: {exc}") from None
    return rows, genres


def _parse_ml100k(root: Path):
    rows = []
    for lineno, line in enumerate(_read_lines(root / "u.data"), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"u.data line {lineno}: expected 4 tab fields, got {len(parts)}")
        rows.append((int(parts[0]), int(parts[1]), int(parts[3])))
    names = ["unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
             "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
             "Romance", "Sci-Fi", "Thriller", "War", "Western"]
    genres = {}
    for lineno, line in enumerate(_read_lines(root / "u.item"), start=1):
        parts = line.split("|")
        if len(parts) < 24:
            continue
        flags = [int(f) for f in parts[-19:]]
        first = next((i for i, f in enumerate(flags) if f), 0)
        genres[int(parts[0])] = names[first]
    return rows, genres


def load_movielens(path) -> InteractionLog:
    """Parse a MovieLens dump (``ratings.dat`` + ``movies.dat``) into a sorted log.

    Every rating counts as a behavior.  The category of a movie is its first
    listed genre.  ``counts`` reports the raw figures (users, distinct rated
    movies, ratings, catalog size) and the post-protocol figures (users with
    at least two events and the movies they touch).  The ML-100k layout
    (``u.data``/``u.item``) is accepted too.
    """
    root = Path(path)
    if (root / "ratings.dat").exists() or not (root / "u.data").exists():
        rows, genres = _parse_ml1m(root)
    else:
        rows, genres = _parse_ml100k(root)
    if not rows:
        raise DataError(f"no ratings found under {root}")
    arr = np.array(rows, dtype=np.int64)
    raw_user, raw_item, ts = arr[:, 0], arr[:, 1], arr[:, 2]
    missing = np.setdiff1d(np.unique(raw_item), np.array(sorted(genres), dtype=np.int64))
    if missing.size:
        raise DataError(f"{missing.size} rated movies absent from the catalog, e.g. {missing[:5].tolist()}")

    uniq_users, user_dense = np.unique(raw_user, return_inverse=True)
    uniq_items, item_dense = np.unique(raw_item, return_inverse=True)
    genre_names = sorted({genres[int(m)] for m in uniq_items})
    genre_id = {g: i + 1 for i, g in enumerate(genre_names)}
    item_category = np.zeros(len(uniq_items) + 1, dtype=np.int32)
    item_category[1:] = [genre_id[genres[int(m)]] for m in uniq_items]

    user = user_dense.astype(np.int32) + 1
    item = item_dense.astype(np.int32) + 1
    order = np.lexsort((np.arange(len(ts)), ts, user))  # stable within equal timestamps
    user, item, ts = user[order], item[order], ts[order]

    per_user = np.bincount(user)
    kept_users = int((per_user >= 2).sum())
    kept_items = int(np.unique(item[per_user[user] >= 2]).size)
    counts = {
        "raw_ratings": int(len(rows)),
        "raw_users": int(len(uniq_users)),
        "raw_items_rated": int(len(uniq_items)),
        "catalog_movies": int(len(genres)),
        "categories": len(genre_names),
        "filtered_users": kept_users,
        "filtered_items": kept_items,
        "dropped_users": int(len(uniq_users) - kept_users),
    }
    log.info("loaded %s: %s", root, counts)
    return InteractionLog(user, item, item_category[item], ts, len(uniq_users), len(uniq_items),
                          len(genre_names), item_category, counts)


def _sample_negatives(rng: np.random.Generator, n_items: int, history: np.ndarray, k: int) -> np.ndarray:
    """Draw ``k`` items uniformly from 1..n_items excluding ``history``."""
    if n_items - np.unique(history).size <= 0:
        raise DataError("user has interacted with every item; cannot sample a negative")
    out = np.empty(k, dtype=np.int32)
    filled = 0
    hist = np.unique(history)
    while filled < k:
        draw = rng.integers(1, n_items + 1, size=2 * (k - filled) + 4)
        draw = draw[~np.isin(draw, hist)]
        take = min(k - filled, draw.size)
        out[filled:filled + take] = draw[:take]
        filled += take
    return out


def build_examples(log_: InteractionLog, max_len: int = MAX_LEN, rng_seed: int = 0,
                   prefixes_per_user: int = 1) -> ExampleSet:
    """Leave-last-out examples with one uniformly sampled negative per positive.

    For each user the last event is the positive candidate and the (up to
    ``max_len``) events before it are the sequence; the negative shares that
    sequence and is drawn from items the user never touched.  With
    ``prefixes_per_user > 1`` the same construction is also applied to the
    preceding events, giving extra rows flagged ``final=False``.
    """
    if prefixes_per_user < 1:
        raise ValueError("prefixes_per_user must be >= 1")
    rng = np.random.default_rng(rng_seed)
    rows_user, rows_end, rows_start, rows_final = [], [], [], []
    dropped = 0
    for u, sl in log_.user_slices():
        n = sl.stop - sl.start
        if n < 2:
            dropped += 1
            continue
        for t in range(n - 1, max(0, n - 1 - prefixes_per_user), -1):
            rows_user.append(u)
            rows_end.append(sl.start + t)
            rows_start.append(sl.start + max(0, t - max_len))
            rows_final.append(t == n - 1)
    if dropped:
        log.info("dropped %d users with fewer than two events", dropped)

    n_pos = len(rows_user)
    ends = np.asarray(rows_end, dtype=np.int64)
    starts = np.asarray(rows_start, dtype=np.int64)
    users = np.asarray(rows_user, dtype=np.int32)

    negatives = np.empty(n_pos, dtype=np.int32)
    i = 0
    for u, sl in log_.user_slices():
        j = i
        while j < n_pos and users[j] == u:
            j += 1
        if j > i:
            negatives[i:j] = _sample_negatives(rng, log_.n_items, log_.item[sl], j - i)
        i = j

    seq_len = (ends - starts).astype(np.int16)
    offsets = starts[:, None] + np.arange(max_len)[None, :]
    valid = np.arange(max_len)[None, :] < seq_len[:, None]
    offsets = np.where(valid, offsets, 0)
    seq_items = np.where(valid, log_.item[offsets], 0).astype(np.int32)
    seq_cats = np.where(valid, log_.category[offsets], 0).astype(np.int32)

    pos_item = log_.item[ends].astype(np.int32)
    # interleave positive and negative rows of the same sequence
    n = 2 * n_pos
    inter = lambda a, b: np.stack([a, b], axis=1).reshape((n,) + a.shape[1:])  # noqa: E731
    return ExampleSet(
        user_feats=inter(users, users)[:, None].astype(np.int32),
        seq_items=inter(seq_items, seq_items),
        seq_cats=inter(seq_cats, seq_cats),
        seq_len=inter(seq_len, seq_len),
        cand_item=inter(pos_item, negatives),
        cand_cat=inter(log_.item_category[pos_item], log_.item_category[negatives]).astype(np.int32),
        label=inter(np.ones(n_pos, np.int8), np.zeros(n_pos, np.int8)),
        final=inter(np.asarray(rows_final), np.asarray(rows_final)),
        n_users=log_.n_users,
        n_items=log_.n_items,
        n_categories=log_.n_categories,
        item_category=log_.item_category,
        info={"dropped_users": dropped, "source": "movielens", **log_.counts},
    )


# --------------------------------------------------------------------------
# synthetic planted structure


def synthetic_planted(seed: int, n_users: int, n_items: int, n_clusters: int, seq_len: int = 50,
                      min_seq_len: int | None = None, majority: int = 4,
                      hard_negative_frac: float = 1.0, pairs_per_user: int = 1) -> tuple[ExampleSet, np.ndarray]:
    """Users with one preferred item cluster, labels set by sequence x item interaction.

    Each user's sequence holds exactly ``majority`` items of the preferred
    cluster, ``majority - 1`` items of a runner-up cluster, and fills the rest
    with other clusters capped at ``majority - 2`` each, so the preferred
    cluster is the strict majority.  Every user gets a positive candidate
    (random item of the majority cluster) and a negative candidate (from the
    runner-up cluster with probability ``hard_negative_frac``, else from any
    non-majority cluster).  A candidate's label is 1 iff its cluster is the
    majority cluster of the sequence, which no user-only or item-only signal
    can predict.  The category attribute of an item is its cluster + 1.
    ``pairs_per_user`` repeats the positive/negative draw against the same
    sequence.

    Returns the examples and the ground-truth cluster of every item id
    (-1 at the padding slot).  ``n_clusters == 1`` yields positives only and
    sets ``info["degenerate"]``.
    """
    if n_users < 1 or n_items < 1 or n_clusters < 1:
        raise ValueError("sizes must be positive")
    if n_items % n_clusters:
        raise ValueError(f"n_items ({n_items}) must be divisible by n_clusters ({n_clusters})")
    if pairs_per_user < 1:
        raise ValueError("pairs_per_user must be >= 1")
    if majority < 2 and n_clusters > 1:
        raise ValueError("majority must be >= 2 so a runner-up cluster exists")
    min_seq_len = seq_len if min_seq_len is None else min_seq_len
    if not 1 <= min_seq_len <= seq_len:
        raise ValueError("need 1 <= min_seq_len <= seq_len")
    rng = np.random.default_rng(seed)
    per_cluster = n_items // n_clusters
    perm = rng.permutation(n_items)
    cluster_of = np.full(n_items + 1, -1, dtype=np.int64)
    cluster_of[1:] = perm % n_clusters
    members = [np.flatnonzero(cluster_of == c).astype(np.int32) for c in range(n_clusters)]
    assert all(len(m) == per_cluster for m in members)
    degenerate = n_clusters == 1

    def draw(c):
        return members[c][rng.integers(len(members[c]))]

    seqs, lens, cands, labels, users = [], [], [], [], []
    for u in range(1, n_users + 1):
        pref = int(rng.integers(n_clusters))
        length = int(rng.integers(min_seq_len, seq_len + 1))
        if degenerate:
            clusters = [pref] * length
            runner = None
        else:
            runner = int((pref + 1 + rng.integers(n_clusters - 1)) % n_clusters)
            others = [c for c in range(n_clusters) if c not in (pref, runner)]
            cap = majority - 2
            room = len(others) * cap
            n_fill = max(0, min(length - (2 * majority - 1), room))
            fill = []
            if n_fill:
                slots = np.repeat(np.asarray(others), cap)
                fill = rng.choice(slots, size=n_fill, replace=False).tolist()
            clusters = [pref] * majority + [runner] * (majority - 1) + fill
            rng.shuffle(clusters)
        seq = [int(draw(c)) for c in clusters][:seq_len]
        for _ in range(pairs_per_user):
            seqs.append(seq)
            lens.append(len(seq))
            users.append(u)
            cands.append(int(draw(pref)))
            labels.append(1)
            if degenerate:
                continue
            if rng.random() < hard_negative_frac:
                neg_c = runner
            else:
                neg_c = int((pref + 1 + rng.integers(n_clusters - 1)) % n_clusters)
            users.append(u)
            seqs.append(seq)
            lens.append(len(seq))
            cands.append(int(draw(neg_c)))
            labels.append(0)

    n = len(labels)
    seq_items = np.zeros((n, seq_len), dtype=np.int32)
    for i, s in enumerate(seqs):
        seq_items[i, : len(s)] = s
    item_category = np.zeros(n_items + 1, dtype=np.int32)
    item_category[1:] = cluster_of[1:] + 1
    cand_item = np.asarray(cands, dtype=np.int32)
    examples = ExampleSet(
        user_feats=np.asarray(users, dtype=np.int32)[:, None],
        seq_items=seq_items,
        seq_cats=item_category[seq_items],
        seq_len=np.asarray(lens, dtype=np.int16),
        cand_item=cand_item,
        cand_cat=item_category[cand_item],
        label=np.asarray(labels, dtype=np.int8),
        final=np.ones(n, dtype=bool),
        n_users=n_users,
        n_items=n_items,
        n_categories=n_clusters,
        item_category=item_category,
        info={"source": "synthetic", "degenerate": degenerate, "seed": seed},
    )
    if degenerate:
        log.warning("synthetic data with a single cluster has no negatives")
    return examples, cluster_of


def majority_cluster(seq_items: np.ndarray, seq_len: np.ndarray, cluster_of: np.ndarray) -> np.ndarray:
    """Majority cluster per row (lowest cluster id on ties)."""
    out = np.empty(len(seq_items), dtype=np.int64)
    n_clusters = int(cluster_of.max()) + 1
    for i, (row, n) in enumerate(zip(seq_items, seq_len)):
        out[i] = np.bincount(cluster_of[row[:n]], minlength=n_clusters).argmax()
    return out


# --------------------------------------------------------------------------
# splitting and batching


class BatchStream:
    """Mini-batches over an ExampleSet; optionally reshuffled per epoch."""

    def __init__(self, examples: ExampleSet, batch_size: int, shuffle: bool, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.examples = examples
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed

    def __len__(self) -> int:
        return -(-len(self.examples) // self.batch_size)

    def order(self, epoch: int = 0) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.examples))
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.examples))

    def epoch(self, epoch: int = 0) -> Iterator[Batch]:
        order = self.order(epoch)
        for start in range(0, len(order), self.batch_size):
            yield make_batch(self.examples, order[start:start + self.batch_size])

    def __iter__(self) -> Iterator[Batch]:
        return self.epoch(0)


@dataclass
class DataSplit:
    train: BatchStream
    val: BatchStream
    test: BatchStream
    users: dict


def split_and_batch(examples: ExampleSet, batch: int = 2048, val_frac: float = 0.2,
                    rng_seed: int = 0, test_frac: float = 0.1) -> DataSplit:
    """User-level split into train / validation / test streams.

    ``test_frac`` of the users are held out first; ``val_frac`` of the
    remaining pool becomes validation.  Validation and test keep only each
    user's final (last-event) rows, so their candidates are never seen in
    training.
    """
    if len(examples) == 0:
        raise ValueError("no examples to split")
    rng = np.random.default_rng(rng_seed)
    users = np.unique(examples.user)
    users = users[rng.permutation(len(users))]
    n_test = int(round(test_frac * len(users)))
    test_users, pool = users[:n_test], users[n_test:]
    n_val = int(round(val_frac * len(pool)))
    val_users, train_users = pool[:n_val], pool[n_val:]

    def rows(us, final_only):
        keep = np.isin(examples.user, us)
        if final_only:
            keep &= examples.final
        return np.flatnonzero(keep)

    return DataSplit(
        train=BatchStream(examples.subset(rows(train_users, False)), batch, True, rng_seed),
        val=BatchStream(examples.subset(rows(val_users, True)), batch, False, rng_seed),
        test=BatchStream(examples.subset(rows(test_users, True)), batch, False, rng_seed),
        users={"train": np.sort(train_users), "val": np.sort(val_users), "test": np.sort(test_users)},
    )


# --------------------------------------------------------------------------
# example cache file: "FITD", u16 version, counts, fixed-width LE records

_CACHE_MAGIC = b"FITD"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHHIIIIQ")  # magic, version, max_len, A, users, items, cats, rows


def _record_dtype(max_len: int, n_feats: int) -> np.dtype:
    return np.dtype([
        ("user_feats", "<u4", (n_feats,)), ("label", "u1"), ("final", "u1"), ("seq_len", "<u2"),
        ("cand_item", "<u4"), ("cand_cat", "<u4"),
        ("seq_items", "<u4", (max_len,)), ("seq_cats", "<u4", (max_len,)),
    ])


def write_examples(path, examples: ExampleSet) -> None:
    dt = _record_dtype(examples.max_len, examples.user_feats.shape[1])
    rec = np.zeros(len(examples), dtype=dt)
    rec["user_feats"] = examples.user_feats
    rec["label"] = examples.label
    rec["final"] = examples.final
    rec["seq_len"] = examples.seq_len
    rec["cand_item"] = examples.cand_item
    rec["cand_cat"] = examples.cand_cat
    rec["seq_items"] = examples.seq_items
    rec["seq_cats"] = examples.seq_cats
    header = _CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, examples.max_len,
                                examples.user_feats.shape[1], examples.n_users, examples.n_items,
                                examples.n_categories, len(examples))
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(examples.item_category.astype("<u4").tobytes())
        fh.write(rec.tobytes())
    os.replace(tmp, path)


def read_examples(path) -> ExampleSet:
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise DataError(f"{path}: truncated example cache")
    magic, version, max_len, n_feats, n_users, n_items, n_cats, n = _CACHE_HEADER.unpack_from(raw)
    if magic != _CACHE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != _CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    off = _CACHE_HEADER.size
    item_category = np.frombuffer(raw, dtype="<u4", count=n_items + 1, offset=off).astype(np.int32)
    off += 4 * (n_items + 1)
    dt = _record_dtype(max_len, n_feats)
    if len(raw) - off != n * dt.itemsize:
        raise DataError(f"{path}: expected {n} records of {dt.itemsize} bytes")
    rec = np.frombuffer(raw, dtype=dt, count=n, offset=off)
    return ExampleSet(
        user_feats=rec["user_feats"].astype(np.int32).reshape(n, n_feats),
        seq_items=rec["seq_items"].astype(np.int32).reshape(n, max_len),
        seq_cats=rec["seq_cats"].astype(np.int32).reshape(n, max_len),
        seq_len=rec["seq_len"].astype(np.int16),
        cand_item=rec["cand_item"].astype(np.int32),
        cand_cat=rec["cand_cat"].astype(np.int32),
        label=rec["label"].astype(np.int8),
        final=rec["final"].astype(bool),
        n_users=n_users, n_items=n_items, n_categories=n_cats,
        item_category=item_category,
    )
