"""The full pre-ranking model: embeddings, meta query module, towers and scorer."""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import Batch
from .meta_query import MetaQuery, candidate_weights, query_index
from .scorers import make_scorer_params, score
from .tensor_core import Embedding, Module, Tensor
from .tensor_core import tensor as T
from .towers import DinAttention, Tower, assemble_user_input, average_pool, din_attention_pool

CKPT_MAGIC = b"FITC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class FITModel(Module):
    """Two towers joined by the meta query at the input and a scorer at the output.

    Without MQM the user tower never sees the candidate and the model is a
    plain two-tower network.  With the ``dot`` scorer no heads are built and
    the L2-normalized tower outputs are compared directly.
    """

    def __init__(self, config: TrainConfig):
        super().__init__()
        if min(config.n_users, config.n_items, config.n_categories) < 1:
            raise ValueError("config vocabulary sizes (n_users, n_items, n_categories) must be set")
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, width = config.embed_dim, config.item_width
        std = config.embed_init_std
        # user-level splits put unseen ids in val/test, so the id embedding is opt-in
        self.user_emb = Embedding(rng, config.n_users + 1, d, std) if config.use_user_id else None
        self.item_emb = Embedding(rng, config.n_items + 1, d, std)
        self.cat_emb = Embedding(rng, config.n_categories + 1, d, std)
        self.mqm = MetaQuery(rng, config.n_queries, width) if config.use_mqm else None
        self.attention = (DinAttention(rng, width, config.attention_widths)
                          if config.interaction == "din" else None)
        multi_head = config.scorer != "dot"
        user_in = (d if config.use_user_id else 0) + width + (width if config.use_mqm else 0)
        self.user_tower = Tower(rng, user_in, config.widths, config.heads_user if multi_head else 0,
                                config.head_dim, config.batch_norm)
        self.item_tower = Tower(rng, width, config.widths, config.heads_item if multi_head else 0,
                                config.head_dim, config.batch_norm)
        self.scorer = make_scorer_params(config.scorer, rng, config.heads_user, config.heads_item,
                                         config.scorer_dim)

    # -- pieces ----------------------------------------------------------

    def item_input(self, items: np.ndarray, cats: np.ndarray) -> Tensor:
        """e_v = e_c = [item embedding, category embedding]."""
        return T.concat([self.item_emb(items), self.cat_emb(cats)], axis=-1)

    def user_representation(self, user_feats: np.ndarray, seq_items: np.ndarray, seq_cats: np.ndarray,
                            mask: np.ndarray, query: Tensor | None):
        """User tower output (h^L, h, z) for a batch whose queries are already chosen."""
        seq = self.item_input(seq_items, seq_cats)
        if self.attention is not None:
            pooled = din_attention_pool(query, seq, mask, self.attention)
        else:
            pooled = average_pool(seq, mask)
        profile = [] if self.user_emb is None else [self.user_emb(user_feats[:, 0])]
        return self.user_tower(assemble_user_input(profile, pooled, query))

    def side_vectors(self, h: Tensor, z: Tensor | None) -> Tensor:
        """What the scorer consumes from a tower: heads, or h as a single head for dot."""
        if z is not None:
            return z
        return T.reshape(h, (h.shape[0], 1, h.shape[1]))

    def query(self, e_c: Tensor, tau: float, hard: bool):
        if self.mqm is None:
            return None, None
        tau = self.config.tau_floor if hard else tau
        q, k, s, _ = self.mqm(e_c, tau, hard=hard)
        return q, {"weights": k, "index": s, "query": q}

    def forward(self, batch: Batch, tau: float = 1.0, hard: bool = False):
        """Logits [B] and a diagnostics dict (query weights/index when MQM is on).

        Training uses the soft query at temperature ``tau``; ``hard`` selects
        the single query-group row at the temperature floor, exactly what
        serving reproduces from the stored index.
        """
        e_c = self.item_input(batch.cand[:, 0], batch.cand[:, 1])
        q, aux = self.query(e_c, tau, hard)
        _, h_u, z_u = self.user_representation(batch.user_feats, batch.seq_items, batch.seq_cats,
                                               batch.mask, q)
        _, h_v, z_v = self.item_tower(e_c)
        logits = score(self.config.scorer, self.scorer, h_u, h_v, z_u, z_v)
        return logits, (aux or {})

    __call__ = forward

    # -- serving-side entry points -----------------------------------------

    def query_group(self) -> np.ndarray | None:
        return None if self.mqm is None else self.mqm.query_group().data

    def user_tower_inference_stack(self, user_feats, seq_items, seq_cats, seq_len,
                                   query_group: np.ndarray | None = None) -> np.ndarray:
        """User representations for every hard query, as one batched forward.

        Returns [N, H_u, p] (or [N, 1, d_L] for the dot scorer); slice ``n``
        is the user representation under query ``Q*[n]``.  Without MQM the
        stack has a single slice.
        """
        user_feats = np.asarray(user_feats).reshape(1, -1)
        seq_items = np.asarray(seq_items).reshape(1, -1)
        seq_cats = np.asarray(seq_cats).reshape(1, -1)
        mask = np.arange(seq_items.shape[1])[None, :] < int(seq_len)
        if self.mqm is None:
            group = None
            n = 1
        else:
            group = self.query_group() if query_group is None else query_group
            n = group.shape[0]
        rep = lambda a: np.repeat(a, n, axis=0)  # noqa: E731
        q = None if group is None else Tensor(group)
        with self._inference():
            _, h, z = self.user_representation(rep(user_feats), rep(seq_items), rep(seq_cats),
                                               rep(mask), q)
            return self.side_vectors(h, z).data

    def item_representation(self, items: np.ndarray, cats: np.ndarray):
        """(item heads [n, H_v, p] or [n, 1, d_L], query index s [n]) for a catalog slice."""
        with self._inference():
            e = self.item_input(np.asarray(items), np.asarray(cats))
            _, h, z = self.item_tower(e)
            heads = self.side_vectors(h, z).data
            if self.mqm is None:
                s = np.zeros(len(heads), dtype=np.int64)
            else:
                s = np.atleast_1d(query_index(candidate_weights(e, self.mqm.meta, self.config.tau_floor)))
            return heads, s

    def _inference(self):
        return _EvalMode(self)

    # -- persistence ---------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update({f"buffer:{name}": b for name, b in self.named_buffers()})
        return out

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, self, meta)

    @classmethod
    def load(cls, path) -> "FITModel":
        return load_checkpoint(path)[0]


class _EvalMode:
    """Eval statistics, nothing recorded, previous mode restored on exit."""

    def __init__(self, model: Module):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        self.grad_off = T.no_grad()
        self.grad_off.__enter__()
        return self

    def __exit__(self, *exc):
        self.grad_off.__exit__(*exc)
        self.model.train(self.was_training)


def _section(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, model: FITModel, meta: dict | None = None) -> None:
    """Magic, version, JSON config, then (name, shape, f32 LE) sections and a CRC32 trailer."""
    doc = json.dumps({"config": json.loads(model.config.to_json()), "meta": meta or {}},
                     sort_keys=True).encode()
    state = model.state()
    body = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(doc)), doc,
            struct.pack("<I", len(state))]
    body += [_section(name, arr) for name, arr in state.items()]
    blob = b"".join(body)
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


def load_checkpoint(path) -> tuple[FITModel, dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 14 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, doc_len = struct.unpack_from("<HI", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    doc = json.loads(blob[pos:pos + doc_len])
    pos += doc_len
    cfg = doc["config"]
    cfg["widths"] = tuple(cfg["widths"])
    cfg["attention_widths"] = tuple(cfg["attention_widths"])
    model = FITModel(TrainConfig(**cfg))
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    sections = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        sections[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | {f"buffer:{b}" for b in buffers}
    if set(sections) != expected:
        missing = sorted(expected - set(sections))
        extra = sorted(set(sections) - expected)
        raise CheckpointError(f"{path}: section mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in params.items():
        if sections[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {sections[name].shape}, expected {p.shape}")
        p.data = sections[name].astype(np.float32).copy()
    for name in buffers:
        model.set_buffer(name, sections[f"buffer:{name}"])
    return model, doc.get("meta", {})


def export_item_embeddings(model: FITModel, path, items: np.ndarray, cats: np.ndarray) -> None:
    """Tab-separated ``id, s, vector`` lines for external cluster plots."""
    with model._inference():
        e = model.item_input(np.asarray(items), np.asarray(cats)).data
    s = (np.zeros(len(e), dtype=np.int64) if model.mqm is None else
         np.atleast_1d(query_index(candidate_weights(Tensor(e), model.mqm.meta, model.config.tau_floor))))
    with open(path, "w") as fh:
        for i, idx, vec in zip(np.asarray(items), s, e):
            fh.write(f"{int(i)}\t{int(idx)}\t" + " ".join(f"{v:.7g}" for v in vec) + "\n")
