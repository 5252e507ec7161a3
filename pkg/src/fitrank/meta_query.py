"""Learnable item meta matrix, query group, soft/hard query and the temperature schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import Module, Tensor, kaiming_uniform, param
from .tensor_core import tensor as T


def parameter_free_self_attention(meta: Tensor) -> Tensor:
    """Query group (Q Q^T) Q: the meta rows attend to each other without projections."""
    return T.matmul(T.matmul(meta, T.transpose(meta)), meta)


def candidate_weights(item_emb: Tensor, meta: Tensor, tau: float) -> Tensor:
    """Softmax over the N dot products between candidate embeddings and meta rows.

    Accepts one candidate ``[D]`` or a batch ``[B, D]``.  Logits use the raw
    meta matrix rows, not the query group.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    single = item_emb.ndim == 1
    e = T.reshape(item_emb, (1, -1)) if single else item_emb
    k = T.softmax(T.matmul(e, T.transpose(meta)), tau=tau)
    return T.reshape(k, (-1,)) if single else k


def soft_query(weights: Tensor, query_group: Tensor) -> Tensor:
    """Convex combination of query-group rows, ``k @ Q*``."""
    single = weights.ndim == 1
    k = T.reshape(weights, (1, -1)) if single else weights
    q = T.matmul(k, query_group)
    return T.reshape(q, (-1,)) if single else q


def query_index(weights) -> np.ndarray | int:
    """Argmax per row with ties going to the lowest index."""
    k = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    if k.size == 0:
        raise ValueError("empty weight vector")
    idx = np.argmax(k, axis=-1)
    return int(idx) if np.ndim(idx) == 0 else idx.astype(np.int64)


def temperature(step: int, threshold: int, floor: float = 1e-3) -> float:
    """Linear decay from 1.0 over ``threshold`` steps, clamped below at ``floor``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if step < 0:
        raise ValueError("step must be non-negative")
    return max(min(1.0, 1.0 - step / threshold), floor)


@dataclass
class TemperatureSchedule:
    threshold: int
    floor: float = 1e-3
    step: int = 0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")

    @property
    def tau(self) -> float:
        return temperature(self.step, self.threshold, self.floor)

    def advance(self) -> None:
        self.step += 1


def query_similarity(soft, hard, eps: float = 1e-12) -> np.ndarray | float:
    """Cosine similarity between soft and hard queries, row-wise."""
    a = soft.data if isinstance(soft, Tensor) else np.asarray(soft, dtype=np.float64)
    b = hard.data if isinstance(hard, Tensor) else np.asarray(hard, dtype=np.float64)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    num = (a * b).sum(axis=-1)
    den = np.maximum(np.linalg.norm(a, axis=-1), eps) * np.maximum(np.linalg.norm(b, axis=-1), eps)
    out = np.clip(num / den, -1.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


class MetaQuery(Module):
    """Item meta matrix Q of shape [N, D], He-uniform initialised."""

    def __init__(self, rng: np.random.Generator, n_queries: int, width: int):
        super().__init__()
        self.meta = param(kaiming_uniform(rng, (n_queries, width)), name="meta")

    @property
    def n_queries(self) -> int:
        return self.meta.shape[0]

    def query_group(self) -> Tensor:
        return parameter_free_self_attention(self.meta)

    def __call__(self, item_emb: Tensor, tau: float, hard: bool = False):
        """Returns (query, weights, index, query_group) for a batch of candidates.

        ``hard`` pulls the single row ``Q*[s]`` with ``s = argmax k``;
        otherwise the soft query ``k @ Q*`` is returned.
        """
        group = self.query_group()
        k = candidate_weights(item_emb, self.meta, tau)
        s = query_index(k)
        if hard:
            q = T.take_rows(group, s)
        else:
            q = soft_query(k, group)
        return q, k, s, group
