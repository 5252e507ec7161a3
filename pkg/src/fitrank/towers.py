"""User/item towers, sequence pooling and the DIN-style interaction unit."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor_core import Dense, Module, Tensor, kaiming_uniform, param
from .tensor_core import tensor as T


class DinAttention(Module):
    """a(e, q): FC stack over [e, q, e*q] with Dice activations and a scalar output.

    The weights it produces are not normalized across positions.
    """

    def __init__(self, rng: np.random.Generator, width: int, hidden: Sequence[int] = (64, 16)):
        super().__init__()
        dims = [3 * width, *hidden]
        self.hidden = [Dense(rng, a, b, activation="dice") for a, b in zip(dims[:-1], dims[1:])]
        self.out = Dense(rng, dims[-1], 1, activation="none")

    def __call__(self, items: Tensor, queries: Tensor) -> Tensor:
        x = T.concat([items, queries, T.mul(items, queries)], axis=-1)
        for layer in self.hidden:
            x = layer(x)
        return self.out(x)  # [n, 1]


def _valid_positions(mask: np.ndarray):
    mask = np.asarray(mask, dtype=bool)
    flat = np.flatnonzero(mask.reshape(-1))
    return flat, flat // mask.shape[1]


def din_attention_pool(query: Tensor, sequence: Tensor, mask: np.ndarray, attention) -> Tensor:
    """sum_j a(e_j, q) e_j over the unmasked positions of each row.

    ``query`` is [B, D], ``sequence`` [B, L, D]; ``attention`` maps
    (items [n, D], queries [n, D]) to weights [n, 1].  Padding never enters
    the attention network, so it contributes exactly zero.  A row with no
    valid position pools to the zero vector.
    """
    b, length, width = sequence.shape
    if query.shape != (b, width):
        raise ValueError(f"query shape {query.shape} does not match sequence {sequence.shape}")
    flat, rows = _valid_positions(mask)
    items = T.take_rows(T.reshape(sequence, (b * length, width)), flat)
    weights = attention(items, T.take_rows(query, rows))
    return T.segment_sum(T.mul(weights, items), rows, b)


def average_pool(sequence: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the unmasked positions; zero for an empty row."""
    m = np.asarray(mask, dtype=sequence.data.dtype)
    counts = np.maximum(m.sum(axis=1, keepdims=True), 1)
    summed = T.sum(T.mul(sequence, m[:, :, None]), axis=1)
    return T.mul(summed, 1.0 / counts)


def assemble_user_input(user_features: Sequence[Tensor], pooled: Tensor, query: Tensor | None) -> Tensor:
    """e_u = [profile fields..., pooled sequence, query]; the query slot is omitted without MQM."""
    parts = list(user_features) + [pooled]
    if query is not None:
        parts.append(query)
    return T.concat(parts, axis=-1)


class Tower(Module):
    """FC stack (+BN, ReLU), L2 norm, and H linear heads read off the last hidden layer.

    Heads are stored as one [H*p, d_L] matrix so all of them come out of a
    single transform; ``z`` is laid out [B, H, p].
    """

    def __init__(self, rng: np.random.Generator, d_in: int, widths: Sequence[int], heads: int = 0,
                 head_dim: int = 64, batch_norm: bool = True):
        super().__init__()
        dims = [d_in, *widths]
        self.layers = [Dense(rng, a, b, activation="relu", batch_norm=batch_norm)
                       for a, b in zip(dims[:-1], dims[1:])]
        self.n_heads = heads
        self.head_dim = head_dim
        if heads:
            # 1/sqrt(p) keeps head similarities O(1) at init instead of O(sqrt(p))
            self.head_weight = param(kaiming_uniform(rng, (heads * head_dim, widths[-1])) / np.sqrt(head_dim))
            self.head_bias = param(np.zeros(heads * head_dim))

    @property
    def d_in(self) -> int:
        return self.layers[0].weight.shape[1]

    def __call__(self, e: Tensor):
        return tower_forward(e, self)


def tower_forward(e: Tensor, tower: Tower):
    """Returns (h^L, L2-normalized h, heads z or None)."""
    if e.shape[-1] != tower.d_in:
        raise ValueError(f"tower expects input width {tower.d_in}, got {e.shape[-1]}")
    x = e
    for layer in tower.layers:
        x = layer(x)
    h = T.l2_normalize(x)
    z = None
    if tower.n_heads:
        flat = T.linear(x, tower.head_weight, tower.head_bias)
        z = T.reshape(flat, (x.shape[0], tower.n_heads, tower.head_dim))
    return x, h, z
