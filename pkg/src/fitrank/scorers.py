"""Output-layer scorers: dot, sum-max, LSS and the flatten-FC variant.

Heads are laid out as rows: ``z`` has shape [..., H, p].  Every function
takes an optional leading batch axis.  Flattening is row-major throughout,
which the serving kernels rely on.
"""
from __future__ import annotations

import numpy as np

from .tensor_core import Module, Tensor, kaiming_uniform, param
from .tensor_core import tensor as T

SCORERS = ("dot", "summax", "flatten_fc", "lss")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def dot_score(h_u, h_v) -> Tensor:
    """Inner product along the last axis."""
    h_u, h_v = _t(h_u), _t(h_v)
    if h_u.shape[-1] != h_v.shape[-1]:
        raise ValueError(f"length mismatch: {h_u.shape[-1]} vs {h_v.shape[-1]}")
    return T.sum(T.mul(h_u, h_v), axis=-1)


def similarity_matrix(z_u, z_v) -> Tensor:
    """S[..., i, j] = z_u[..., i, :] . z_v[..., j, :]."""
    z_u, z_v = _t(z_u), _t(z_v)
    if z_u.shape[-1] != z_v.shape[-1]:
        raise ValueError(f"head dim mismatch: {z_u.shape[-1]} vs {z_v.shape[-1]}")
    lead = z_u.shape[:-2]
    hu, p = z_u.shape[-2:]
    hv = z_v.shape[-2]
    a = T.reshape(z_u, lead + (hu, 1, p))
    b = T.reshape(z_v, z_v.shape[:-2] + (1, hv, p))
    return T.sum(T.mul(a, b), axis=-1)


def summax_score(z_u, z_v) -> Tensor:
    """sum_i max_j S_ij; ties route the gradient to the lowest item head."""
    return summax_from_similarity(similarity_matrix(z_u, z_v))


def summax_from_similarity(sim: Tensor) -> Tensor:
    return T.sum(T.max(sim, axis=-1), axis=-1)


class LssParams(Module):
    """Row transform (w_row [d, Hv], b_row), column transform (w_col [d, Hu], b_col), w_out [d*d]."""

    def __init__(self, rng: np.random.Generator, heads_user: int, heads_item: int, d: int = 16):
        super().__init__()
        self.w_row = param(kaiming_uniform(rng, (d, heads_item)))
        self.b_row = param(np.zeros(d))
        self.w_col = param(kaiming_uniform(rng, (d, heads_user)))
        self.b_col = param(np.zeros(d))
        self.w_out = param(kaiming_uniform(rng, (d * d,), fan_in=d * d))

    @property
    def shape(self) -> tuple[int, int, int]:
        """(H_u, H_v, d)."""
        return self.w_col.shape[1], self.w_row.shape[1], self.w_row.shape[0]


def lss_score(sim, params: LssParams) -> Tensor:
    """Row-wise FC + ReLU, column-wise FC + ReLU, flatten, project to a scalar.

    ``sim`` is [..., Hu, Hv]; the intermediate row map is [..., Hu, d] and the
    column map [..., d, d].
    """
    sim = _t(sim)
    hu, hv, d = params.shape
    if sim.shape[-2:] != (hu, hv):
        raise ValueError(f"similarity matrix {sim.shape[-2:]} does not match scorer heads ({hu}, {hv})")
    rows = T.relu(T.add(T.matmul(sim, T.transpose(params.w_row)), params.b_row))
    cols = T.relu(T.add(T.matmul(params.w_col, rows), T.reshape(params.b_col, (d, 1))))
    flat = T.reshape(cols, cols.shape[:-2] + (d * d,))
    return T.sum(T.mul(flat, params.w_out), axis=-1)


class FlattenFcParams(Module):
    """w_fc [d, Hu*Hv], b_fc [d], w_out [d]."""

    def __init__(self, rng: np.random.Generator, heads_user: int, heads_item: int, d: int = 16):
        super().__init__()
        self.heads = (heads_user, heads_item)
        self.w_fc = param(kaiming_uniform(rng, (d, heads_user * heads_item)))
        self.b_fc = param(np.zeros(d))
        self.w_out = param(kaiming_uniform(rng, (d,), fan_in=d))


def flatten_fc_score(sim, params: FlattenFcParams) -> Tensor:
    """w_out . (w_fc flatten(S) + b_fc), no nonlinearity."""
    sim = _t(sim)
    hu, hv = params.heads
    if sim.shape[-2:] != (hu, hv):
        raise ValueError(f"similarity matrix {sim.shape[-2:]} does not match scorer heads ({hu}, {hv})")
    lead = sim.shape[:-2]
    flat = T.reshape(sim, (-1, hu * hv))
    hidden = T.linear(flat, params.w_fc, params.b_fc)
    out = T.sum(T.mul(hidden, params.w_out), axis=-1)
    return T.reshape(out, lead)


def lss_parameter_count(heads_user: int, heads_item: int, d: int = 16) -> int:
    return d * heads_item + d + d * heads_user + d + d * d


def flatten_fc_parameter_count(heads_user: int, heads_item: int, d: int = 16) -> int:
    return d * heads_user * heads_item + 2 * d


def make_scorer_params(kind: str, rng: np.random.Generator, heads_user: int, heads_item: int, d: int):
    if kind not in SCORERS:
        raise ValueError(f"scorer must be one of {SCORERS}, got {kind!r}")
    if kind == "lss":
        return LssParams(rng, heads_user, heads_item, d)
    if kind == "flatten_fc":
        return FlattenFcParams(rng, heads_user, heads_item, d)
    return None


def score(kind: str, params, h_u: Tensor, h_v: Tensor, z_u: Tensor | None, z_v: Tensor | None) -> Tensor:
    """Dispatch on the configured scorer; returns one logit per row."""
    if kind == "dot":
        return dot_score(h_u, h_v)
    sim = similarity_matrix(z_u, z_v)
    if kind == "summax":
        return summax_from_similarity(sim)
    if kind == "lss":
        return lss_score(sim, params)
    if kind == "flatten_fc":
        return flatten_fc_score(sim, params)
    raise ValueError(f"unknown scorer {kind!r}")
