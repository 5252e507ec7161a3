"""Pure-numpy twins of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def matmul_ordered(a, b):
    """``a @ b`` accumulated in increasing inner-index order.

    One rank-1 update per inner index; each update rounds the product to f32
    before adding, which is exactly what the compiled loop does with FMA
    contraction disabled.
    """
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims disagree: {a.shape[1]} vs {b.shape[0]}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k]
    return out


def candidate_similarity(user_stack, query_index, item_heads):
    user_stack = np.asarray(user_stack, dtype=np.float32)
    item_heads = np.asarray(item_heads, dtype=np.float32)
    query_index = np.asarray(query_index, dtype=np.int64)
    if user_stack.shape[2] != item_heads.shape[2]:
        raise ValueError("head dimension mismatch between user and item heads")
    if query_index.shape[0] != item_heads.shape[0]:
        raise ValueError("one query index per candidate required")
    nq = user_stack.shape[0]
    if query_index.size and (query_index.min() < 0 or query_index.max() >= nq):
        raise IndexError(f"query index out of range [0, {nq})")
    return np.matmul(user_stack[query_index], item_heads.transpose(0, 2, 1))


def summax_scores(sim):
    return np.asarray(sim, dtype=np.float32).max(axis=2).sum(axis=1)


def lss_scores(sim, w_row, b_row, w_col, b_col, w_out):
    sim = np.asarray(sim, dtype=np.float32)
    d = w_row.shape[0]
    if w_row.shape[1] != sim.shape[2] or w_col.shape != (d, sim.shape[1]):
        raise ValueError("LSS weight shapes do not match the similarity matrix")
    if w_out.shape[0] != d * d or b_row.shape[0] != d or b_col.shape[0] != d:
        raise ValueError("LSS bias/projection shapes inconsistent")
    rows = np.maximum(sim @ w_row.T + b_row, 0)  # [k, Hu, d]
    cols = np.maximum(np.matmul(w_col, rows) + b_col[:, None], 0)  # [k, d, d]
    return cols.reshape(len(sim), -1) @ w_out


def flatten_fc_scores(sim, w_fc, b_fc, w_out):
    sim = np.asarray(sim, dtype=np.float32)
    flat = sim.reshape(len(sim), -1)
    if w_fc.shape[1] != flat.shape[1] or b_fc.shape[0] != w_fc.shape[0] or w_out.shape[0] != w_fc.shape[0]:
        raise ValueError("flatten-FC weight shapes do not match the similarity matrix")
    return (flat @ w_fc.T + b_fc) @ w_out
