# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Every routine here has a numpy twin in ``_pykernels``.  ``matmul_ordered``
must stay bitwise identical to its twin, so the build disables FMA
contraction and the accumulation order over the inner dimension is fixed.
"""
import numpy as np

from libc.stdlib cimport malloc, free


def matmul_ordered(const float[:, ::1] a, const float[:, ::1] b):
    """``a @ b`` accumulated in increasing inner-index order for every output cell.

    The result for one row of ``a`` does not depend on the other rows, which
    makes batched and row-by-row evaluation agree bitwise.
    """
    cdef Py_ssize_t m = a.shape[0], kdim = a.shape[1], n = b.shape[1]
    if b.shape[0] != kdim:
        raise ValueError(f"inner dims disagree: {kdim} vs {b.shape[0]}")
    out = np.zeros((m, n), dtype=np.float32)
    cdef float[:, ::1] c = out
    cdef Py_ssize_t i, k, j
    cdef float aik
    cdef float* crow
    cdef const float* brow
    if m == 0 or n == 0:
        return out
    with nogil:
        for i in range(m):
            crow = &c[i, 0]
            for k in range(kdim):
                aik = a[i, k]
                brow = &b[k, 0]
                for j in range(n):
                    crow[j] = crow[j] + aik * brow[j]
    return out


def candidate_similarity(const float[:, :, ::1] user_stack,
                         const long long[::1] query_index,
                         const float[:, :, ::1] item_heads):
    """S[c] = user_stack[query_index[c]] @ item_heads[c].T for every candidate c."""
    cdef Py_ssize_t n_cand = item_heads.shape[0]
    cdef Py_ssize_t hv = item_heads.shape[1], p = item_heads.shape[2]
    cdef Py_ssize_t nq = user_stack.shape[0], hu = user_stack.shape[1]
    if user_stack.shape[2] != p:
        raise ValueError("head dimension mismatch between user and item heads")
    if query_index.shape[0] != n_cand:
        raise ValueError("one query index per candidate required")
    out = np.empty((n_cand, hu, hv), dtype=np.float32)
    cdef float[:, :, ::1] sim = out
    cdef Py_ssize_t c, i, j, t
    cdef long long s
    cdef float acc, a0, a1, a2, a3
    cdef Py_ssize_t p4 = p - p % 4
    cdef const float* urow
    cdef const float* vrow
    cdef float* srow
    for c in range(n_cand):
        s = query_index[c]
        if s < 0 or s >= nq:
            raise IndexError(f"query index {s} out of range [0, {nq})")
    with nogil:
        for c in range(n_cand):
            s = query_index[c]
            for i in range(hu):
                urow = &user_stack[s, i, 0]
                srow = &sim[c, i, 0]
                for j in range(hv):
                    vrow = &item_heads[c, j, 0]
                    # four independent partial sums break the add dependency chain
                    a0 = a1 = a2 = a3 = 0.0
                    for t in range(0, p4, 4):
                        a0 = a0 + urow[t] * vrow[t]
                        a1 = a1 + urow[t + 1] * vrow[t + 1]
                        a2 = a2 + urow[t + 2] * vrow[t + 2]
                        a3 = a3 + urow[t + 3] * vrow[t + 3]
                    acc = (a0 + a1) + (a2 + a3)
                    for t in range(p4, p):
                        acc = acc + urow[t] * vrow[t]
                    srow[j] = acc
    return out


def summax_scores(const float[:, :, ::1] sim):
    cdef Py_ssize_t n_cand = sim.shape[0], hu = sim.shape[1], hv = sim.shape[2]
    out = np.empty(n_cand, dtype=np.float32)
    cdef float[::1] res = out
    cdef Py_ssize_t c, i, j
    cdef float best, total
    with nogil:
        for c in range(n_cand):
            total = 0.0
            for i in range(hu):
                best = sim[c, i, 0]
                for j in range(1, hv):
                    if sim[c, i, j] > best:
                        best = sim[c, i, j]
                total = total + best
            res[c] = total
    return out


def lss_scores(const float[:, :, ::1] sim,
               const float[:, ::1] w_row, const float[::1] b_row,
               const float[:, ::1] w_col, const float[::1] b_col,
               const float[::1] w_out):
    """Row-wise FC + ReLU, column-wise FC + ReLU, then a flat projection."""
    cdef Py_ssize_t n_cand = sim.shape[0], hu = sim.shape[1], hv = sim.shape[2]
    cdef Py_ssize_t d = w_row.shape[0]
    if w_row.shape[1] != hv or w_col.shape[1] != hu or w_col.shape[0] != d:
        raise ValueError("LSS weight shapes do not match the similarity matrix")
    if w_out.shape[0] != d * d or b_row.shape[0] != d or b_col.shape[0] != d:
        raise ValueError("LSS bias/projection shapes inconsistent")
    out = np.empty(n_cand, dtype=np.float32)
    cdef float[::1] res = out
    if n_cand == 0:
        return out
    # contiguous copies so the inner loops run over plain pointers
    w1_arr = np.ascontiguousarray(w_row, dtype=np.float32)
    w2_arr = np.ascontiguousarray(w_col, dtype=np.float32)
    cdef const float[:, ::1] w1v = w1_arr
    cdef const float[:, ::1] w2v = w2_arr
    cdef const float* w1 = &w1v[0, 0]
    cdef const float* w2 = &w2v[0, 0]
    cdef const float* b1 = &b_row[0]
    cdef const float* b2 = &b_col[0]
    cdef const float* wo = &w_out[0]
    cdef float* rows = <float*> malloc((hu * d + 2 * d) * sizeof(float))
    if rows == NULL:
        raise MemoryError()
    cdef float* col = rows + hu * d
    # per-lane partial sums of the projection: a single running total would be
    # one serial add chain, which the compiler may not reorder
    cdef float* lanes = col + d
    cdef const float* srow
    cdef const float* rrow
    cdef const float* worow
    cdef Py_ssize_t c, i, j, r, t
    cdef float acc, total, wri, v
    try:
        with nogil:
            for c in range(n_cand):
                # S'[i, r] = relu(sum_j W1[r, j] S[i, j] + b1[r])
                for i in range(hu):
                    srow = &sim[c, i, 0]
                    for r in range(d):
                        acc = b1[r]
                        for j in range(hv):
                            acc = acc + w1[r * hv + j] * srow[j]
                        rows[i * d + r] = acc if acc > 0 else 0.0
                # S''[r, :] = relu(b2[r] + sum_i W2[r, i] S'[i, :]); score = <w, S''>
                for t in range(d):
                    lanes[t] = 0.0
                for r in range(d):
                    for t in range(d):
                        col[t] = b2[r]
                    for i in range(hu):
                        wri = w2[r * hu + i]
                        rrow = rows + i * d
                        for t in range(d):
                            col[t] = col[t] + wri * rrow[t]
                    worow = wo + r * d
                    for t in range(d):
                        v = col[t] if col[t] > 0 else 0.0
                        lanes[t] = lanes[t] + worow[t] * v
                total = 0.0
                for t in range(d):
                    total = total + lanes[t]
                res[c] = total
    finally:
        free(rows)
    return out


def flatten_fc_scores(const float[:, :, ::1] sim,
                      const float[:, ::1] w_fc, const float[::1] b_fc,
                      const float[::1] w_out):
    cdef Py_ssize_t n_cand = sim.shape[0], hu = sim.shape[1], hv = sim.shape[2]
    cdef Py_ssize_t d = w_fc.shape[0], flat = hu * hv
    if w_fc.shape[1] != flat or b_fc.shape[0] != d or w_out.shape[0] != d:
        raise ValueError("flatten-FC weight shapes do not match the similarity matrix")
    out = np.empty(n_cand, dtype=np.float32)
    cdef float[::1] res = out
    cdef Py_ssize_t c, r, f
    cdef float acc, total
    with nogil:
        for c in range(n_cand):
            total = 0.0
            for r in range(d):
                acc = b_fc[r]
                for f in range(flat):
                    acc = acc + w_fc[r, f] * sim[c, f // hv, f % hv]
                total = total + w_out[r] * acc
            res[c] = total
    return out
