"""Numba kernels for the similarity hot path.

All kernels operate on interned integer node ids, a per-node depth array and
a binary-lifting ancestor table `up` of shape (n_nodes, levels). fastmath is
deliberately off: the cohort cache and the per-batch matrix must be bitwise
reproducible.
"""
import numpy as np
from numba import njit, prange

_OPTS = {"cache": True, "nogil": True}


@njit(**_OPTS)
def lca_depth(a, b, depth, up):
    # lift the deeper node, then descend both in lock step
    if depth[a] < depth[b]:
        a, b = b, a
    diff = depth[a] - depth[b]
    k = 0
    while diff:
        if diff & 1:
            a = up[a, k]
        diff >>= 1
        k += 1
    if a == b:
        return depth[a]
    for k in range(up.shape[1] - 1, -1, -1):
        if up[a, k] != up[b, k]:
            a = up[a, k]
            b = up[b, k]
    return depth[a] - 1


@njit(**_OPTS)
def code_sim_many(a_ids, b_ids, depth, up):
    out = np.empty(a_ids.size, dtype=np.float64)
    for i in range(a_ids.size):
        a = a_ids[i]
        b = b_ids[i]
        if a == b:
            out[i] = 1.0
        else:
            dl = lca_depth(a, b, depth, up)
            out[i] = dl / (depth[a] + depth[b] - dl)
    return out


@njit(**_OPTS)
def pair_sim(acodes, bcodes, depth, up):
    # symmetric best-match: the m*n code-similarity block is traversed once,
    # tracking row maxima (a -> b direction) and column maxima (b -> a)
    m = acodes.size
    n = bcodes.size
    col_best = np.zeros(n, dtype=np.float64)
    sum_a = 0.0
    for i in range(m):
        a = acodes[i]
        da = depth[a]
        row_best = 0.0
        for j in range(n):
            b = bcodes[j]
            if a == b:
                s = 1.0
            else:
                dl = lca_depth(a, b, depth, up)
                s = dl / (da + depth[b] - dl)
            if s > row_best:
                row_best = s
            if s > col_best[j]:
                col_best[j] = s
        sum_a += row_best
    sum_b = 0.0
    for j in range(n):
        sum_b += col_best[j]
    return 0.5 * (sum_a / m + sum_b / n)


@njit(parallel=True, **_OPTS)
def cohort_pair_sims(codes_flat, offsets, depth, up):
    """Packed lower triangle of patient similarities, entry (i,j), i>j at
    index i*(i-1)/2 + j. Rows are independent, so prange is deterministic.

    Patients with an empty code set get similarity NaN; the caller maps
    those to uniform weight 1.
    """
    n = offsets.size - 1
    out = np.empty(n * (n - 1) // 2, dtype=np.float64)
    for i in prange(n):
        base = i * (i - 1) // 2
        lo_i = offsets[i]
        hi_i = offsets[i + 1]
        for j in range(i):
            lo_j = offsets[j]
            hi_j = offsets[j + 1]
            if hi_i == lo_i or hi_j == lo_j:
                out[base + j] = np.nan
            else:
                out[base + j] = pair_sim(
                    codes_flat[lo_i:hi_i], codes_flat[lo_j:hi_j], depth, up
                )
    return out
