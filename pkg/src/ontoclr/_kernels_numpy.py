"""Pure-numpy fallbacks for the similarity kernels.

Same contracts as _kernels_numba, selected when numba is unavailable or
disabled via ONTOCLR_DISABLE_NUMBA. The LCA here is vectorised binary
lifting over whole id arrays rather than a per-pair loop.
"""
import numpy as np


def lca_depth_many(a_ids, b_ids, depth, up):
    a = a_ids.astype(np.int64, copy=True)
    b = b_ids.astype(np.int64, copy=True)
    da = depth[a]
    db = depth[b]
    # make `a` the deeper node everywhere
    swap = db > da
    a[swap], b[swap] = b[swap], a[swap]
    diff = np.abs(da - db)
    k = 0
    while np.any(diff):
        hit = (diff & 1).astype(bool)
        if hit.any():
            a[hit] = up[a[hit], k]
        diff >>= 1
        k += 1
    eq = a == b
    for k in range(up.shape[1] - 1, -1, -1):
        stepped = ~eq & (up[a, k] != up[b, k])
        if stepped.any():
            a[stepped] = up[a[stepped], k]
            b[stepped] = up[b[stepped], k]
    out = depth[a] - 1
    out[eq] = depth[a[eq]]
    return out


def code_sim_many(a_ids, b_ids, depth, up):
    dl = lca_depth_many(a_ids, b_ids, depth, up).astype(np.float64)
    denom = depth[a_ids] + depth[b_ids] - dl
    out = np.empty(a_ids.size, dtype=np.float64)
    same = a_ids == b_ids
    np.divide(dl, denom, out=out, where=~same)
    out[same] = 1.0
    return out


def pair_sim(acodes, bcodes, depth, up):
    m = acodes.size
    n = bcodes.size
    aa = np.repeat(acodes, n)
    bb = np.tile(bcodes, m)
    s = code_sim_many(aa, bb, depth, up).reshape(m, n)
    return 0.5 * (s.max(axis=1).mean() + s.max(axis=0).mean())


def cohort_pair_sims(codes_flat, offsets, depth, up):
    n = offsets.size - 1
    out = np.empty(n * (n - 1) // 2, dtype=np.float64)
    for i in range(n):
        base = i * (i - 1) // 2
        lo_i, hi_i = offsets[i], offsets[i + 1]
        for j in range(i):
            lo_j, hi_j = offsets[j], offsets[j + 1]
            if hi_i == lo_i or hi_j == lo_j:
                out[base + j] = np.nan
            else:
                out[base + j] = pair_sim(
                    codes_flat[lo_i:hi_i], codes_flat[lo_j:hi_j], depth, up
                )
    return out
