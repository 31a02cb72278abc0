"""Pure numpy/scipy versions of the compiled kernels in ``_kernels.pyx``.

Both implementations evaluate the same floating-point expressions in the same
order, so their outputs agree exactly once sorted.
"""
from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

CROSS_TOL = 1e-9


def integrate_fire(logi, times, ref, C):
    logi = np.ascontiguousarray(logi, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    out_t, out_i, out_p = [], [], []
    for n in range(1, logi.shape[0]):
        prev, cur = logi[n - 1], logi[n]
        r0 = ref.copy()
        delta = cur - r0
        k = np.where(delta >= 0, np.floor(delta / C + CROSS_TOL), -np.floor(-delta / C + CROSS_TOL)).astype(np.int64)
        fired = np.nonzero(k)[0]
        if fired.size == 0:
            continue
        kk = k[fired]
        reps = np.abs(kk)
        pix = np.repeat(fired, reps)
        sign = np.repeat(np.sign(kk), reps)
        # crossing number j = 1..|k| within each pixel's run
        starts = np.cumsum(reps) - reps
        j = np.arange(reps.sum()) - np.repeat(starts, reps) + 1
        level = r0[pix] + (sign * j) * C
        p0, p1 = prev[pix], cur[pix]
        same = p1 == p0
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(same, 1.0, (level - p0) / np.where(same, 1.0, p1 - p0))
        frac = np.clip(frac, 0.0, 1.0)
        out_t.append(np.floor(times[n - 1] + frac * (times[n] - times[n - 1])).astype(np.int64))
        out_i.append(pix.astype(np.int64))
        out_p.append(sign.astype(np.int8))
        ref[fired] = r0[fired] + kk * C
    if not out_t:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int8)
    return np.concatenate(out_t), np.concatenate(out_i), np.concatenate(out_p)


def _neighbour_pairs(u, v, t, r_s, r_t):
    scale = r_s / r_t if r_t > 0 else 1.0
    pts = np.column_stack([u, v, t * scale])
    tree = cKDTree(pts)
    pairs = tree.query_pairs(r_s * np.sqrt(2.0) * (1.0 + 1e-9), output_type="ndarray")
    if pairs.size == 0:
        return pairs.reshape(0, 2)
    a, b = pairs[:, 0], pairs[:, 1]
    du = u[b] - u[a]
    dv = v[b] - v[a]
    keep = (du * du + dv * dv <= r_s * r_s) & (np.abs(t[b] - t[a]) <= r_t)
    return pairs[keep]


def density_cluster(u, v, t, r_s, r_t, min_core):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    n = len(u)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    pairs = _neighbour_pairs(u, v, t, r_s, r_t)
    # every event is its own neighbour
    counts = 1 + np.bincount(pairs.ravel(), minlength=n)
    core = counts >= min_core
    a, b = pairs[:, 0], pairs[:, 1]
    cc = core[a] & core[b]
    graph = coo_matrix((np.ones(cc.sum()), (a[cc], b[cc])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    core_idx = np.nonzero(core)[0]
    # number components by their smallest core member
    first = {}
    for i in core_idx:
        c = comp[i]
        if c not in first:
            first[c] = len(first)
        labels[i] = first[c]
    # border events take the label of their lowest-index core neighbour
    anchor = np.full(n, n, dtype=np.int64)
    for x, y in ((a, b), (b, a)):
        sel = core[y] & ~core[x]
        np.minimum.at(anchor, x[sel], y[sel])
    border = anchor < n
    labels[border] = labels[anchor[border]]
    return labels
