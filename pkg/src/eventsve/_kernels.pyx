# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. ``_kernels_py`` mirrors every function bit for bit."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

cdef double CROSS_TOL = 1e-9


def integrate_fire(double[:, ::1] logi, double[::1] times, double[::1] ref, double C):
    """Integrate-and-fire over a (T, N) log-intensity grid.

    ``ref`` holds each pixel's reference level and is updated in place.
    Returns ``(t_us, pixel, polarity)`` in pixel-major order.
    """
    cdef Py_ssize_t T = logi.shape[0], N = logi.shape[1]
    cdef Py_ssize_t n, i, cap = 1024, count = 0
    cdef long k, j
    cdef double delta, prev, cur, level, frac, r0
    cdef cnp.ndarray[cnp.int64_t] out_t = np.empty(cap, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t] out_i = np.empty(cap, dtype=np.int64)
    cdef cnp.ndarray[cnp.int8_t] out_p = np.empty(cap, dtype=np.int8)
    for i in range(N):
        for n in range(1, T):
            prev = logi[n - 1, i]
            cur = logi[n, i]
            r0 = ref[i]
            delta = cur - r0
            if delta >= 0:
                k = <long>floor(delta / C + CROSS_TOL)
            else:
                k = -(<long>floor(-delta / C + CROSS_TOL))
            if k == 0:
                continue
            if count + (k if k > 0 else -k) > cap:
                while count + (k if k > 0 else -k) > cap:
                    cap *= 2
                out_t = np.resize(out_t, cap)
                out_i = np.resize(out_i, cap)
                out_p = np.resize(out_p, cap)
            if k > 0:
                for j in range(1, k + 1):
                    level = r0 + j * C
                    frac = (level - prev) / (cur - prev) if cur != prev else 1.0
                    if frac < 0.0:
                        frac = 0.0
                    elif frac > 1.0:
                        frac = 1.0
                    out_t[count] = <cnp.int64_t>floor(times[n - 1] + frac * (times[n] - times[n - 1]))
                    out_i[count] = i
                    out_p[count] = 1
                    count += 1
            else:
                for j in range(1, -k + 1):
                    level = r0 - j * C
                    frac = (level - prev) / (cur - prev) if cur != prev else 1.0
                    if frac < 0.0:
                        frac = 0.0
                    elif frac > 1.0:
                        frac = 1.0
                    out_t[count] = <cnp.int64_t>floor(times[n - 1] + frac * (times[n] - times[n - 1]))
                    out_i[count] = i
                    out_p[count] = -1
                    count += 1
            ref[i] = r0 + k * C
    return out_t[:count].copy(), out_i[:count].copy(), out_p[:count].copy()


cdef Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


def density_cluster(double[::1] u, double[::1] v, double[::1] t, double r_s, double r_t, long min_core):
    """Spatiotemporal density clustering; labels are -1 for noise.

    Neighbours satisfy du^2 + dv^2 <= r_s^2 and |dt| <= r_t. Clusters are the
    connected components of core events, numbered by their smallest member
    index; a border event joins the component of its lowest-index core
    neighbour.
    """
    cdef Py_ssize_t N = u.shape[0]
    cdef cnp.ndarray[cnp.int64_t] labels_arr = np.full(N, -1, dtype=np.int64)
    if N == 0:
        return labels_arr
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef cnp.ndarray[cnp.int64_t] cx_arr = np.floor(np.asarray(u) / r_s).astype(np.int64)
    cdef cnp.ndarray[cnp.int64_t] cy_arr = np.floor(np.asarray(v) / r_s).astype(np.int64)
    cdef cnp.int64_t[::1] cx = cx_arr, cy = cy_arr
    cdef cnp.int64_t x0 = cx_arr.min(), y0 = cy_arr.min()
    cdef cnp.int64_t W = cx_arr.max() - x0 + 3
    cdef cnp.ndarray[cnp.int64_t] key_arr = (cy_arr - y0 + 1) * W + (cx_arr - x0 + 1)
    cdef cnp.ndarray[cnp.int64_t] order_arr = np.lexsort((np.asarray(t), key_arr)).astype(np.int64)
    cdef cnp.int64_t[::1] order = order_arr
    cdef cnp.ndarray[cnp.int64_t] skey_arr = key_arr[order_arr]
    cdef cnp.int64_t[::1] skey = skey_arr
    cdef cnp.ndarray[cnp.float64_t] st_arr = np.asarray(t)[order_arr]
    cdef double[::1] st = st_arr
    cdef cnp.int64_t[::1] key = key_arr
    cdef cnp.ndarray[cnp.uint8_t] core_arr = np.zeros(N, dtype=np.uint8)
    cdef cnp.uint8_t[::1] core = core_arr
    cdef Py_ssize_t[::1] parent = np.arange(N, dtype=np.intp)
    cdef Py_ssize_t i, a, b, lo, hi, mid, pos, ra, rb
    cdef int dx, dy
    cdef cnp.int64_t nk
    cdef double du, dv, rs2 = r_s * r_s
    cdef long cnt

    # pass 1: core flags
    for i in range(N):
        cnt = 0
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                nk = key[i] + dy * W + dx
                lo = 0
                hi = N
                while lo < hi:  # first index with (skey, st) >= (nk, t_i - r_t)
                    mid = (lo + hi) >> 1
                    if skey[mid] < nk or (skey[mid] == nk and st[mid] < t[i] - r_t):
                        lo = mid + 1
                    else:
                        hi = mid
                pos = lo
                while pos < N and skey[pos] == nk and st[pos] <= t[i] + r_t:
                    b = order[pos]
                    du = u[b] - u[i]
                    dv = v[b] - v[i]
                    if du * du + dv * dv <= rs2:
                        cnt += 1
                    pos += 1
        if cnt >= min_core:
            core[i] = 1

    # pass 2: union cores, pick lowest-index core neighbour for borders
    cdef cnp.ndarray[cnp.int64_t] anchor_arr = np.full(N, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] anchor = anchor_arr
    for i in range(N):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                nk = key[i] + dy * W + dx
                lo = 0
                hi = N
                while lo < hi:
                    mid = (lo + hi) >> 1
                    if skey[mid] < nk or (skey[mid] == nk and st[mid] < t[i] - r_t):
                        lo = mid + 1
                    else:
                        hi = mid
                pos = lo
                while pos < N and skey[pos] == nk and st[pos] <= t[i] + r_t:
                    b = order[pos]
                    pos += 1
                    if not core[b]:
                        continue
                    du = u[b] - u[i]
                    dv = v[b] - v[i]
                    if du * du + dv * dv > rs2:
                        continue
                    if core[i]:
                        ra = _find(parent, i)
                        rb = _find(parent, b)
                        if ra != rb:
                            if ra < rb:
                                parent[rb] = ra
                            else:
                                parent[ra] = rb
                    elif anchor[i] < 0 or b < anchor[i]:
                        anchor[i] = b

    # roots are the smallest index of each component (union keeps the min as root)
    cdef cnp.ndarray[cnp.int64_t] root_label = np.full(N, -1, dtype=np.int64)
    cdef cnp.int64_t next_label = 0
    for i in range(N):
        if core[i]:
            ra = _find(parent, i)
            if root_label[ra] < 0:
                root_label[ra] = next_label
                next_label += 1
            labels[i] = root_label[ra]
    for i in range(N):
        if not core[i] and anchor[i] >= 0:
            labels[i] = labels[anchor[i]]
    return labels_arr
