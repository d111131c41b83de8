# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: brute-force top-k inner-product scan, ragged
late-interaction scoring, and k-means nearest-centroid assignment.

Numpy equivalents live in ``tasdr._kernels.fallback``; both backends
satisfy the same contracts (see that module for parameter docs).
"""

import numpy as np

cimport numpy as cnp

NAME = "compiled"


cdef inline bint _worse(double s1, long long i1, double s2, long long i2) nogil:
    # Heap ordering: the root holds the current worst candidate, where
    # worse means lower score, then higher row index on equal scores.
    if s1 != s2:
        return s1 < s2
    return i1 > i2


def topk_dot(double[:, ::1] matrix, double[::1] query, Py_ssize_t k):
    cdef Py_ssize_t n = matrix.shape[0]
    cdef Py_ssize_t d = matrix.shape[1]
    if query.shape[0] != d:
        raise ValueError("query dimension does not match matrix")
    if k < 1 or k > n:
        raise ValueError(f"k={k} out of range for {n} rows")

    heap_scores = np.empty(k, dtype=np.float64)
    heap_idx = np.empty(k, dtype=np.int64)
    cdef double[::1] hs = heap_scores
    cdef long long[::1] hi = heap_idx
    cdef Py_ssize_t filled = 0
    cdef Py_ssize_t i, j, c, parent, child, other
    cdef double s, ts
    cdef long long ti

    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += matrix[i, j] * query[j]
            if filled < k:
                hs[filled] = s
                hi[filled] = i
                c = filled
                filled += 1
                while c > 0:
                    parent = (c - 1) >> 1
                    if _worse(hs[c], hi[c], hs[parent], hi[parent]):
                        ts = hs[c]; hs[c] = hs[parent]; hs[parent] = ts
                        ti = hi[c]; hi[c] = hi[parent]; hi[parent] = ti
                        c = parent
                    else:
                        break
            elif s > hs[0]:
                # Rows are scanned in ascending index order, so on an exact
                # score tie the incumbent (lower index) must stay: strict >.
                hs[0] = s
                hi[0] = i
                c = 0
                while True:
                    child = 2 * c + 1
                    if child >= k:
                        break
                    other = child + 1
                    if other < k and _worse(hs[other], hi[other], hs[child], hi[child]):
                        child = other
                    if _worse(hs[child], hi[child], hs[c], hi[c]):
                        ts = hs[c]; hs[c] = hs[child]; hs[child] = ts
                        ti = hi[c]; hi[c] = hi[child]; hi[child] = ti
                        c = child
                    else:
                        break

    order = np.lexsort((heap_idx, -heap_scores))
    return heap_idx[order], heap_scores[order]


def late_interaction_scores(
    double[:, ::1] q_emb,
    long long[::1] q_offsets,
    double[:, ::1] p_emb,
    long long[::1] p_offsets,
):
    cdef Py_ssize_t n_q = q_offsets.shape[0] - 1
    cdef Py_ssize_t n_p = p_offsets.shape[0] - 1
    cdef Py_ssize_t d = q_emb.shape[1]
    if p_emb.shape[1] != d:
        raise ValueError("query/passage embedding dims differ")

    out = np.empty((n_q, n_p), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, a, b, c
    cdef double total, best, s

    with nogil:
        for i in range(n_q):
            for j in range(n_p):
                total = 0.0
                for a in range(q_offsets[i], q_offsets[i + 1]):
                    best = -1e300
                    for b in range(p_offsets[j], p_offsets[j + 1]):
                        s = 0.0
                        for c in range(d):
                            s += q_emb[a, c] * p_emb[b, c]
                        if s > best:
                            best = s
                    total += best
                ov[i, j] = total
    return out


def assign_nearest(double[:, ::1] points, double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t k = centroids.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    if centroids.shape[1] != d:
        raise ValueError("point/centroid dims differ")

    labels = np.empty(n, dtype=np.int64)
    sqdist = np.empty(n, dtype=np.float64)
    cdef long long[::1] lv = labels
    cdef double[::1] dv = sqdist
    cdef Py_ssize_t i, c, j
    cdef double best, s, diff
    cdef long long bl

    with nogil:
        for i in range(n):
            best = 1e300
            bl = 0
            for c in range(k):
                s = 0.0
                for j in range(d):
                    diff = points[i, j] - centroids[c, j]
                    s += diff * diff
                if s < best:  # strict: ties keep the lowest index
                    best = s
                    bl = c
            lv[i] = bl
            dv[i] = best
    return labels, sqdist
