# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: exact cosine top-k scan and LCS length.

Dot products accumulate in float64 strictly left to right over the
coordinates, matching the pure-Python fallback bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline bint _worse(double s_a, Py_ssize_t i_a, double s_b, Py_ssize_t i_b) nogil:
    # a ranks below b: lower similarity, or equal similarity and later index
    return s_a < s_b or (s_a == s_b and i_a > i_b)


cdef void _sift_down(double* sims, Py_ssize_t* idx, Py_ssize_t size, Py_ssize_t pos) nogil:
    # min-heap on rank order; the root is the worst kept candidate
    cdef Py_ssize_t child, best
    cdef double ts
    cdef Py_ssize_t ti
    while True:
        best = pos
        child = 2 * pos + 1
        if child < size and _worse(sims[child], idx[child], sims[best], idx[best]):
            best = child
        child += 1
        if child < size and _worse(sims[child], idx[child], sims[best], idx[best]):
            best = child
        if best == pos:
            return
        ts = sims[pos]; sims[pos] = sims[best]; sims[best] = ts
        ti = idx[pos]; idx[pos] = idx[best]; idx[best] = ti
        pos = best


cdef void _sift_up(double* sims, Py_ssize_t* idx, Py_ssize_t pos) nogil:
    cdef Py_ssize_t parent
    cdef double ts
    cdef Py_ssize_t ti
    while pos > 0:
        parent = (pos - 1) // 2
        if _worse(sims[pos], idx[pos], sims[parent], idx[parent]):
            ts = sims[pos]; sims[pos] = sims[parent]; sims[parent] = ts
            ti = idx[pos]; idx[pos] = idx[parent]; idx[parent] = ti
            pos = parent
        else:
            return


def row_norms(const float[:, ::1] matrix):
    cdef Py_ssize_t n = matrix.shape[0], d = matrix.shape[1], i, j
    cdef double acc, x
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                x = matrix[i, j]
                acc = acc + x * x
            o[i] = sqrt(acc)
    return out


cdef void _scan(const float[:, ::1] m, const double[::1] norms, const double* q,
                double qnorm, Py_ssize_t k, double* hs, Py_ssize_t* hi,
                Py_ssize_t* size_out) nogil:
    cdef Py_ssize_t n = m.shape[0], d = m.shape[1]
    cdef Py_ssize_t i = 0, j, r, size = 0
    cdef double a0, a1, a2, a3, s, den
    cdef double acc[4]
    while i < n:
        # four rows at a time: independent accumulators, same per-row order
        if i + 4 <= n:
            a0 = 0.0; a1 = 0.0; a2 = 0.0; a3 = 0.0
            for j in range(d):
                a0 = a0 + <double>m[i, j] * q[j]
                a1 = a1 + <double>m[i + 1, j] * q[j]
                a2 = a2 + <double>m[i + 2, j] * q[j]
                a3 = a3 + <double>m[i + 3, j] * q[j]
            acc[0] = a0; acc[1] = a1; acc[2] = a2; acc[3] = a3
            r = 4
        else:
            a0 = 0.0
            for j in range(d):
                a0 = a0 + <double>m[i, j] * q[j]
            acc[0] = a0
            r = 1
        for j in range(r):
            den = norms[i + j] * qnorm
            s = acc[j] / den if den > 0.0 else 0.0
            if size < k:
                hs[size] = s
                hi[size] = i + j
                _sift_up(hs, hi, size)
                size += 1
            elif _worse(hs[0], hi[0], s, i + j):
                hs[0] = s
                hi[0] = i + j
                _sift_down(hs, hi, size, 0)
        i += r
    size_out[0] = size


def _finish(double[::1] hs, Py_ssize_t[::1] hi, Py_ssize_t size):
    sims = np.asarray(hs[:size]).copy()
    idx = np.asarray(hi[:size]).astype(np.int64)
    order = np.lexsort((idx, -sims))
    return idx[order], sims[order]


def cosine_topk(const float[:, ::1] matrix, const double[::1] norms,
                const double[::1] query, double qnorm, Py_ssize_t k):
    cdef Py_ssize_t n = matrix.shape[0]
    cdef Py_ssize_t kk = k if k < n else n
    cdef Py_ssize_t size = 0
    hs_arr = np.empty(max(kk, 1), dtype=np.float64)
    hi_arr = np.empty(max(kk, 1), dtype=np.intp)
    cdef double[::1] hs = hs_arr
    cdef Py_ssize_t[::1] hi = hi_arr
    if kk > 0:
        with nogil:
            _scan(matrix, norms, &query[0], qnorm, kk, &hs[0], &hi[0], &size)
    return _finish(hs, hi, size)


def cosine_topk_batch(const float[:, ::1] matrix, const double[::1] norms,
                      const double[:, ::1] queries, const double[::1] qnorms,
                      Py_ssize_t k):
    cdef Py_ssize_t n = matrix.shape[0], nq = queries.shape[0], t
    cdef Py_ssize_t kk = k if k < n else n
    cdef Py_ssize_t size = 0
    out_idx = np.zeros((nq, kk), dtype=np.int64)
    out_sim = np.zeros((nq, kk), dtype=np.float64)
    hs_arr = np.empty(max(kk, 1), dtype=np.float64)
    hi_arr = np.empty(max(kk, 1), dtype=np.intp)
    cdef double[::1] hs = hs_arr
    cdef Py_ssize_t[::1] hi = hi_arr
    if kk == 0:
        return out_idx, out_sim
    for t in range(nq):
        with nogil:
            _scan(matrix, norms, &queries[t, 0], qnorms[t], kk, &hs[0], &hi[0], &size)
        idx, sims = _finish(hs, hi, size)
        out_idx[t] = idx
        out_sim[t] = sims
    return out_idx, out_sim


def lcs_length(const cnp.int64_t[::1] a, const cnp.int64_t[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    if n == 0 or m == 0:
        return 0
    row_arr = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] row = row_arr
    cdef cnp.int64_t diag, tmp
    with nogil:
        for i in range(n):
            diag = 0
            for j in range(m):
                tmp = row[j + 1]
                if a[i] == b[j]:
                    row[j + 1] = diag + 1
                elif row[j] > row[j + 1]:
                    row[j + 1] = row[j]
                diag = tmp
    return int(row[m])
