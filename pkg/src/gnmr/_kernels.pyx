# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for neighbor aggregation and row scatter."""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def segment_sum(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                const double[:, ::1] x):
    """out[r] = sum of x[indices[p]] over p in [indptr[r], indptr[r+1])."""
    cdef Py_ssize_t nrows = indptr.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t r, p, c, j
    out_arr = np.zeros((nrows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for r in range(nrows):
            for p in range(indptr[r], indptr[r + 1]):
                j = indices[p]
                for c in range(d):
                    out[r, c] += x[j, c]
    return out_arr


def scatter_add_rows(const cnp.int64_t[::1] index, const double[:, ::1] g,
                     Py_ssize_t n):
    """out[index[i]] += g[i]; out has n rows."""
    cdef Py_ssize_t m = index.shape[0]
    cdef Py_ssize_t d = g.shape[1]
    cdef Py_ssize_t i, c, r
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(m):
            r = index[i]
            for c in range(d):
                out[r, c] += g[i, c]
    return out_arr


def rank_of_positive(const double[:, ::1] scores, const cnp.int64_t[:, ::1] ids,
                     const cnp.int64_t[::1] pos_col):
    """1-based rank of column pos_col[u] in each row, ties broken by smaller id."""
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t m = scores.shape[1]
    cdef Py_ssize_t u, c, q
    cdef double s
    cdef cnp.int64_t pid
    out_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    with nogil:
        for u in range(n):
            q = pos_col[u]
            s = scores[u, q]
            pid = ids[u, q]
            out[u] = 1
            for c in range(m):
                if scores[u, c] > s or (scores[u, c] == s and ids[u, c] < pid):
                    out[u] += 1
    return out_arr
