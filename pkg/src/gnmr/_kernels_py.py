"""Numpy implementations of the kernels in ``_kernels.pyx``.

Used when the compiled extension is unavailable. Results agree with the
compiled versions to floating-point summation order.
"""
import numpy as np


def segment_sum(indptr, indices, x):
    nrows = indptr.shape[0] - 1
    out = np.zeros((nrows, x.shape[1]), dtype=np.float64)
    if indices.shape[0] == 0:
        return out
    rows = np.repeat(np.arange(nrows), np.diff(indptr))
    np.add.at(out, rows, x[indices])
    return out


def scatter_add_rows(index, g, n):
    out = np.zeros((n, g.shape[1]), dtype=np.float64)
    np.add.at(out, index, g)
    return out


def rank_of_positive(scores, ids, pos_col):
    rows = np.arange(scores.shape[0])
    s = scores[rows, pos_col][:, None]
    pid = ids[rows, pos_col][:, None]
    ahead = (scores > s) | ((scores == s) & (ids < pid))
    return 1 + ahead.sum(axis=1).astype(np.int64)
