import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gnmr import _kernels_py, kernels

compiled = pytest.importorskip("gnmr._kernels", reason="compiled extension not built")


def _csr(rng, n_rows, n_cols, nnz):
    rows = np.sort(rng.integers(0, n_rows, nnz))
    indptr = np.searchsorted(rows, np.arange(n_rows + 1)).astype(np.int64)
    return indptr, rng.integers(0, n_cols, nnz).astype(np.int64)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 30), st.integers(0, 200))
def test_segment_sum_agrees(seed, n_rows, n_cols, nnz):
    rng = np.random.default_rng(seed)
    indptr, indices = _csr(rng, n_rows, n_cols, nnz)
    x = rng.normal(size=(n_cols, 5))
    a = compiled.segment_sum(indptr, indices, x)
    b = _kernels_py.segment_sum(indptr, indices, x)
    assert a.shape == b.shape and np.max(np.abs(a - b), initial=0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(0, 100))
def test_scatter_add_agrees(seed, n, m):
    rng = np.random.default_rng(seed)
    index = rng.integers(0, n, m).astype(np.int64)
    g = rng.normal(size=(m, 3))
    assert np.max(np.abs(compiled.scatter_add_rows(index, g, n) - _kernels_py.scatter_add_rows(index, g, n)),
                  initial=0) < 1e-12


def test_rank_agrees_with_ties():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 5, size=(500, 100)).astype(float)
    ids = np.stack([rng.permutation(1000)[:100] for _ in range(500)])
    col = rng.integers(0, 100, 500)
    assert np.array_equal(compiled.rank_of_positive(scores, ids, col), _kernels_py.rank_of_positive(scores, ids, col))


def test_backend_selection():
    assert kernels.BACKEND == "cython"
    out = subprocess.run([sys.executable, "-c", "from gnmr import kernels; print(kernels.BACKEND)"],
                         env=dict(os.environ, GNMR_PURE_PYTHON="1"), capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
