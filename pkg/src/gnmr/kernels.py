"""Hot-loop kernels, compiled when available.

The Cython extension is preferred; the numpy fallback is selected when the
extension was not built or when ``GNMR_PURE_PYTHON=1`` is set.
"""
import os

from . import _kernels_py

if os.environ.get("GNMR_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on build
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "numpy"

segment_sum = _impl.segment_sum
scatter_add_rows = _impl.scatter_add_rows
rank_of_positive = _impl.rank_of_positive

__all__ = ["BACKEND", "segment_sum", "scatter_add_rows", "rank_of_positive"]
