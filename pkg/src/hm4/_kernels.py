"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``HM4_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("HM4_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

score_buckets = _impl.score_buckets
match_counts = _impl.match_counts
match_count_matrix = _impl.match_count_matrix
polytope_codes = _impl.polytope_codes
unpack_rows = _impl.unpack_rows
