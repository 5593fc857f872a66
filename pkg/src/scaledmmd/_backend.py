"""Select the compiled core when available, else the numpy fallback.

Set ``SCALEDMMD_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _core_py

_impl = _core_py
if os.environ.get("SCALEDMMD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _core_py

BACKEND = "compiled" if _impl is not _core_py else "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def gaussian_gram(X, Y, bandwidth, impl=None):
    return (impl or _impl).gaussian_gram(_c(X), _c(Y), float(bandwidth))


def gaussian_derivs(X, Y, bandwidth, impl=None):
    return (impl or _impl).gaussian_derivs(_c(X), _c(Y), float(bandwidth))


def pivoted_cholesky(S, tol, max_rank, impl=None):
    """Greedy pivoted Cholesky: S ~= R.T @ R with R of shape (rank, N).

    Stops once the residual trace drops to ``tol`` or ``max_rank`` rows exist.
    Returns ``(R, pivots, residual_trace)``.
    """
    return (impl or _impl).pivoted_cholesky(_c(S), float(tol), int(max_rank))


def implementations():
    """Both implementations keyed by name (compiled only if it imported)."""
    out = {"python": _core_py}
    if BACKEND == "compiled":
        out["compiled"] = _impl
    return out
