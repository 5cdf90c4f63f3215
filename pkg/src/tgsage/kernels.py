"""Backend selection for the numeric kernels.

The compiled extension is used when it imports; set ``TGSAGE_PURE_PYTHON=1``
to force the numpy fallback.  Both expose the same functions and are
checked against each other in the test suite.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

if os.environ.get("TGSAGE_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND: str = _impl.NAME


def available_backends() -> dict:
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


def correlation_rdm(x) -> np.ndarray:
    return _impl.correlation_rdm(np.ascontiguousarray(x, dtype=np.float64))


def upper_pearson(a, b) -> float:
    return float(
        _impl.upper_pearson(np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64))
    )


def weighted_choice_counts(codes, weights, n_choices: int) -> np.ndarray:
    return _impl.weighted_choice_counts(
        np.ascontiguousarray(codes, dtype=np.int64), np.ascontiguousarray(weights, dtype=np.float64), int(n_choices)
    )


def draw_log_ratio(codes, log_ratio) -> np.ndarray:
    return _impl.draw_log_ratio(
        np.ascontiguousarray(codes, dtype=np.int64), np.ascontiguousarray(log_ratio, dtype=np.float64)
    )
