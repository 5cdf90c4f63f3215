"""Reference numpy implementation of the hot kernels.

Mirrors ``_ckernels.pyx`` function for function; used when the compiled
extension is missing or ``TGSAGE_PURE_PYTHON`` is set.
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def correlation_rdm(x: np.ndarray) -> np.ndarray:
    """``1 - pearson(row_i, row_j)`` for all row pairs of a 2-D float64 array.

    Rows must have nonzero variance; callers check that first.
    """
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=1, keepdims=True)
    gram = centered @ centered.T
    diag = np.diag(gram).copy()
    # sqrt(g_ii * g_jj) keeps r_ij == 1 exactly for identical rows
    r = gram / np.sqrt(np.outer(diag, diag))
    np.clip(r, -1.0, 1.0, out=r)
    m = 1.0 - r
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 0.0)
    return m


def upper_pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson r between the strict upper triangles of two square matrices.

    Returns ``nan`` when either triangle is constant.
    """
    iu = np.triu_indices(a.shape[0], k=1)
    x = np.asarray(a, dtype=np.float64)[iu]
    y = np.asarray(b, dtype=np.float64)[iu]
    cx = x - x.mean()
    cy = y - y.mean()
    sxx = float(cx @ cx)
    syy = float(cy @ cy)
    if sxx == 0.0 or syy == 0.0:
        return float("nan")
    r = float(cx @ cy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def weighted_choice_counts(codes: np.ndarray, weights: np.ndarray, n_choices: int) -> np.ndarray:
    """Sum ``weights`` per choice code; negative codes (inactive) are skipped."""
    codes = np.asarray(codes, dtype=np.int64)
    keep = codes >= 0
    return np.bincount(codes[keep], weights=np.asarray(weights, dtype=np.float64)[keep], minlength=n_choices)[
        :n_choices
    ].astype(np.float64)


def draw_log_ratio(codes: np.ndarray, log_ratio: np.ndarray) -> np.ndarray:
    """Per-draw sum of ``log_ratio[d, codes[i, d]]`` over active dimensions.

    ``codes`` is ``(n_draws, n_dims)`` with ``-1`` marking inactive entries;
    ``log_ratio`` is ``(n_dims, max_choices)``.
    """
    codes = np.asarray(codes, dtype=np.int64)
    n_draws, n_dims = codes.shape
    out = np.zeros(n_draws)
    for d in range(n_dims):
        col = codes[:, d]
        active = col >= 0
        out[active] += log_ratio[d, col[active]]
    return out
