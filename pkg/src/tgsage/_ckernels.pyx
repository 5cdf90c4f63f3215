# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""

from libc.math cimport sqrt

import numpy as np

NAME = "cython"


def correlation_rdm(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double s, r
    centered_arr = np.empty((n, m), dtype=np.float64)
    out_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] c = centered_arr
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        s = 0.0
        for k in range(m):
            s += x[i, k]
        s = s / m
        for k in range(m):
            c[i, k] = x[i, k] - s
    # the Gram product goes to BLAS; a hand loop is an order of magnitude slower
    gram_arr = np.dot(centered_arr, centered_arr.T)
    cdef double[:, ::1] g = gram_arr
    for i in range(n):
        for j in range(i + 1, n):
            r = g[i, j] / sqrt(g[i, i] * g[j, j])
            if r > 1.0:
                r = 1.0
            elif r < -1.0:
                r = -1.0
            out[i, j] = 1.0 - r
            out[j, i] = 1.0 - r
    return out_arr


def upper_pearson(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j
    cdef double cnt = n * (n - 1) / 2.0
    cdef double mx = 0.0, my = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0, dx, dy, r
    for i in range(n):
        for j in range(i + 1, n):
            mx += a[i, j]
            my += b[i, j]
    mx /= cnt
    my /= cnt
    for i in range(n):
        for j in range(i + 1, n):
            dx = a[i, j] - mx
            dy = b[i, j] - my
            sxx += dx * dx
            syy += dy * dy
            sxy += dx * dy
    if sxx == 0.0 or syy == 0.0:
        return float("nan")
    r = sxy / sqrt(sxx * syy)
    if r > 1.0:
        r = 1.0
    elif r < -1.0:
        r = -1.0
    return r


def weighted_choice_counts(const long long[::1] codes, const double[::1] weights, Py_ssize_t n_choices):
    out_arr = np.zeros(n_choices, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, c
    for i in range(codes.shape[0]):
        c = codes[i]
        if 0 <= c < n_choices:
            out[c] += weights[i]
    return out_arr


def draw_log_ratio(const long long[:, ::1] codes, const double[:, ::1] log_ratio):
    cdef Py_ssize_t n_draws = codes.shape[0], n_dims = codes.shape[1]
    cdef Py_ssize_t i, d
    cdef long long c
    cdef double s
    out_arr = np.zeros(n_draws, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(n_draws):
        s = 0.0
        for d in range(n_dims):
            c = codes[i, d]
            if c >= 0:
                s += log_ratio[d, c]
        out[i] = s
    return out_arr
