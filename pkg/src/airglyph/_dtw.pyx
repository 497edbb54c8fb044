# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dynamic time warping kernels (see ``airglyph.dtw`` for the API)."""

import numpy as np
from libc.math cimport sqrt, INFINITY


cdef double _dtw(const double[:, ::1] a, const double[:, ::1] b, Py_ssize_t band,
                 double* prev, double* cur) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], c = a.shape[1]
    cdef Py_ssize_t i, j, k, lo, hi, w
    cdef double d, diff, best
    if band < 0:
        w = n if n > m else m
    else:
        w = band
        if n - m > w:
            w = n - m
        if m - n > w:
            w = m - n
    for j in range(m + 1):
        prev[j] = INFINITY
    prev[0] = 0.0
    for i in range(1, n + 1):
        for j in range(m + 1):
            cur[j] = INFINITY
        lo = i - w
        if lo < 1:
            lo = 1
        hi = i + w
        if hi > m:
            hi = m
        for j in range(lo, hi + 1):
            d = 0.0
            for k in range(c):
                diff = a[i - 1, k] - b[j - 1, k]
                d = d + diff * diff
            d = sqrt(d)
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = d + best
        for j in range(m + 1):
            prev[j] = cur[j]
    return prev[m]


def dtw_distance(const double[:, ::1] a, const double[:, ::1] b, Py_ssize_t band=-1):
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("DTW needs non-empty sequences")
    if a.shape[1] != b.shape[1]:
        raise ValueError("channel count mismatch")
    cdef double[::1] prev = np.empty(b.shape[0] + 1)
    cdef double[::1] cur = np.empty(b.shape[0] + 1)
    cdef double out
    with nogil:
        out = _dtw(a, b, band, &prev[0], &cur[0])
    return out


def dtw_one_to_many(const double[:, ::1] q, const double[:, :, ::1] refs, Py_ssize_t band=-1):
    cdef Py_ssize_t r, n_refs = refs.shape[0]
    if q.shape[0] == 0 or refs.shape[1] == 0:
        raise ValueError("DTW needs non-empty sequences")
    if q.shape[1] != refs.shape[2]:
        raise ValueError("channel count mismatch")
    out_arr = np.empty(n_refs)
    cdef double[::1] out = out_arr
    cdef double[::1] prev = np.empty(refs.shape[1] + 1)
    cdef double[::1] cur = np.empty(refs.shape[1] + 1)
    with nogil:
        for r in range(n_refs):
            out[r] = _dtw(q, refs[r], band, &prev[0], &cur[0])
    return out_arr
