# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: attention, per-region mass, segment cosine, bottom-k.

Signatures mirror ``_kernels_py``. All accumulation is in double precision.
"""

import numpy as np

from libc.math cimport exp, sqrt, INFINITY


cdef void _row_weights(
    const double[:, ::1] q,
    const double[:, ::1] k,
    const double[::1] bias,
    Py_ssize_t i,
    double scale,
    double[::1] row,
) noexcept nogil:
    cdef Py_ssize_t lk = k.shape[0], d = q.shape[1], j = 0, c
    cdef double s, s1, s2, s3, qc, m = -INFINITY, total = 0.0
    # Four keys per pass: independent accumulators, same per-key summation order.
    while j + 4 <= lk:
        s = s1 = s2 = s3 = 0.0
        for c in range(d):
            qc = q[i, c]
            s += qc * k[j, c]
            s1 += qc * k[j + 1, c]
            s2 += qc * k[j + 2, c]
            s3 += qc * k[j + 3, c]
        row[j] = s * scale + bias[j]
        row[j + 1] = s1 * scale + bias[j + 1]
        row[j + 2] = s2 * scale + bias[j + 2]
        row[j + 3] = s3 * scale + bias[j + 3]
        j += 4
    while j < lk:
        s = 0.0
        for c in range(d):
            s += q[i, c] * k[j, c]
        row[j] = s * scale + bias[j]
        j += 1
    for j in range(lk):
        if row[j] > m:
            m = row[j]
    for j in range(lk):
        row[j] = exp(row[j] - m)
        total += row[j]
    for j in range(lk):
        row[j] /= total


def attend(const double[:, ::1] q, const double[:, ::1] k, const double[:, ::1] v, const double[::1] bias):
    cdef Py_ssize_t lq = q.shape[0], lk = k.shape[0], dv = v.shape[1], i, j, c
    cdef double scale = 1.0 / sqrt(<double>q.shape[1])
    cdef double w
    cdef double* o
    cdef const double* vj
    out_arr = np.zeros((lq, dv), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] row = np.empty(lk, dtype=np.float64)
    with nogil:
        for i in range(lq):
            _row_weights(q, k, bias, i, scale, row)
            o = &out[i, 0]
            for j in range(lk):
                w = row[j]
                if w == 0.0:
                    continue
                vj = &v[j, 0]
                for c in range(dv):
                    o[c] += w * vj[c]
    return out_arr


def attention_weights(const double[:, ::1] q, const double[:, ::1] k, const double[::1] bias):
    cdef Py_ssize_t lq = q.shape[0], lk = k.shape[0], i
    cdef double scale = 1.0 / sqrt(<double>q.shape[1])
    out_arr = np.empty((lq, lk), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(lq):
            _row_weights(q, k, bias, i, scale, out[i])
    return out_arr


def region_mass(
    const double[:, ::1] q,
    const double[:, ::1] k,
    const double[::1] bias,
    const long long[::1] labels,
    Py_ssize_t n_regions,
):
    cdef Py_ssize_t lq = q.shape[0], lk = k.shape[0], i, j
    cdef double scale = 1.0 / sqrt(<double>q.shape[1])
    mass_arr = np.zeros(n_regions, dtype=np.float64)
    cdef double[::1] mass = mass_arr
    cdef double[::1] row = np.empty(lk, dtype=np.float64)
    with nogil:
        for i in range(lq):
            _row_weights(q, k, bias, i, scale, row)
            for j in range(lk):
                mass[labels[j]] += row[j]
    return mass_arr


def segment_cosine(const double[:, ::1] prev, const double[:, ::1] new, const long long[::1] bounds):
    cdef Py_ssize_t n = bounds.shape[0] - 1, d = prev.shape[1], j, t, c
    cdef double dot, na, nb, denom, val
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for j in range(n):
            dot = 0.0
            na = 0.0
            nb = 0.0
            for t in range(bounds[j], bounds[j + 1]):
                for c in range(d):
                    dot += prev[t, c] * new[t, c]
                    na += prev[t, c] * prev[t, c]
                    nb += new[t, c] * new[t, c]
            denom = sqrt(na) * sqrt(nb)
            if denom > 0.0:
                val = dot / denom
                if val > 1.0:
                    val = 1.0
                elif val < -1.0:
                    val = -1.0
                out[j] = val
    return out_arr


def bottomk(const double[::1] sims, Py_ssize_t k):
    """Indices of the k lowest similarities, ties to the lower index, sorted."""
    cdef Py_ssize_t n = sims.shape[0], i, j, pos
    cdef long long tmp
    order_arr = np.arange(n, dtype=np.int64)
    cdef long long[::1] order = order_arr
    # Stable insertion sort on (similarity, index); n is a handful of segments.
    for i in range(1, n):
        tmp = order[i]
        pos = i
        while pos > 0 and sims[order[pos - 1]] > sims[tmp]:
            order[pos] = order[pos - 1]
            pos -= 1
        order[pos] = tmp
    if k > n:
        k = n
    return np.sort(order_arr[:k])
