# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Gaussian Gram/derivative blocks and pivoted Cholesky.

Signatures and outputs mirror ``_core_py`` exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def gaussian_gram(const double[:, ::1] X, const double[:, ::1] Y, double bandwidth):
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], d = X.shape[1]
    cdef Py_ssize_t a, b, i
    cdef double s, diff
    cdef double inv = 1.0 / (2.0 * bandwidth * bandwidth)
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] K = out
    for a in range(n):
        for b in range(m):
            s = 0.0
            for i in range(d):
                diff = X[a, i] - Y[b, i]
                s += diff * diff
            K[a, b] = exp(-s * inv)
    return out


def gaussian_derivs(const double[:, ::1] X, const double[:, ::1] Y, double bandwidth):
    cdef Py_ssize_t n = X.shape[0], m = Y.shape[0], d = X.shape[1]
    cdef Py_ssize_t a, b, i, j
    cdef double s, diff, k
    cdef double ib2 = 1.0 / (bandwidth * bandwidth)
    cdef double inv = 0.5 * ib2
    cdef double[::1] r = np.empty(d, dtype=np.float64)
    K_arr = np.empty((n, m), dtype=np.float64)
    D1_arr = np.empty((n, m, d), dtype=np.float64)
    D2_arr = np.empty((n, m, d, d), dtype=np.float64)
    cdef double[:, ::1] K = K_arr
    cdef double[:, :, ::1] D1 = D1_arr
    cdef double[:, :, :, ::1] D2 = D2_arr
    for a in range(n):
        for b in range(m):
            s = 0.0
            for i in range(d):
                diff = X[a, i] - Y[b, i]
                r[i] = diff
                s += diff * diff
            k = exp(-s * inv)
            K[a, b] = k
            for i in range(d):
                D1[a, b, i] = -r[i] * ib2 * k
                for j in range(d):
                    D2[a, b, i, j] = -r[i] * r[j] * ib2 * ib2 * k
                D2[a, b, i, i] += ib2 * k
    return K_arr, D1_arr, D2_arr


def pivoted_cholesky(const double[:, ::1] S, double tol, Py_ssize_t max_rank):
    cdef Py_ssize_t N = S.shape[0]
    cdef Py_ssize_t k, j, c, l, piv
    cdef double best, trace, pivval, acc
    if max_rank > N:
        max_rank = N
    R_arr = np.zeros((max_rank, N), dtype=np.float64)
    cdef double[:, ::1] R = R_arr
    diag_arr = np.empty(N, dtype=np.float64)
    cdef double[::1] dg = diag_arr
    pivots = np.empty(max_rank, dtype=np.intp)
    for j in range(N):
        dg[j] = S[j, j]
    k = 0
    trace = 0.0
    for j in range(N):
        trace += dg[j]
    while k < max_rank and trace > tol:
        piv = 0
        best = dg[0]
        for j in range(1, N):
            if dg[j] > best:
                best = dg[j]
                piv = j
        if best <= 0.0:
            break
        pivots[k] = piv
        pivval = sqrt(best)
        for c in range(N):
            acc = S[piv, c]
            for l in range(k):
                acc -= R[l, piv] * R[l, c]
            R[k, c] = acc / pivval
        trace = 0.0
        for c in range(N):
            dg[c] -= R[k, c] * R[k, c]
        dg[piv] = 0.0
        for c in range(N):
            if dg[c] > 0.0:
                trace += dg[c]
        k += 1
    return R_arr[:k].copy(), pivots[:k].copy(), max(trace, 0.0)
