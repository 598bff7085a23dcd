# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled greedy MAP kernel; see greedy_np for the reference semantics."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, log, sqrt

cnp.import_array()


def greedy_map_kernel(object Z_in, Py_ssize_t k, double tol):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] Z = np.ascontiguousarray(
        Z_in, dtype=np.float64
    )
    cdef Py_ssize_t n = Z.shape[0]
    if k > n:
        k = n
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] cis = np.zeros((k if k > 0 else 1, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d2 = np.diag(Z).astype(np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] selected = np.empty(k if k > 0 else 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gains = np.empty(k if k > 0 else 1, dtype=np.float64)

    cdef double[:, ::1] zv = Z
    cdef double[:, ::1] cv = cis
    cdef double[::1] dv = d2
    cdef double best, acc, root
    cdef Py_ssize_t m = 0, i, j, t

    while m < k:
        j = 0
        best = dv[0]
        for i in range(1, n):
            if dv[i] > best:
                best = dv[i]
                j = i
        if not best > tol:
            break
        selected[m] = j
        gains[m] = log(best)
        if m + 1 < k:
            root = sqrt(best)
            for i in range(n):
                acc = zv[j, i]
                for t in range(m):
                    acc -= cv[t, j] * cv[t, i]
                acc /= root
                cv[m, i] = acc
                dv[i] -= acc * acc
        dv[j] = -INFINITY
        m += 1
    return selected[:m].copy(), gains[:m].copy()
