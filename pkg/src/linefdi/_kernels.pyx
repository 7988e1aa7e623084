# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled stepping loops."""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()


def affine_recursion(P, W, x0):
    """Return X with X[0] = x0 and X[k + 1] = P X[k] + W[k]."""
    cdef double[:, ::1] Pm = np.ascontiguousarray(P, dtype=np.float64)
    cdef double[:, ::1] Wm = np.ascontiguousarray(W, dtype=np.float64)
    cdef double[::1] xm = np.ascontiguousarray(x0, dtype=np.float64)
    cdef int n = Pm.shape[0]
    cdef Py_ssize_t K = Wm.shape[0]
    if Pm.shape[1] != n or Wm.shape[1] != n or xm.shape[0] != n:
        raise ValueError("shape mismatch in affine_recursion")
    out = np.empty((K + 1, n), dtype=np.float64)
    cdef double[:, ::1] X = out
    cdef Py_ssize_t k, i
    cdef char trans = b'T'
    cdef int inc = 1
    cdef double one = 1.0
    for i in range(n):
        X[0, i] = xm[i]
    if n == 0:
        return out
    with nogil:
        for k in range(K):
            for i in range(n):
                X[k + 1, i] = Wm[k, i]
            # Row-major P is P^T in column-major storage.
            dgemv(&trans, &n, &n, &one, &Pm[0, 0], &n, &X[k, 0], &inc, &one, &X[k + 1, 0], &inc)
    return out
