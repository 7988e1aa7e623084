"""Pure-Python versions of the compiled loops."""

import numpy as np


def affine_recursion(P, W, x0):
    """Return X with X[0] = x0 and X[k + 1] = P X[k] + W[k]."""
    P = np.asarray(P, dtype=float)
    W = np.asarray(W, dtype=float)
    x = np.array(x0, dtype=float)
    n = P.shape[0]
    if P.shape != (n, n) or W.shape[1:] != (n,) or x.shape != (n,):
        raise ValueError("shape mismatch in affine_recursion")
    out = np.empty((W.shape[0] + 1, n))
    out[0] = x
    for k in range(W.shape[0]):
        x = P @ x + W[k]
        out[k + 1] = x
    return out
