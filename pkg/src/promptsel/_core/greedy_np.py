"""NumPy fallback for the greedy MAP kernel.

Incremental-Cholesky greedy selection: after picking item ``j``, every
remaining item's conditional variance ``d2_i`` (its Schur complement against
the selected set) is downdated in O(n) using the running Cholesky rows, so a
full run costs O(k^2 n) instead of O(k^4 n) for naive re-factorization.
"""

from __future__ import annotations

import math

import numpy as np


def greedy_map_kernel(Z: np.ndarray, k: int, tol: float) -> tuple[np.ndarray, np.ndarray]:
    n = Z.shape[0]
    k = min(k, n)
    cis = np.zeros((k, n))
    d2 = np.array(np.diag(Z), dtype=np.float64)
    selected = np.empty(k, dtype=np.int64)
    gains = np.empty(k, dtype=np.float64)
    m = 0
    while m < k:
        j = int(np.argmax(d2))
        best = d2[j]
        if not best > tol:
            break
        selected[m] = j
        gains[m] = math.log(best)
        if m + 1 < k:
            eis = (Z[j, :] - cis[:m, j] @ cis[:m, :]) / math.sqrt(best)
            cis[m, :] = eis
            d2 -= eis * eis
        d2[j] = -np.inf
        m += 1
    return selected[:m].copy(), gains[:m].copy()
