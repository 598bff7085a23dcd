"""Greedy MAP hot kernel with backend selection at import.

The compiled Cython kernel is preferred when it was built; otherwise (or when
``PROMPTSEL_PURE_PYTHON`` is set in the environment) the NumPy implementation
in ``greedy_np`` takes over. Both backends implement the same contract and
are compared against each other and against a naive reference in the tests.
"""

from __future__ import annotations

import os

import numpy as np

from . import greedy_np

if os.environ.get("PROMPTSEL_PURE_PYTHON"):
    _impl = greedy_np
    COMPILED = False
else:
    try:
        from . import _greedy_cy as _impl  # type: ignore[no-redef]

        COMPILED = True
    except ImportError:
        _impl = greedy_np
        COMPILED = False

BACKEND = "compiled" if COMPILED else "numpy"


def greedy_map_kernel(Z: np.ndarray, k: int, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy log-det-gain selection of up to ``k`` items from a PSD kernel.

    Returns ``(indices, gains)``; ``gains[m]`` is the log-determinant increase
    of the m-th pick. Selection stops early once every remaining item's
    conditional variance falls at or below ``tol`` (a singular addition).
    Ties break toward the lower index.
    """
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != Z.shape[1]:
        raise ValueError(f"kernel must be square, got shape {Z.shape}")
    return _impl.greedy_map_kernel(Z, int(k), float(tol))


def available_backends() -> dict[str, object]:
    """Backends importable in this process, keyed by name."""
    out: dict[str, object] = {"numpy": greedy_np.greedy_map_kernel}
    try:
        from . import _greedy_cy

        out["compiled"] = _greedy_cy.greedy_map_kernel
    except ImportError:
        pass
    return out
