"""Dense float64 arrays used throughout the package.

Tensors are plain ``numpy.ndarray`` objects with dtype float64, validated on
construction and frozen (``writeable=False``) so they can be shared freely.
"""

from __future__ import annotations

import math

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class UnsupportedNormError(ValueError):
    """Norm order outside {2, inf}."""


def as_tensor(data, *, copy: bool = True) -> np.ndarray:
    """Convert ``data`` into a read-only float64 array, rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float64, copy=copy)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor entries must be finite")
    arr.setflags(write=False)
    return arr


def norm_order(p) -> float:
    """Normalize the accepted spellings of a perturbation norm to 2.0 or inf."""
    if isinstance(p, str):
        key = p.strip().lower()
        if key in ("l2", "2"):
            return 2.0
        if key in ("linf", "inf", "l_inf", "infinity"):
            return math.inf
        raise UnsupportedNormError(f"unsupported norm {p!r}; expected l2 or linf")
    if p == 2:
        return 2.0
    if p == math.inf:
        return math.inf
    raise UnsupportedNormError(f"unsupported norm order {p!r}; expected 2 or inf")


def matvec(W, v) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if W.ndim != 2 or v.ndim != 1 or W.shape[1] != v.shape[0]:
        raise DimensionError(f"cannot multiply {W.shape} by {v.shape}")
    return W @ v


def dual_norm(v, p) -> float:
    """Dual of the ``p`` norm: l1 for p=inf, l2 for p=2."""
    q = norm_order(p)
    v = np.asarray(v, dtype=np.float64)
    if q == math.inf:
        return float(np.sum(np.abs(v)))
    return float(np.sqrt(np.sum(v * v)))
