"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def require(condition: bool, message: str):
    """Raise ValueError with ``message`` unless ``condition`` holds."""
    if not condition:
        raise ValueError(message)


def check_finite_vector(x, name: str = "input"):
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_vector(x, size: int, name: str = "input"):
    x = np.asarray(x, dtype=float).ravel()
    require(x.size == size, f"{name} has {x.size} components, expected {size}")
    return x


def check_weights(w, n: int = None, tol: float = 1e-9):
    """Validate a simplex weight vector (nonnegative, sums to 1)."""
    w = np.asarray(w, dtype=float).ravel()
    if n is not None:
        require(w.size == n, f"weights have {w.size} entries, expected {n}")
    require((w >= 0).all(), "weights must be nonnegative")
    require(abs(w.sum() - 1.0) <= tol, f"weights must sum to 1 (got {w.sum()!r})")
    return w


def check_box(box, name: str = "prior box"):
    """Validate a list of (lo, hi) pairs with lo < hi; returns (lo, hi) arrays."""
    arr = np.asarray(box, dtype=float)
    require(arr.ndim == 2 and arr.shape[1] == 2, f"{name} must be a sequence of (lo, hi) pairs")
    lo, hi = arr[:, 0], arr[:, 1]
    require(np.isfinite(arr).all(), f"{name} must be finite")
    require((lo < hi).all(), f"{name} must satisfy lo < hi per component")
    return lo, hi
