"""Central finite differences, used as the independent oracle for backward()."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[], Tensor], leaf: Tensor, h: float = 1e-4) -> np.ndarray:
    """d f() / d leaf by central differences; ``f`` must re-read ``leaf.data``."""
    g = np.zeros_like(leaf.data, dtype=np.float64)
    flat = leaf.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
