"""Independent reference computations used by several test files."""

import numpy as np


def popcount_histogram(k: int) -> np.ndarray:
    """Number of k-bit outcomes with j ones, j = 0..k, by exhaustive enumeration."""
    x = np.arange(2**k, dtype=np.uint32)
    ones = np.zeros(x.shape, dtype=np.int64)
    for b in range(k):
        ones += (x >> b) & 1
    return np.bincount(ones, minlength=k + 1)


def brute_force_threshold(k: int, fpr: float):
    """Minimal tau with (#outcomes having >= tau matches) / 2^k <= fpr, or None."""
    hist = popcount_histogram(k)
    tail = np.cumsum(hist[::-1])[::-1]  # tail[j] = #outcomes with >= j matches
    ok = [j for j in range(k + 1) if tail[j] <= fpr * 2**k]
    return min(ok) if ok else None
