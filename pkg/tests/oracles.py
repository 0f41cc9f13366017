"""Independent reference implementations used only by tests.

These are deliberately written from the definitions, not from the
library code they check.
"""

from __future__ import annotations

import math

import numpy as np


def dgauss_support(sigma2: float) -> np.ndarray:
    """Integer support wide enough that the truncated tail is below 1e-300."""
    radius = int(math.ceil(40.0 * math.sqrt(sigma2) + 10.0))
    return np.arange(-radius, radius + 1)


def dgauss_pmf(sigma2: float) -> tuple[np.ndarray, np.ndarray]:
    """(support, probabilities) of the centered discrete Gaussian."""
    ks = dgauss_support(sigma2)
    w = np.exp(-(ks.astype(float) ** 2) / (2.0 * sigma2))
    return ks, w / w.sum()


def dgauss_variance(sigma2: float) -> float:
    ks, p = dgauss_pmf(sigma2)
    return float((p * ks.astype(float) ** 2).sum())


def decile_bins_oracle(values: dict[str, float], k: int = 10) -> dict[str, int]:
    """Sort-and-slice quantile bins, ties pushed to the lower bin."""
    ids = sorted(values, key=lambda i: (values[i], i))
    n = len(ids)
    first_pos: dict[float, int] = {}
    for pos, i in enumerate(ids):
        first_pos.setdefault(values[i], pos)
    return {i: first_pos[values[i]] * k // n for i in ids}


def brute_force_integer_fit(
    parent: np.ndarray, measurements: list[np.ndarray], weights: list[float]
) -> list[np.ndarray]:
    """Enumerate all child tables summing to parent per cell; return the
    weighted-least-squares minimizer.  Two children only."""
    assert len(measurements) == 2
    C = parent.size
    best, best_obj = None, None
    ranges = [range(int(parent[c]) + 1) for c in range(C)]
    import itertools

    for combo in itertools.product(*ranges):
        x1 = np.array(combo)
        x2 = parent - x1
        obj = 0.0
        for x, m, w in zip((x1, x2), measurements, weights):
            obj += w * float(((x - m) ** 2).sum())
        if best_obj is None or obj < best_obj - 1e-12:
            best, best_obj = (x1, x2), obj
    return list(best)
