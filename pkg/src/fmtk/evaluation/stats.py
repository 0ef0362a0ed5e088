"""Wilcoxon signed-rank test and percentile bootstrap."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 12
TAILS = ("two", "greater", "less")


@dataclass(frozen=True)
class StatTestResult:
    test: str
    statistic: float
    p_value: float
    tail: str
    n: int
    method: str = "exact"

    def to_json(self) -> dict:
        return asdict(self)


class InsufficientPairs(ValueError):
    pass


def _sign_patterns(n: int) -> np.ndarray:
    # All 2**n sign assignments as a (2**n, n) 0/1 matrix.
    codes = np.arange(2**n, dtype=np.int64)[:, None]
    return (codes >> np.arange(n)) & 1


def wilcoxon_signed_rank(a, b, tail: str = "two") -> StatTestResult:
    """Paired signed-rank test of ``a`` vs ``b``.

    Zero differences are dropped and tied |d| get average ranks. The reported
    statistic is ``min(W+, W-)``. ``tail="greater"`` (alias ``"one"``) tests
    the alternative that ``a`` tends to exceed ``b``. For n <= 12 the p-value
    is exact, from every sign assignment of the observed ranks; above that a
    normal approximation with continuity and tie correction is used.
    """
    if tail == "one":
        tail = "greater"
    if tail not in TAILS:
        raise ValueError(f"tail must be one of {TAILS + ('one',)}")
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n < 5:
        raise InsufficientPairs(f"insufficient pairs: {n} non-zero differences (need >= 5)")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = n * (n + 1) / 2.0
    w_minus = total - w_plus
    stat = min(w_plus, w_minus)

    if n <= EXACT_MAX_N:
        dist = _sign_patterns(n) @ ranks
        eps = 1e-9
        p_ge = float(np.mean(dist >= w_plus - eps))
        p_le = float(np.mean(dist <= w_plus + eps))
        method = "exact"
    else:
        mean = total / 2.0
        _, counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts**3 - counts)) / 48.0
        sd = math.sqrt(var)
        p_ge = float(norm.sf((w_plus - mean - 0.5) / sd))
        p_le = float(norm.cdf((w_plus - mean + 0.5) / sd))
        method = "normal"
    if tail == "greater":
        p = p_ge
    elif tail == "less":
        p = p_le
    else:
        p = min(1.0, 2.0 * min(p_ge, p_le))
    return StatTestResult("wilcoxon_signed_rank", stat, min(max(p, 0.0), 1.0), tail, n, method)


def bootstrap_indices(n: int, n_boot: int, seed: int) -> np.ndarray:
    """(n_boot, n) resampling indices; share them to pair statistics across models."""
    rng = np.random.default_rng([seed, 606])
    return rng.integers(0, n, size=(n_boot, n))


def bootstrap_ci(values, statistic=np.mean, n_boot: int = 1000, alpha: float = 0.05, seed: int = 0,
                 indices: np.ndarray | None = None):
    """Percentile bootstrap interval; returns ``(low, high, point)``.

    ``values`` may be a 1-D array or a tuple of equal-length arrays passed
    together to ``statistic`` (e.g. truth and predictions).
    """
    if n_boot < 100:
        raise ValueError("n_boot must be >= 100")
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    arrays = tuple(np.asarray(v) for v in values) if isinstance(values, tuple) else (np.asarray(values),)
    n = len(arrays[0])
    if n == 0:
        raise ValueError("bootstrap of an empty sample")
    if indices is None:
        indices = bootstrap_indices(n, n_boot, seed)
    reps = np.array([statistic(*(arr[idx] for arr in arrays)) for idx in indices], dtype=np.float64)
    point = float(statistic(*arrays))
    lo, hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi), point
