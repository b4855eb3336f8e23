"""Truncation-threshold heuristic.

Pick the smallest ``w0`` such that, with probability ``1 - delta``, no more
than ``k_max`` conversions are expected among impressions whose raw weight
exceeds ``w0``, treating that count as Binomial(N_{>w0}, nominal_cvr).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

_LN_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_LN_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ThresholdParams:
    k_max: int = 5
    delta: float = 0.05
    nominal_cvr: float = 0.01

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise InputError("delta must lie in (0, 1)")
        if self.k_max < 0:
            raise InputError("k_max must be >= 0")
        if not 0 < self.nominal_cvr < 1:
            raise InputError("nominal_cvr must lie in (0, 1)")


def _stirlerr(n: float) -> float:
    # log(n!) - log(sqrt(2 pi n) (n/e)^n), Loader (2000)
    if n <= 15.0:
        return math.lgamma(n + 1.0) - (n + 0.5) * math.log(n) + n - _LN_SQRT_2PI
    nn = n * n
    s0, s1, s2, s3, s4 = 1 / 12, 1 / 360, 1 / 1260, 1 / 1680, 1 / 1188
    if n > 500:
        return (s0 - s1 / nn) / n
    if n > 80:
        return (s0 - (s1 - s2 / nn) / nn) / n
    if n > 35:
        return (s0 - (s1 - (s2 - s3 / nn) / nn) / nn) / n
    return (s0 - (s1 - (s2 - (s3 - s4 / nn) / nn) / nn) / nn) / n


def _bd0(x: float, np_: float) -> float:
    # x log(x/np) + np - x without cancellation
    if abs(x - np_) < 0.1 * (x + np_):
        v = (x - np_) / (x + np_)
        s = (x - np_) * v
        ej = 2.0 * x * v
        v2 = v * v
        j = 1
        while True:
            ej *= v2
            s1 = s + ej / (2 * j + 1)
            if s1 == s:
                return s1
            s = s1
            j += 1
    return x * math.log(x / np_) + np_ - x


def binomial_pmf(k: int, n: int, p: float) -> float:
    """Binomial probability mass via the saddle-point expansion."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"p must lie in [0, 1], got {p}")
    if k < 0 or k > n:
        return 0.0
    q = 1.0 - p
    if p == 0.0:
        return 1.0 if k == 0 else 0.0
    if q == 0.0:
        return 1.0 if k == n else 0.0
    if k == 0:
        if n == 0:
            return 1.0
        lc = -_bd0(n, n * q) - n * p if p < 0.1 else n * math.log(q)
        return math.exp(lc)
    if k == n:
        lc = -_bd0(n, n * p) - n * q if q < 0.1 else n * math.log(p)
        return math.exp(lc)
    lc = (
        _stirlerr(n)
        - _stirlerr(k)
        - _stirlerr(n - k)
        - _bd0(k, n * p)
        - _bd0(n - k, n * q)
    )
    lf = _LN_2PI + math.log(k) + math.log1p(-k / n)
    return math.exp(lc - 0.5 * lf)


def binomial_cdf(k: int, n: int, p: float) -> float:
    """Pr(K <= k) for K ~ Binomial(n, p).

    Sums the lower tail (or the complement of the upper tail, whichever has
    fewer terms) with :func:`math.fsum`.
    """
    if not 0.0 <= p <= 1.0:
        raise InputError(f"p must lie in [0, 1], got {p}")
    if n < 0:
        raise InputError("n must be >= 0")
    if k < 0:
        return 0.0
    if k >= n:
        return 1.0
    if k + 1 <= n - k:
        return min(1.0, math.fsum(binomial_pmf(j, n, p) for j in range(k + 1)))
    upper = math.fsum(binomial_pmf(j, n, p) for j in range(k + 1, n + 1))
    return max(0.0, 1.0 - upper)


def tail_count(sorted_weights: np.ndarray, w0: float) -> int:
    """Number of weights strictly greater than ``w0``."""
    return int(sorted_weights.size - np.searchsorted(sorted_weights, w0, side="right"))


def choose_w0(raw_weights, params: ThresholdParams = ThresholdParams()) -> float:
    """Smallest observed weight whose tail passes the binomial condition.

    Candidates are the distinct observed raw weights. Feasibility is monotone
    (more tail impressions can only lower the CDF), so a bisection over the
    sorted candidates finds the minimum.
    """
    w = np.sort(np.asarray(raw_weights, dtype=float))
    if w.size == 0:
        raise InputError("need at least one weight")
    if not np.all(np.isfinite(w)) or w[0] < 0:
        raise InputError("weights must be finite and non-negative")
    cands = np.unique(w)
    target = 1.0 - params.delta

    def ok(i: int) -> bool:
        n_tail = tail_count(w, cands[i])
        return binomial_cdf(params.k_max, n_tail, params.nominal_cvr) >= target

    lo, hi = 0, cands.size - 1
    if not ok(hi):  # unreachable: the largest weight has an empty tail
        return float(cands[-1])
    while lo < hi:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid + 1
    return float(cands[lo])
