"""Naive and inverse-propensity-weighted conversion-rate estimators.

Weights come in as raw propensity ratios ``w = P*(x) / P(x)``. A
:class:`WeightPolicy` turns each raw ratio into the weight actually used by
the estimator: threshold first (truncate or drop at ``w0``), then raise to
the bid-factor exponent (1 when the bid ratio is taken as 1, 2 when it is
taken equal to the propensity ratio).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateError, InputError


class WeightMode(str, enum.Enum):
    TRUNCATE = "truncate"
    DROP = "drop"
    NONE = "none"


class EstimatorKind(str, enum.Enum):
    NAIVE = "naive"
    HORVITZ_THOMPSON = "ht"
    SELF_NORMALIZED = "sn"


@dataclass(frozen=True)
class WeightedSample:
    weight: float
    converted: bool

    def __post_init__(self):
        if not math.isfinite(self.weight) or self.weight < 0:
            raise InputError(f"weight must be finite and >= 0, got {self.weight}")


@dataclass(frozen=True)
class WeightPolicy:
    """How raw ratios become estimation weights.

    ``w0`` is ignored when ``mode`` is ``NONE``; ``bid_factor_exponent`` is
    applied after thresholding.
    """

    mode: WeightMode = WeightMode.TRUNCATE
    w0: float = math.inf
    bid_factor_exponent: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", WeightMode(self.mode))
        if self.bid_factor_exponent not in (1, 2):
            raise InputError("bid_factor_exponent must be 1 or 2")
        if self.mode is not WeightMode.NONE and not self.w0 > 0:
            raise InputError(f"w0 must be > 0, got {self.w0}")

    def with_w0(self, w0: float) -> "WeightPolicy":
        return WeightPolicy(self.mode, w0, self.bid_factor_exponent)

    @property
    def threshold(self) -> float:
        """Threshold used for tail counting (infinite when mode is NONE)."""
        return math.inf if self.mode is WeightMode.NONE else float(self.w0)


@dataclass(frozen=True)
class EstimateReport:
    estimate: float
    estimator_kind: EstimatorKind
    n_impressions: int
    n_conversions: int
    n_tail_impressions: int = 0
    n_tail_conversions: int = 0
    variance: Optional[float] = None

    def with_variance(self, variance: float) -> "EstimateReport":
        return EstimateReport(
            self.estimate,
            self.estimator_kind,
            self.n_impressions,
            self.n_conversions,
            self.n_tail_impressions,
            self.n_tail_conversions,
            variance,
        )


def as_arrays(samples: Iterable[WeightedSample]) -> tuple[np.ndarray, np.ndarray]:
    """Split a sequence of :class:`WeightedSample` into weight/outcome arrays."""
    samples = list(samples)
    w = np.fromiter((s.weight for s in samples), dtype=float, count=len(samples))
    y = np.fromiter((s.converted for s in samples), dtype=bool, count=len(samples))
    return w, y


def _check_weights(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InputError("weights must be finite and non-negative")
    return w


def _check_outcomes(y, n: Optional[int] = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.size == 0:
        raise InputError("need a non-empty 1-d outcome array")
    if n is not None and y.size != n:
        raise InputError(f"length mismatch: {n} weights vs {y.size} outcomes")
    if y.dtype != bool:
        if not np.all((y == 0) | (y == 1)):
            raise InputError("outcomes must be 0/1")
        y = y.astype(bool)
    return y


def apply_weight_policy(w, policy: WeightPolicy):
    """Threshold raw ratio(s) ``w`` and raise to the bid-factor exponent.

    Works elementwise on arrays; returns a float for scalar input.
    """
    scalar = np.ndim(w) == 0
    w = _check_weights(np.atleast_1d(w))
    if policy.mode is WeightMode.TRUNCATE:
        v = np.minimum(w, policy.w0)
    elif policy.mode is WeightMode.DROP:
        v = np.where(w <= policy.w0, w, 0.0)
    else:
        v = w.copy()
    if policy.bid_factor_exponent == 2:
        v = v * v
    return float(v[0]) if scalar else v


def cvr_naive(converted) -> EstimateReport:
    """Plain conversion rate: converted impressions over all impressions."""
    y = _check_outcomes(converted)
    k = int(y.sum())
    return EstimateReport(k / y.size, EstimatorKind.NAIVE, int(y.size), k)


def cvr_ipw(
    weights,
    converted,
    policy: WeightPolicy = WeightPolicy(WeightMode.NONE),
    kind: EstimatorKind = EstimatorKind.SELF_NORMALIZED,
) -> EstimateReport:
    """Importance-weighted conversion rate under the counterfactual policy.

    Parameters
    ----------
    weights : array_like
        Raw propensity ratios, one per impression, before any thresholding.
    converted : array_like of bool
        Conversion outcomes.
    policy : WeightPolicy
        Thresholding and bid-factor exponent.
    kind : EstimatorKind
        ``HORVITZ_THOMPSON`` gives ``sum(v*y) / n``; ``SELF_NORMALIZED``
        gives ``sum(v*y) / sum(v)``.

    Returns
    -------
    EstimateReport
        Tail counts are measured on the raw ratios against ``policy.w0``.
    """
    w = _check_weights(np.atleast_1d(weights))
    y = _check_outcomes(converted, w.size)
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.NAIVE:
        return cvr_naive(y)
    v = apply_weight_policy(w, policy)
    num = float(np.sum(v[y]))
    if kind is EstimatorKind.HORVITZ_THOMPSON:
        est = num / y.size
    else:
        den = float(np.sum(v))
        if den <= 0:
            raise DegenerateError("self-normalized estimate with zero total weight")
        est = num / den
    tail = w > policy.threshold
    return EstimateReport(
        est,
        kind,
        int(y.size),
        int(y.sum()),
        int(tail.sum()),
        int((tail & y).sum()),
    )


def cvr_ipw_samples(
    samples: Sequence[WeightedSample],
    policy: WeightPolicy = WeightPolicy(WeightMode.NONE),
    kind: EstimatorKind = EstimatorKind.SELF_NORMALIZED,
) -> EstimateReport:
    if not samples:
        raise InputError("empty sample list")
    w, y = as_arrays(samples)
    return cvr_ipw(w, y, policy, kind)


def lift(report_star: EstimateReport, report_base: EstimateReport) -> float:
    """Ratio of counterfactual to baseline conversion rate (1.7 means +70%)."""
    base = report_base.estimate if report_base is not None else None
    if base is None or not base > 0:
        raise DegenerateError("lift undefined: baseline conversion rate is zero")
    return report_star.estimate / base
