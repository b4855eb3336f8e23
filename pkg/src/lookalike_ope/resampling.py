"""Bootstrap machinery with reproducible, schedule-independent random streams.

Every resample ``b`` of dataset ``o`` draws from its own generator, seeded by
``SeedSequence(seed, spawn_key=(stream, ..., o, b))``. Results therefore do
not depend on the order or the thread in which resamples are evaluated.

A resample is represented by multinomial counts rather than materialized
index arrays. Counts on the converted rows are drawn first (the number of
draws landing on them is Binomial(n, m/n), spread uniformly over the m
rows); counts on the remaining rows are drawn only when the estimator needs a
denominator. The same resample is reused for every threshold of a sweep.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateError, InputError
from .estimators import EstimatorKind, WeightMode, WeightPolicy

log = logging.getLogger(__name__)

STREAM_BOOTSTRAP = 1
STREAM_DATASET = 2
STREAM_UNIVERSE = 3
STREAM_CAMPAIGN = 4
STREAM_LIFT = 5


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream addressed by ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class BootstrapConfig:
    n_bootstrap: int = 100
    n_outer: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_bootstrap < 2:
            raise InputError("n_bootstrap must be >= 2")
        if self.n_outer < 1:
            raise InputError("n_outer must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise InputError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class VarianceReport:
    median_estimate: float
    variance: float
    per_threshold: list[tuple[float, float, float]] = field(default_factory=list)
    n_degenerate: int = 0


class _SortedSample:
    """Weights split by outcome and sorted, with per-threshold positions."""

    def __init__(self, weights, converted, exponent: int):
        w = np.asarray(weights, dtype=float)
        y = np.asarray(converted).astype(bool)
        if w.ndim != 1 or w.size == 0 or y.shape != w.shape:
            raise InputError("need non-empty, equally long weights and outcomes")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InputError("weights must be finite and non-negative")
        self.n = w.size
        self.exponent = exponent
        self.wc = np.sort(w[y])
        self.wn = np.sort(w[~y])
        self.m = self.wc.size

    def positions(self, grid: np.ndarray):
        return (
            np.searchsorted(self.wc, grid, side="right"),
            np.searchsorted(self.wn, grid, side="right"),
        )


def _draw_counts(rng: np.random.Generator, n: int, m: int, need_rest: bool):
    """Multinomial(n, 1/n) bootstrap counts split into converted / other rows."""
    k = int(rng.binomial(n, m / n)) if 0 < m < n else (n if m == n else 0)
    cc = np.bincount(rng.integers(0, m, k), minlength=m) if m else np.zeros(0, np.int64)
    cn = None
    if need_rest:
        rest = n - m
        cn = np.bincount(rng.integers(0, rest, n - k), minlength=rest) if rest else np.zeros(0, np.int64)
    return cc, cn


def resample_counts(seed: int, stream: Sequence[int], b: int, n: int, m: int, need_rest: bool = True):
    """Counts of resample ``b``; exposed so tests can rebuild a resample."""
    return _draw_counts(derive_rng(seed, *stream, b), n, m, need_rest)


def _head_sums(values_sorted: np.ndarray, counts: np.ndarray, pos: np.ndarray):
    """Sum of counts*values and of counts over the first ``pos`` entries."""
    cs_v = np.concatenate([[0.0], np.cumsum(counts * values_sorted)])
    cs_c = np.concatenate([[0], np.cumsum(counts)])
    return cs_v[pos], cs_c[pos], cs_v[-1], cs_c[-1]


def _estimates_for_counts(
    sample: _SortedSample, cc, cn, grid, pos_c, pos_n, mode: WeightMode, kind: EstimatorKind
) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        return _estimates_inner(sample, cc, cn, grid, pos_c, pos_n, mode, kind)


def _estimates_inner(sample, cc, cn, grid, pos_c, pos_n, mode, kind):
    k = sample.exponent
    gk = grid**k
    head_a, head_y, tot_a, tot_y = _head_sums(sample.wc**k, cc, pos_c)
    tail_y = tot_y - head_y
    if mode is WeightMode.TRUNCATE:
        num = head_a + np.where(tail_y > 0, gk * tail_y, 0.0)
    elif mode is WeightMode.DROP:
        num = head_a
    else:
        num = np.full(grid.shape, tot_a)
    if kind is EstimatorKind.HORVITZ_THOMPSON:
        return num / sample.n
    head_b, head_n, tot_b, tot_n = _head_sums(sample.wn**k, cn, pos_n)
    tail_n = tot_n - head_n
    if mode is WeightMode.TRUNCATE:
        den = num + head_b + np.where(tail_n > 0, gk * tail_n, 0.0)
    elif mode is WeightMode.DROP:
        den = num + head_b
    else:
        den = np.full(grid.shape, tot_a + tot_b)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def resample_estimates(
    weights,
    converted,
    policy: WeightPolicy,
    kind: EstimatorKind,
    w0_grid: Sequence[float],
    n_bootstrap: int,
    seed: int,
    stream: Sequence[int] = (STREAM_BOOTSTRAP,),
    threads: int = 1,
) -> np.ndarray:
    """Estimates for every resample (rows) and threshold (columns).

    Degenerate self-normalized resamples (zero total weight) are NaN.
    """
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.NAIVE:
        raise InputError("resample_estimates handles weighted estimators only")
    grid = np.asarray(w0_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise InputError("need a non-empty threshold grid")
    if np.any(np.diff(grid) < 0):
        raise InputError("threshold grid must be sorted ascending")
    sample = _SortedSample(weights, converted, policy.bid_factor_exponent)
    pos_c, pos_n = sample.positions(grid)
    need_rest = kind is EstimatorKind.SELF_NORMALIZED
    stream = tuple(stream)

    def one(b: int) -> np.ndarray:
        cc, cn = _draw_counts(derive_rng(seed, *stream, b), sample.n, sample.m, need_rest)
        return _estimates_for_counts(sample, cc, cn, grid, pos_c, pos_n, policy.mode, kind)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(n_bootstrap)))
    else:
        rows = [one(b) for b in range(n_bootstrap)]
    return np.vstack(rows)


def summarize(estimates: np.ndarray, max_degenerate_fraction: float = 0.5):
    """Column-wise median and unbiased variance, skipping degenerate rows."""
    est = np.atleast_2d(estimates)
    bad = np.isnan(est)
    n_bad = bad.sum(axis=0)
    if np.any(n_bad > max_degenerate_fraction * est.shape[0]):
        raise DegenerateError(
            f"{int(n_bad.max())} of {est.shape[0]} resamples have zero total weight"
        )
    med = np.nanmedian(est, axis=0)
    var = np.nanvar(est, axis=0, ddof=1)
    return med, np.maximum(var, 0.0), n_bad


def bootstrap_estimate(
    weights,
    converted,
    policy: WeightPolicy,
    kind: EstimatorKind = EstimatorKind.SELF_NORMALIZED,
    config: BootstrapConfig = BootstrapConfig(),
    stream: Sequence[int] = (STREAM_BOOTSTRAP, 0),
    threads: int = 1,
) -> VarianceReport:
    """Median and variance of the estimate over ``config.n_bootstrap`` resamples."""
    report = threshold_sweep(
        weights, converted, policy, kind, [policy.threshold], config, stream, threads
    )
    return VarianceReport(report.median_estimate, report.variance, [], report.n_degenerate)


def threshold_sweep(
    weights,
    converted,
    policy: WeightPolicy,
    kind: EstimatorKind,
    w0_grid: Sequence[float],
    config: BootstrapConfig = BootstrapConfig(),
    stream: Sequence[int] = (STREAM_BOOTSTRAP, 0),
    threads: int = 1,
) -> VarianceReport:
    """Bootstrap median/variance at each threshold, sharing resamples across the grid.

    The top-level median and variance refer to the last (largest) threshold.
    """
    est = resample_estimates(
        weights, converted, policy, kind, w0_grid, config.n_bootstrap, config.seed, stream, threads
    )
    med, var, n_bad = summarize(est)
    rows = [(float(g), float(m), float(v)) for g, m, v in zip(w0_grid, med, var)]
    if n_bad.any():
        log.info("skipped %d degenerate resamples", int(n_bad.max()))
    return VarianceReport(float(med[-1]), float(var[-1]), rows, int(n_bad.max()))


def bootstrap_statistic(
    n: int,
    statistic: Callable[[np.ndarray], float],
    n_bootstrap: int,
    seed: int,
    stream: Sequence[int] = (STREAM_BOOTSTRAP, 0),
    threads: int = 1,
) -> np.ndarray:
    """Generic bootstrap: ``statistic(counts)`` for each resample's count vector.

    The statistic may return a scalar or a fixed-length vector; the result
    has one row per resample. Undefined values should be NaN.
    """
    stream = tuple(stream)

    def one(b: int) -> np.ndarray:
        rng = derive_rng(seed, *stream, b)
        counts = np.bincount(rng.integers(0, n, n), minlength=n)
        return np.asarray(statistic(counts), dtype=float)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(one, range(n_bootstrap))))
    return np.array([one(b) for b in range(n_bootstrap)])


def percentile_interval(values: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (math.nan, math.nan)
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(v, [a, 1.0 - a])
    return float(lo), float(hi)
