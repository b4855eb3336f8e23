"""Simulation laboratory for truncation and finite-sample bias.

A population is indexed by ``x`` in [0, 1]. Logged impressions follow the
on-policy Beta density, the counterfactual policy another Beta density, and
each member converts with probability ``y(x) = y_intercept + y_slope * x``.
The infinite-sample counterfactual rate at any truncation threshold is
obtained by quadrature, which lets the total error of the finite-sample
estimate be split into a truncation part and a finite-sample part.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize, special, stats

from .errors import InputError, QuadratureError
from .estimators import EstimatorKind, WeightMode, WeightPolicy
from .resampling import (
    STREAM_BOOTSTRAP,
    STREAM_DATASET,
    BootstrapConfig,
    VarianceReport,
    derive_rng,
    resample_estimates,
    summarize,
)
from .threshold import ThresholdParams, choose_w0

QUAD_TOL = 1e-8
_X_SPLIT = 1e-6


@dataclass(frozen=True)
class PolicyPair:
    alpha_p: float = 2.5
    beta_p: float = 2.5
    alpha_star: float = 0.5
    beta_star: float = 4.5
    y_intercept: float = 0.001
    y_slope: float = 0.02

    def __post_init__(self):
        for name in ("alpha_p", "beta_p", "alpha_star", "beta_star"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        ends = (self.y_intercept, self.y_intercept + self.y_slope)
        if min(ends) < 0 or max(ends) > 1:
            raise InputError("y(x) must stay inside [0, 1] on [0, 1]")

    def y(self, x):
        return self.y_intercept + self.y_slope * np.asarray(x)

    def log_pdf_p(self, x):
        return stats.beta.logpdf(x, self.alpha_p, self.beta_p)

    def log_pdf_star(self, x):
        return stats.beta.logpdf(x, self.alpha_star, self.beta_star)

    def weight(self, x):
        """Raw importance ratio ``pdf_star(x) / pdf_p(x)``."""
        return np.exp(self.log_pdf_star(x) - self.log_pdf_p(x))

    @property
    def mean_y_on_policy(self) -> float:
        return self.y_intercept + self.y_slope * self.alpha_p / (self.alpha_p + self.beta_p)

    @property
    def mean_y_off_policy(self) -> float:
        return self.y_intercept + self.y_slope * self.alpha_star / (self.alpha_star + self.beta_star)


@dataclass(frozen=True)
class BiasBreakdown:
    w0: float
    cvr_star_truth: float
    cvr_star_truncated_analytic: float
    cvr_star_estimated: float
    bias_all: float
    bias_trunc: float
    bias_fs: float
    variance: float
    total_error: float


def sample_dataset(pair: PolicyPair, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``n`` logged impressions: positions, raw weights and conversions."""
    if n < 1:
        raise InputError("n must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    x = rng.beta(pair.alpha_p, pair.beta_p, n)
    # keep x strictly inside (0, 1) so log-densities stay finite
    x = np.clip(x, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    w = pair.weight(x)
    y = rng.random(n) < pair.y(x)
    return x, w, y


def _weight_crossings(pair: PolicyPair, w0: float) -> list[float]:
    """Points in (0, 1) where the raw weight crosses ``w0``."""
    t = np.linspace(0.0, 1.0, 4001)[1:-1]
    xs = np.concatenate([np.logspace(-12, -3, 200), t])
    xs = np.unique(xs)
    f = np.log(pair.weight(xs)) - math.log(w0)
    out = []
    for i in np.nonzero(np.sign(f[:-1]) != np.sign(f[1:]))[0]:
        a, b = xs[i], xs[i + 1]
        out.append(optimize.brentq(lambda z: math.log(pair.weight(z)) - math.log(w0), a, b, xtol=1e-15))
    return out


def _quad(f, a, b, points=None):
    """Adaptive Gauss-Kronrod on [a, b] after the substitution x = a + (b-a) u^2.

    The substitution removes integrable x^(-1/2)-type endpoint behaviour at
    ``a`` (the x -> 0 side for the default policies).
    """
    width = b - a

    def g(u):
        return f(a + width * u * u) * 2.0 * width * u

    upts = None
    if points:
        upts = sorted({math.sqrt((p - a) / width) for p in points if a < p < b})
    val, err = integrate.quad(g, 0.0, 1.0, points=upts or None, epsabs=QUAD_TOL / 10, epsrel=1e-10, limit=500)
    if not err <= QUAD_TOL:
        raise QuadratureError(f"quadrature error estimate {err:.3g} exceeds {QUAD_TOL:g}")
    return val


def analytic_integrals(pair: PolicyPair, w0: float = math.inf) -> tuple[float, float]:
    """Numerator ``int y min(w,w0) pdf_p`` and denominator ``int min(w,w0) pdf_p``."""
    if not w0 > 0:
        raise InputError("w0 must be positive or infinite")
    la, lb = special.betaln(pair.alpha_p, pair.beta_p), special.betaln(pair.alpha_star, pair.beta_star)

    def pdf_p(x):
        return math.exp((pair.alpha_p - 1) * math.log(x) + (pair.beta_p - 1) * math.log1p(-x) - la)

    def pdf_star(x):
        return math.exp((pair.alpha_star - 1) * math.log(x) + (pair.beta_star - 1) * math.log1p(-x) - lb)

    def trunc_mass(x):
        if x <= 0.0 or x >= 1.0:
            return 0.0
        ps = pdf_star(x)
        if math.isinf(w0):
            return ps
        return min(ps, w0 * pdf_p(x))

    points = [] if math.isinf(w0) else _weight_crossings(pair, w0)
    pts = sorted(set(points + [0.5]))
    num = den = 0.0
    # split near zero and at one half; each piece gets its own endpoint substitution
    for a, b, reflect in ((0.0, _X_SPLIT, False), (_X_SPLIT, 0.5, False), (0.5, 1.0, True)):
        inner = [p for p in pts if a < p < b]
        if reflect:
            fy = lambda x: pair.y(1.0 - x) * trunc_mass(1.0 - x)
            fm = lambda x: trunc_mass(1.0 - x)
            lo, hi, inner = 1.0 - b, 1.0 - a, [1.0 - p for p in inner]
        else:
            fy = lambda x: pair.y(x) * trunc_mass(x)
            fm = trunc_mass
            lo, hi = a, b
        num += _quad(fy, lo, hi, inner)
        den += _quad(fm, lo, hi, inner)
    return float(num), float(den)


def analytic_cvr_star(
    pair: PolicyPair,
    w0: float = math.inf,
    kind: EstimatorKind = EstimatorKind.HORVITZ_THOMPSON,
) -> float:
    """Infinite-sample counterfactual conversion rate with weights truncated at ``w0``."""
    num, den = analytic_integrals(pair, w0)
    if EstimatorKind(kind) is EstimatorKind.SELF_NORMALIZED:
        return num / den
    return num


def bias_decomposition(
    pair: PolicyPair,
    w0: float,
    estimated: VarianceReport,
    kind: EstimatorKind = EstimatorKind.HORVITZ_THOMPSON,
    truth: Optional[float] = None,
    truncated: Optional[float] = None,
) -> BiasBreakdown:
    """Split the error of a bootstrap estimate into truncation and finite-sample bias.

    ``bias_trunc = truth - truncated`` is nonnegative for the HT kind, and
    ``bias_all = -bias_trunc + bias_fs``: the finite-sample part is what
    remains after the (signed) truncation shortfall, i.e. the distance from
    the estimate to the infinite-sample truncated value.
    """
    if truth is None:
        truth = analytic_cvr_star(pair, math.inf, kind)
    if truncated is None:
        truncated = analytic_cvr_star(pair, w0, kind)
    est = estimated.median_estimate
    bias_all = est - truth
    bias_trunc = truth - truncated
    bias_fs = est - truncated
    var = max(estimated.variance, 0.0)
    return BiasBreakdown(
        w0=float(w0),
        cvr_star_truth=truth,
        cvr_star_truncated_analytic=truncated,
        cvr_star_estimated=est,
        bias_all=bias_all,
        bias_trunc=bias_trunc,
        bias_fs=bias_fs,
        variance=var,
        total_error=math.sqrt(bias_all**2 + var),
    )


def default_grid(n_points: int = 40, lo: float = 1.0, hi: float = 1e4) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), n_points)


@dataclass
class SizeResult:
    """Curves for one dataset size; arrays are indexed by grid position."""

    n: int
    grid: np.ndarray
    replicate_medians: np.ndarray  # (n_outer, n_grid)
    replicate_variances: np.ndarray
    heuristic_w0: np.ndarray  # one per replicate
    breakdowns: list[BiasBreakdown] = field(default_factory=list)

    @property
    def median_estimate(self) -> np.ndarray:
        return np.median(self.replicate_medians, axis=0)

    @property
    def variance(self) -> np.ndarray:
        return np.median(self.replicate_variances, axis=0)

    @property
    def total_error(self) -> np.ndarray:
        return np.array([b.total_error for b in self.breakdowns])

    @property
    def heuristic_index(self) -> int:
        """Grid point closest (in log w0) to the median per-replicate heuristic."""
        h = float(np.median(self.heuristic_w0))
        return int(np.argmin(np.abs(np.log(self.grid) - math.log(h))))


@dataclass
class StudyReport:
    pair: PolicyPair
    kind: EstimatorKind
    config: BootstrapConfig
    truth: float
    analytic_truncated: np.ndarray
    sizes: dict[int, SizeResult]


def _replicate(pair, n, o, grid, kind, config, params: ThresholdParams):
    _, w, y = sample_dataset(pair, n, derive_rng(config.seed, STREAM_DATASET, n, o))
    est = resample_estimates(
        w, y, WeightPolicy(WeightMode.TRUNCATE, grid[-1]), kind, grid,
        config.n_bootstrap, config.seed, (STREAM_BOOTSTRAP, n, o),
    )
    med, var, _ = summarize(est)
    naive = float(np.mean(y))
    if 0 < naive < 1:
        p = ThresholdParams(params.k_max, params.delta, naive)
        h = choose_w0(w, p)
    else:
        h = float(np.max(w))
    return med, var, h


def run_study(
    pair: PolicyPair = PolicyPair(),
    sizes: Sequence[int] = (50_000, 500_000),
    w0_grid: Optional[Sequence[float]] = None,
    config: BootstrapConfig = BootstrapConfig(),
    kind: EstimatorKind = EstimatorKind.HORVITZ_THOMPSON,
    params: ThresholdParams = ThresholdParams(),
    threads: int = 1,
) -> StudyReport:
    """Two-level experiment: outer datasets, inner bootstrap, medians of both.

    For each size, ``config.n_outer`` datasets are drawn; each is bootstrapped
    ``config.n_bootstrap`` times across the whole grid with shared resamples.
    The median over datasets of the per-dataset bootstrap medians and
    variances gives the curve that is compared against the quadrature oracle.
    """
    if not sizes:
        raise InputError("need at least one dataset size")
    grid = default_grid() if w0_grid is None else np.asarray(w0_grid, dtype=float)
    kind = EstimatorKind(kind)
    truth = analytic_cvr_star(pair, math.inf, kind)
    trunc = np.array([analytic_cvr_star(pair, g, kind) for g in grid])
    results = {}
    for n in sizes:
        def task(o, n=n):
            return _replicate(pair, n, o, grid, kind, config, params)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                reps = list(pool.map(task, range(config.n_outer)))
        else:
            reps = [task(o) for o in range(config.n_outer)]
        meds = np.vstack([r[0] for r in reps])
        vars_ = np.vstack([r[1] for r in reps])
        res = SizeResult(int(n), grid, meds, vars_, np.array([r[2] for r in reps]))
        agg_med, agg_var = res.median_estimate, res.variance
        res.breakdowns = [
            bias_decomposition(
                pair, g, VarianceReport(float(m), float(v)), kind, truth=truth, truncated=t
            )
            for g, m, v, t in zip(grid, agg_med, agg_var, trunc)
        ]
        results[int(n)] = res
    return StudyReport(pair, kind, config, truth, trunc, results)


CSV_COLUMNS = (
    "w0", "estimate_median", "estimate_var", "analytic_truncated", "ground_truth",
    "bias_all", "bias_trunc", "bias_fs", "total_error", "heuristic_flag",
)


def write_size_csv(result: SizeResult, path) -> None:
    """Plot-ready curve for one dataset size."""
    h = result.heuristic_index
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for i, b in enumerate(result.breakdowns):
            wr.writerow([
                f"{b.w0:.10g}", f"{b.cvr_star_estimated:.10g}", f"{b.variance:.10g}",
                f"{b.cvr_star_truncated_analytic:.10g}", f"{b.cvr_star_truth:.10g}",
                f"{b.bias_all:.10g}", f"{b.bias_trunc:.10g}", f"{b.bias_fs:.10g}",
                f"{b.total_error:.10g}", int(i == h),
            ])
