import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lookalike_ope.errors import DegenerateError, InputError
from lookalike_ope.estimators import EstimatorKind, WeightMode, WeightPolicy, cvr_ipw
from lookalike_ope.resampling import (
    BootstrapConfig,
    bootstrap_estimate,
    bootstrap_statistic,
    derive_rng,
    percentile_interval,
    resample_counts,
    resample_estimates,
    summarize,
    threshold_sweep,
)

HT, SN = EstimatorKind.HORVITZ_THOMPSON, EstimatorKind.SELF_NORMALIZED


def heavy_sample(n=3000, seed=1):
    rng = np.random.default_rng(seed)
    w = rng.pareto(1.3, n) + 0.05
    y = rng.random(n) < 0.05 + 0.1 * (w < 1)
    return w, y


def materialize(w, y, cc, cn):
    """Expand count vectors back into an explicit resample (sorted by outcome)."""
    order_c = np.argsort(w[y], kind="stable")
    order_n = np.argsort(w[~y], kind="stable")
    wc, wn = w[y][order_c], w[~y][order_n]
    ww = np.concatenate([np.repeat(wc, cc), np.repeat(wn, cn)])
    yy = np.concatenate([np.ones(cc.sum(), bool), np.zeros(cn.sum(), bool)])
    return ww, yy


@pytest.mark.parametrize("mode", list(WeightMode))
@pytest.mark.parametrize("kind", [HT, SN])
@pytest.mark.parametrize("k", [1, 2])
def test_engine_equals_estimator_on_materialized_resample(mode, kind, k):
    w, y = heavy_sample()
    grid = np.array([0.5, 2.0, 10.0, 80.0])
    est = resample_estimates(w, y, WeightPolicy(mode, 1.0, k), kind, grid, 5, seed=9, stream=(1, 0))
    for b in range(5):
        cc, cn = resample_counts(9, (1, 0), b, w.size, int(y.sum()))
        ww, yy = materialize(w, y, cc, cn)
        for j, g in enumerate(grid):
            ref = cvr_ipw(ww, yy, WeightPolicy(mode, g, k), kind).estimate
            assert est[b, j] == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_counts_sum_to_n():
    for b in range(20):
        cc, cn = resample_counts(3, (1,), b, 1000, 37)
        assert cc.sum() + cn.sum() == 1000 and cc.size == 37 and cn.size == 963


def test_deterministic_and_thread_independent():
    w, y = heavy_sample(20_000)
    grid = np.geomspace(1, 1e3, 12)
    a = resample_estimates(w, y, WeightPolicy(), SN, grid, 40, seed=42, threads=1)
    b = resample_estimates(w, y, WeightPolicy(), SN, grid, 40, seed=42, threads=4)
    assert np.array_equal(a, b, equal_nan=True)
    c = resample_estimates(w, y, WeightPolicy(), SN, grid, 40, seed=43, threads=1)
    assert not np.array_equal(a, c)


def test_derive_rng_streams_independent():
    x = derive_rng(5, 1, 2).random(4)
    assert np.array_equal(x, derive_rng(5, 1, 2).random(4))
    assert not np.array_equal(x, derive_rng(5, 2, 1).random(4))


def test_constant_outcome_has_zero_variance():
    w, _ = heavy_sample()
    rep = bootstrap_estimate(w, np.zeros(w.size, bool), WeightPolicy(WeightMode.TRUNCATE, 5.0), SN)
    assert rep.median_estimate == 0.0 and rep.variance == 0.0


def test_binomial_variance_with_unit_weights():
    rng = np.random.default_rng(4)
    y = rng.random(10_000) < 0.5
    rep = bootstrap_estimate(np.ones(y.size), y, WeightPolicy(), SN, BootstrapConfig(200, 1, 0))
    assert 0.25 / y.size / 3 < rep.variance < 3 * 0.25 / y.size


def test_single_point_sweep_equals_bootstrap_estimate():
    w, y = heavy_sample()
    policy = WeightPolicy(WeightMode.TRUNCATE, 7.0)
    cfg = BootstrapConfig(50, 1, 8)
    one = bootstrap_estimate(w, y, policy, HT, cfg)
    sweep = threshold_sweep(w, y, policy, HT, [7.0], cfg)
    assert (one.median_estimate, one.variance) == (sweep.median_estimate, sweep.variance)


@settings(max_examples=30)
@given(st.integers(0, 2**32), st.lists(st.floats(0.01, 1e4), min_size=2, max_size=10))
def test_ht_truncate_monotone_on_every_fixed_resample(seed, grid):
    w, y = heavy_sample(500, seed % 100)
    grid = np.sort(grid)
    est = resample_estimates(w, y, WeightPolicy(), HT, grid, 10, seed)
    assert np.all(np.diff(est, axis=1) >= -1e-15)


def test_degenerate_resamples_are_skipped_then_fatal():
    w = np.array([0.5] + [50.0] * 99)
    y = np.zeros(100, bool)
    y[0] = True
    drop = WeightPolicy(WeightMode.DROP, 1.0)
    est = resample_estimates(w, y, drop, SN, [1.0], 200, seed=1)
    n_nan = int(np.isnan(est).sum())
    assert 0 < n_nan < 200
    assert summarize(est)[2][0] == n_nan
    with pytest.raises(DegenerateError):
        bootstrap_estimate(np.full(10, 50.0), np.zeros(10, bool), drop, SN)


def test_config_validation():
    with pytest.raises(InputError):
        BootstrapConfig(n_bootstrap=1)
    with pytest.raises(InputError):
        BootstrapConfig(n_outer=0)
    with pytest.raises(InputError):
        resample_estimates([1.0], [True], WeightPolicy(), SN, [3.0, 1.0], 5, 0)


def test_bootstrap_statistic_and_interval():
    x = np.arange(100, dtype=float)
    reps = bootstrap_statistic(100, lambda c: c @ x / c.sum(), 300, seed=0)
    lo, hi = percentile_interval(reps)
    assert lo < 49.5 < hi
    assert np.array_equal(reps, bootstrap_statistic(100, lambda c: c @ x / c.sum(), 300, 0, threads=3))
    assert np.isnan(percentile_interval(np.array([np.nan]))[0])
