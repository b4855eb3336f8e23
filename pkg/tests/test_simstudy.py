import csv
import math

import numpy as np
import pytest

from lookalike_ope.errors import InputError
from lookalike_ope.estimators import EstimatorKind, WeightMode, WeightPolicy, cvr_ipw
from lookalike_ope.resampling import BootstrapConfig, VarianceReport, bootstrap_estimate
from lookalike_ope.simstudy import (
    CSV_COLUMNS,
    PolicyPair,
    analytic_cvr_star,
    analytic_integrals,
    bias_decomposition,
    default_grid,
    run_study,
    sample_dataset,
    write_size_csv,
)
from lookalike_ope.threshold import ThresholdParams, choose_w0

HT, SN = EstimatorKind.HORVITZ_THOMPSON, EstimatorKind.SELF_NORMALIZED
PAIR = PolicyPair()


def test_pair_validation():
    with pytest.raises(InputError):
        PolicyPair(alpha_p=0.0)
    with pytest.raises(InputError):
        PolicyPair(y_intercept=0.5, y_slope=0.6)


def test_weight_diverges_near_zero():
    assert PAIR.weight(1e-8) > 1e6 * PAIR.weight(0.1)


def test_identical_pair_has_unit_weights():
    same = PolicyPair(2.5, 2.5, 2.5, 2.5)
    _, w, _ = sample_dataset(same, 1000, 1)
    assert np.allclose(w, 1.0, rtol=1e-12)


@pytest.mark.xfail(
    reason="weight tail index is 1.25: the sample mean has infinite variance and lands "
    "within 1% of 1 in only ~5% of 1e6-sample draws",
    strict=False,
)
def test_mean_weight_within_one_percent_of_one():
    _, w, _ = sample_dataset(PAIR, 1_000_000, np.random.default_rng(2))
    assert abs(np.mean(w) - 1) < 0.01


def test_mean_truncated_weight_matches_oracle():
    _, w, _ = sample_dataset(PAIR, 1_000_000, np.random.default_rng(2))
    for w0 in (10.0, 100.0):
        _, den = analytic_integrals(PAIR, w0)
        assert np.mean(np.minimum(w, w0)) == pytest.approx(den, rel=0.01)


def test_conversion_count_binomial_band():
    n = 50_000
    _, _, y = sample_dataset(PAIR, n, np.random.default_rng(3))
    p = PAIR.mean_y_on_policy
    assert abs(y.sum() - n * p) < 3 * math.sqrt(n * p * (1 - p))


def test_untruncated_oracle_closed_form():
    for kind in (HT, SN):
        assert analytic_cvr_star(PAIR, math.inf, kind) == pytest.approx(0.003, abs=1e-12)
    _, den = analytic_integrals(PAIR, math.inf)
    assert abs(den - 1) < 1e-6


def test_constant_outcome_and_identical_policies():
    flat = PolicyPair(y_intercept=0.01, y_slope=0.0)
    same = PolicyPair(2.5, 2.5, 2.5, 2.5)
    for w0 in (1.0, 3.0, 50.0):
        assert analytic_cvr_star(flat, w0, SN) == pytest.approx(0.01, rel=1e-8)
        assert analytic_cvr_star(same, w0, HT) == pytest.approx(0.011, rel=1e-8)


def test_truncation_bias_nonnegative_and_nonincreasing():
    truth = analytic_cvr_star(PAIR)
    grid = default_grid(12)
    bias = [truth - analytic_cvr_star(PAIR, g, HT) for g in grid]
    assert all(b >= 0 for b in bias)
    assert all(b1 <= b0 + 1e-12 for b0, b1 in zip(bias, bias[1:]))


def test_truncated_oracle_matches_monte_carlo():
    # HT truncated integral equals E_P[y min(w, w0)]
    x = np.random.default_rng(8).beta(2.5, 2.5, 2_000_000)
    for w0 in (3.0, 30.0):
        mc = np.mean(PAIR.y(x) * np.minimum(PAIR.weight(x), w0))
        assert mc == pytest.approx(analytic_cvr_star(PAIR, w0, HT), rel=0.01)


def test_bias_decomposition_identities():
    rep = VarianceReport(0.0027, 1e-8)
    b = bias_decomposition(PAIR, math.inf, rep)
    assert b.bias_trunc == 0 and b.bias_all == b.bias_fs
    w0 = 20.0
    trunc = analytic_cvr_star(PAIR, w0, HT)
    b = bias_decomposition(PAIR, w0, VarianceReport(trunc, 0.0))
    assert b.bias_fs == 0.0 and b.bias_all == pytest.approx(-b.bias_trunc, abs=1e-18)
    b = bias_decomposition(PAIR, w0, rep)
    assert b.bias_all == pytest.approx(-b.bias_trunc + b.bias_fs, abs=1e-18)
    assert b.total_error == pytest.approx(math.sqrt(b.bias_all**2 + 1e-8))


def test_sn_estimate_at_heuristic_w0_near_oracle():
    _, w, y = sample_dataset(PAIR, 500_000, np.random.default_rng(21))
    w0 = choose_w0(w, ThresholdParams(nominal_cvr=float(np.mean(y))))
    policy = WeightPolicy(WeightMode.TRUNCATE, w0)
    est = cvr_ipw(w, y, policy, SN).estimate
    sd = math.sqrt(bootstrap_estimate(w, y, policy, SN, BootstrapConfig(100, 1, 5)).variance)
    assert abs(est - analytic_cvr_star(PAIR, w0, SN)) < 3 * sd


def test_identity_pair_study_is_unbiased(tmp_path):
    same = PolicyPair(2.5, 2.5, 2.5, 2.5)
    rep = run_study(same, (20_000,), default_grid(5, 1, 100), BootstrapConfig(20, 6, 1), HT)
    res = rep.sizes[20_000]
    for b in res.breakdowns:
        assert b.bias_trunc == pytest.approx(0.0, abs=1e-9)
        assert abs(b.bias_all) < 3 * math.sqrt(b.variance)
    path = tmp_path / "curve.csv"
    write_size_csv(res, path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 6
    assert sum(int(r[-1]) for r in rows[1:]) == 1


def test_study_is_thread_independent():
    cfg = BootstrapConfig(10, 4, 3)
    grid = default_grid(6)
    a = run_study(PAIR, (5000,), grid, cfg, threads=1).sizes[5000]
    b = run_study(PAIR, (5000,), grid, cfg, threads=3).sizes[5000]
    assert np.array_equal(a.replicate_medians, b.replicate_medians)
    assert np.array_equal(a.heuristic_w0, b.heuristic_w0)
