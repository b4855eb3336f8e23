"""Campaign lift reports: naive and importance-corrected CVR lift with bootstrap intervals."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datagen import qcut_filter_table
from .errors import DegenerateLabelError, InputError
from .estimators import WeightMode, WeightPolicy, apply_weight_policy
from .propensity import PropensityModel, fit_logistic, ratios_for_table, transfer_model
from .records import ImpressionTable
from .resampling import STREAM_LIFT, bootstrap_statistic, percentile_interval
from .threshold import ThresholdParams, choose_w0

log = logging.getLogger(__name__)

AVERAGE_ID = "ALL"


@dataclass(frozen=True)
class LiftConfig:
    k_max: int = 5
    delta: float = 0.05
    mode: WeightMode = WeightMode.TRUNCATE
    n_bootstrap: int = 100
    level: float = 0.95
    regularization: float = 1e-6
    q_cuts: tuple[float, ...] = (0.0, 0.3, 0.6, 0.9)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_bootstrap < 2:
            raise InputError("n_bootstrap must be >= 2")
        if not 0 < self.level < 1:
            raise InputError("level must lie in (0, 1)")
        for q in self.q_cuts:
            if not 0 <= q < 1:
                raise InputError("q_cut values must lie in [0, 1)")


@dataclass(frozen=True)
class CampaignModels:
    base: PropensityModel
    star: PropensityModel


@dataclass
class LiftRow:
    campaign_id: str
    q_cut: float  # NaN for the unfiltered campaign
    n_impressions: int
    n_conversions: int
    w0: float
    cvr_naive: float
    naive_lift: float
    naive_lo: float
    naive_hi: float
    lift_wt: float
    lift_wt_lo: float
    lift_wt_hi: float
    lift_wt2: float
    lift_wt2_lo: float
    lift_wt2_hi: float
    defined: bool = True

    @property
    def subset(self) -> str:
        return "all" if math.isnan(self.q_cut) else f"qcut={self.q_cut:g}"


LIFT_COLUMNS = [
    "campaign_id", "subset", "q_cut", "n_impressions", "n_conversions", "w0", "cvr_naive",
    "naive_lift", "naive_lo", "naive_hi", "lift_wt", "lift_wt_lo", "lift_wt_hi",
    "lift_wt2", "lift_wt2_lo", "lift_wt2_hi", "defined",
]


@dataclass
class LiftReport:
    rows: list[LiftRow]
    models: dict[str, CampaignModels] = field(default_factory=dict)

    def row(self, campaign_id: str, q_cut: Optional[float] = None) -> LiftRow:
        for r in self.rows:
            same_cut = math.isnan(r.q_cut) if q_cut is None else r.q_cut == q_cut
            if r.campaign_id == campaign_id and same_cut:
                return r
        raise KeyError((campaign_id, q_cut))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(LIFT_COLUMNS)
            for r in self.rows:
                d = asdict(r)
                d["subset"] = r.subset
                out.writerow([_fmt(d[c]) for c in LIFT_COLUMNS])

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(r).items()}
            d["subset"] = r.subset
            rows.append(d)
        models = {k: {"base": m.base.to_dict(), "star": m.star.to_dict()} for k, m in self.models.items()}
        return {"rows": rows, "models": models}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10g}"
    return str(v)


def fit_models(table: ImpressionTable, regularization: float = 1e-6) -> CampaignModels:
    """Fit the identity-ignorant whitelist model and derive the identity-powered one."""
    base = fit_logistic(table.score_ignorant, table.covariates, table.whitelisted, regularization)
    if not base.converged:
        log.warning("propensity fit did not converge after %d iterations", base.n_iterations)
    star = transfer_model(base, table.score_identity, table.covariates, score_base=table.score_ignorant)
    return CampaignModels(base, star)


def _top_fraction(score: np.ndarray, frac: float) -> np.ndarray:
    k = int(round(frac * score.size))
    mask = np.zeros(score.size, dtype=bool)
    if k > 0:
        mask[np.argsort(-score, kind="stable")[:k]] = True
    return mask


class _LiftStatistic:
    """Naive lift, w_T lift and w_T^2 lift as functions of bootstrap counts."""

    def __init__(self, table: ImpressionTable, ratios: np.ndarray, w0: float, mode: WeightMode):
        self.y = table.converted.astype(float)
        frac = float(np.mean(table.whitelisted))
        self.top_star = _top_fraction(table.score_identity, frac).astype(float)
        self.top_base = _top_fraction(table.score_ignorant, frac).astype(float)
        self.v1 = _thresholded(ratios, w0, mode, 1)
        self.v2 = _thresholded(ratios, w0, mode, 2)

    def __call__(self, counts: np.ndarray) -> np.ndarray:
        c = counts.astype(float)
        cy = c * self.y
        with np.errstate(invalid="ignore", divide="ignore"):
            base = cy.sum() / c.sum()
            naive = (cy @ self.top_star / (c @ self.top_star)) / (cy @ self.top_base / (c @ self.top_base))
            l1 = (cy @ self.v1 / (c @ self.v1)) / base
            l2 = (cy @ self.v2 / (c @ self.v2)) / base
        return np.array([naive, l1, l2])


def _thresholded(ratios, w0, mode, exponent) -> np.ndarray:
    return apply_weight_policy(ratios, WeightPolicy(mode, w0, exponent))


def _undefined(cid, q_cut, n, k, w0) -> LiftRow:
    nan = math.nan
    cvr = k / n if n else nan
    return LiftRow(cid, q_cut, n, k, w0, cvr, nan, nan, nan, nan, nan, nan, nan, nan, nan, False)


def _lift_row(cid, q_cut, table, ratios, w0, config, stream):
    n, k = len(table), int(table.converted.sum())
    if n == 0 or k == 0:
        return _undefined(cid, q_cut, n, k, w0), None
    stat = _LiftStatistic(table, ratios, w0, config.mode)
    point = stat(np.ones(n))
    reps = bootstrap_statistic(n, stat, config.n_bootstrap, config.seed, stream, config.threads)
    ci = [percentile_interval(reps[:, j], config.level) for j in range(3)]
    row = LiftRow(
        cid, q_cut, n, k, w0, k / n,
        float(point[0]), *ci[0], float(point[1]), *ci[1], float(point[2]), *ci[2],
        defined=bool(np.all(np.isfinite(point))),
    )
    return row, reps


def lift_report(
    table: ImpressionTable,
    config: LiftConfig = LiftConfig(),
    models: Optional[dict[str, CampaignModels]] = None,
) -> LiftReport:
    """Per-campaign and campaign-averaged lifts, unfiltered and per q_cut.

    Propensity models are fitted per campaign unless given. The threshold
    ``w0`` comes from the binomial heuristic with the campaign's naive CVR as
    the nominal rate and is reused for every q_cut subset of that campaign.
    Campaigns without conversions are reported with ``defined = 0``.
    """
    models = dict(models or {})
    rows: list[LiftRow] = []
    reps_by_cut: dict[float, list[np.ndarray]] = {}
    cuts = [math.nan] + list(config.q_cuts)
    for ci, cid in enumerate(table.campaigns()):
        sub = table.subset(table.campaign_id == cid)
        n, k = len(sub), int(sub.converted.sum())
        if k == 0:
            log.warning("campaign %s has no conversions; lift undefined", cid)
            rows.extend(_undefined(cid, q, n, k, math.nan) for q in cuts)
            continue
        if cid not in models:
            try:
                models[cid] = fit_models(sub, config.regularization)
            except DegenerateLabelError:
                log.warning("campaign %s whitelist labels are single-class; lift undefined", cid)
                rows.extend(_undefined(cid, q, n, k, math.nan) for q in cuts)
                continue
        m = models[cid]
        ratios = ratios_for_table(sub, m.base, m.star)
        params = ThresholdParams(config.k_max, config.delta, min(k / n, 1 - 1e-12))
        w0 = choose_w0(ratios, params)
        for qi, q in enumerate(cuts):
            if math.isnan(q):
                part, r = sub, ratios
            else:
                mask = qcut_filter_table(sub, q)
                part, r = sub.subset(mask), ratios[mask]
            row, reps = _lift_row(cid, q, part, r, w0, config, (STREAM_LIFT, ci, qi))
            rows.append(row)
            if reps is not None and row.defined:
                reps_by_cut.setdefault(qi, []).append((row, reps))
    for qi, q in enumerate(cuts):
        rows.append(_average_row(q, reps_by_cut.get(qi, []), config.level))
    return LiftReport(rows, models)


def _average_row(q_cut, members, level) -> LiftRow:
    if not members:
        return _undefined(AVERAGE_ID, q_cut, 0, 0, math.nan)
    rs = [m[0] for m in members]
    # campaigns are resampled independently, so replicate b of the average is
    # the average of the campaigns' replicate b
    reps = np.mean(np.stack([m[1] for m in members]), axis=0)
    ci = [percentile_interval(reps[:, j], level) for j in range(3)]
    return LiftRow(
        AVERAGE_ID, q_cut,
        sum(r.n_impressions for r in rs), sum(r.n_conversions for r in rs), math.nan,
        float(np.mean([r.cvr_naive for r in rs])),
        float(np.mean([r.naive_lift for r in rs])), *ci[0],
        float(np.mean([r.lift_wt for r in rs])), *ci[1],
        float(np.mean([r.lift_wt2 for r in rs])), *ci[2],
    )
