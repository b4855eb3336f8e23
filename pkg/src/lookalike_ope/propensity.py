"""Logistic whitelist-propensity models and importance ratios.

A model gives ``P(L = 1 | score, X)``; the importance ratio for an impression
is the identity-powered model's probability divided by the identity-ignorant
one's. Fitting is penalized maximum likelihood by iteratively reweighted
least squares on internally standardized covariates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import DegenerateLabelError, InputError

PROB_EPS = 1e-9


@dataclass(frozen=True)
class WhitelistObservation:
    score: float
    covariates: tuple[float, ...]
    label: bool


@dataclass(frozen=True)
class PropensityModel:
    """Fitted logistic model, coefficients on the original covariate scale."""

    intercept: float
    coef_score: float
    coef_covariates: tuple[float, ...] = ()
    means: tuple[float, ...] = ()
    sds: tuple[float, ...] = ()
    regularization: float = 1e-6
    converged: bool = True
    n_iterations: int = 0

    @property
    def n_covariates(self) -> int:
        return len(self.coef_covariates)

    def linear_predictor(self, score, covariates=None) -> np.ndarray:
        score = np.asarray(score, dtype=float)
        eta = self.intercept + self.coef_score * score
        if self.n_covariates:
            X = _as_matrix(covariates, score.size, self.n_covariates)
            eta = eta + X @ np.asarray(self.coef_covariates)
        elif covariates is not None and np.size(covariates) > 0:
            raise InputError("model has no covariates but covariates were given")
        return eta

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "coef_score": self.coef_score,
            "coef_covariates": list(self.coef_covariates),
            "standardization": {"means": list(self.means), "sds": list(self.sds)},
            "regularization": self.regularization,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PropensityModel":
        std = d.get("standardization", {})
        return cls(
            intercept=float(d["intercept"]),
            coef_score=float(d["coef_score"]),
            coef_covariates=tuple(float(c) for c in d.get("coef_covariates", [])),
            means=tuple(float(m) for m in std.get("means", [])),
            sds=tuple(float(s) for s in std.get("sds", [])),
            regularization=float(d.get("regularization", 0.0)),
            converged=bool(d.get("converged", True)),
            n_iterations=int(d.get("n_iterations", 0)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PropensityModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _as_matrix(covariates, n: int, k: int) -> np.ndarray:
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if n == 1 and X.size == k else X.reshape(-1, 1)
    if X.shape != (n, k):
        raise InputError(f"covariates have shape {X.shape}, model expects ({n}, {k})")
    return X


def predict(model: PropensityModel, score, covariates=None):
    """Whitelist-membership probability clamped to ``[1e-9, 1 - 1e-9]``."""
    scalar = np.ndim(score) == 0
    p = expit(model.linear_predictor(np.atleast_1d(score), covariates))
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(p[0]) if scalar else p


def _objective(beta, Z, y, lam, penalized):
    eta = Z @ beta
    ll = np.mean(y * eta - np.logaddexp(0.0, eta))
    return ll - 0.5 * lam * np.sum(beta[penalized] ** 2)


def _gradient(beta, Z, y, lam, penalized):
    mu = expit(Z @ beta)
    g = Z.T @ (y - mu) / y.size
    g[penalized] -= lam * beta[penalized]
    return g


def fit_logistic(
    scores,
    covariates,
    labels,
    regularization: float = 1e-6,
    tolerance: float = 1e-8,
    max_iter: int = 100,
) -> PropensityModel:
    """Penalized logistic regression of ``labels`` on score and covariates.

    The objective is the mean log-likelihood minus
    ``regularization / 2 * ||coefficients||^2`` (intercept unpenalized),
    evaluated on standardized covariates. Newton steps are halved until the
    objective does not decrease. ``converged`` is set when the gradient
    max-norm falls below ``tolerance`` and the Newton step has vanished.
    Without penalty, separable data has no finite optimum and the fit returns
    ``converged=False`` rather than raising.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).astype(float).ravel()
    n = s.size
    if n < 2 or y.size != n:
        raise InputError("need at least two observations with matching labels")
    if covariates is None:
        X = np.empty((n, 0))
    else:
        X = np.asarray(covariates, dtype=float)
        X = X.reshape(n, -1) if X.size else np.empty((n, 0))
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(X))):
        raise InputError("non-finite features")
    if y.min() == y.max():
        raise DegenerateLabelError("labels contain a single class")
    if regularization < 0:
        raise InputError("regularization must be >= 0")

    means = X.mean(axis=0)
    sds = X.std(axis=0)
    sds = np.where(sds > 0, sds, 1.0)
    Z = np.column_stack([np.ones(n), s, (X - means) / sds])
    d = Z.shape[1]
    penalized = np.arange(d) > 0
    lam = float(regularization)
    pen_diag = np.where(penalized, lam, 0.0)

    beta = np.zeros(d)
    obj = _objective(beta, Z, y, lam, penalized)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = _gradient(beta, Z, y, lam, penalized)
        mu = expit(Z @ beta)
        wts = mu * (1.0 - mu)
        H = (Z.T * wts) @ Z / n + np.diag(pen_diag)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        # a vanishing gradient alone also happens while diverging on separable data
        if np.max(np.abs(g)) < tolerance and np.max(np.abs(step)) < 1e-4 * (1.0 + np.max(np.abs(beta))):
            converged = True
            it -= 1
            break
        t = 1.0
        while True:
            cand = beta + t * step
            cand_obj = _objective(cand, Z, y, lam, penalized)
            if cand_obj >= obj or t < 1e-10:
                break
            t *= 0.5
        beta, obj = cand, cand_obj
    if converged and lam == 0.0 and np.all((Z @ beta > 0) == (y > 0.5)):
        # perfect separation: the unpenalized optimum lies at infinity
        converged = False

    coef_x = beta[2:] / sds
    intercept = beta[0] - float(np.sum(coef_x * means))
    return PropensityModel(
        intercept=float(intercept),
        coef_score=float(beta[1]),
        coef_covariates=tuple(float(c) for c in coef_x),
        means=tuple(float(m) for m in means),
        sds=tuple(float(v) for v in sds),
        regularization=lam,
        converged=converged,
        n_iterations=it,
    )


def fit_observations(
    observations: Sequence[WhitelistObservation], **kwargs
) -> PropensityModel:
    """:func:`fit_logistic` on a list of :class:`WhitelistObservation`."""
    if len(observations) < 2:
        raise InputError("need at least two observations")
    scores = [o.score for o in observations]
    X = np.array([o.covariates for o in observations], dtype=float)
    labels = [o.label for o in observations]
    return fit_logistic(scores, X, labels, **kwargs)


def penalized_loglik(model: PropensityModel, scores, covariates, labels) -> float:
    """Objective maximized by :func:`fit_logistic`, on the standardized scale."""
    beta, Z, y = _standardized_problem(model, scores, covariates, labels)
    penalized = np.arange(beta.size) > 0
    return float(_objective(beta, Z, y, model.regularization, penalized))


def penalized_gradient(model: PropensityModel, scores, covariates, labels) -> np.ndarray:
    beta, Z, y = _standardized_problem(model, scores, covariates, labels)
    penalized = np.arange(beta.size) > 0
    return _gradient(beta, Z, y, model.regularization, penalized)


def _standardized_problem(model, scores, covariates, labels):
    s = np.asarray(scores, dtype=float).ravel()
    n = s.size
    means = np.asarray(model.means)
    sds = np.asarray(model.sds)
    X = _as_matrix(covariates, n, model.n_covariates) if model.n_covariates else np.empty((n, 0))
    Z = np.column_stack([np.ones(n), s, (X - means) / sds])
    coef_x = np.asarray(model.coef_covariates)
    beta = np.concatenate(
        [[model.intercept + float(np.sum(coef_x * means))], [model.coef_score], coef_x * sds]
    )
    return beta, Z, np.asarray(labels).astype(float).ravel()


def raw_ratios(
    score_base, score_star, covariates, model_base: PropensityModel, model_star: PropensityModel
) -> np.ndarray:
    """Per-impression importance ratio ``P*(L|S*,X) / P(L|S,X)``.

    The bid-factor choice is not applied here; it is the exponent of the
    weight policy.
    """
    if model_base.n_covariates != model_star.n_covariates:
        raise InputError("models disagree on covariate dimension")
    p_star = predict(model_star, np.atleast_1d(score_star), covariates)
    p_base = predict(model_base, np.atleast_1d(score_base), covariates)
    return p_star / p_base


def ratios_for_table(table, model_base: PropensityModel, model_star: PropensityModel) -> np.ndarray:
    """:func:`raw_ratios` over the columns of an :class:`ImpressionTable`."""
    return raw_ratios(
        table.score_ignorant, table.score_identity, table.covariates, model_base, model_star
    )


def transfer_model(
    model_base: PropensityModel,
    score_star,
    covariates,
    score_base=None,
    target_mean_ratio: float = 1.0,
) -> PropensityModel:
    """Identity-powered propensity model with the base model's whitelisting rule.

    Keeps the fitted score and covariate coefficients, swaps in the
    identity-powered score and re-solves the intercept so the mean ratio over
    the logged impressions equals ``target_mean_ratio``: the counterfactual
    policy serves the same impression volume. Without ``score_base`` the
    intercept is kept as is.
    """
    if score_base is None:
        return model_base
    p_base = predict(model_base, np.atleast_1d(score_base), covariates)
    eta_star = model_base.linear_predictor(np.atleast_1d(score_star), covariates) - model_base.intercept

    def gap(b0):
        p = np.clip(expit(b0 + eta_star), PROB_EPS, 1.0 - PROB_EPS)
        return float(np.mean(p / p_base)) - target_mean_ratio

    lo, hi = model_base.intercept - 1.0, model_base.intercept + 1.0
    while gap(lo) > 0:
        lo -= 2.0 * (hi - lo)
        if lo < -1e3:
            raise InputError("cannot calibrate identity-powered intercept")
    while gap(hi) < 0:
        hi += 2.0 * (hi - lo)
        if hi > 1e3:
            raise InputError("cannot calibrate identity-powered intercept")
    b0 = brentq(gap, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    return PropensityModel(
        intercept=float(b0),
        coef_score=model_base.coef_score,
        coef_covariates=model_base.coef_covariates,
        means=model_base.means,
        sds=model_base.sds,
        regularization=model_base.regularization,
        converged=model_base.converged,
        n_iterations=0,
    )
