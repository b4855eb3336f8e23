"""Synthetic identity universes and lookalike campaign logs with known ground truth.

Users carry a latent propensity ``z``. Each identifier of a user emits a
noisy signal of ``z`` whose noise shrinks with its observation count. The
identity-ignorant score uses the identifier's own signal; the identity-powered
score pools the signals of every identifier in the same *observed* cluster,
so over-merged clusters (FP) dilute it and over-split clusters (FN) reduce it
to the ignorant score.

Whitelisting follows a logistic rule in the score and log activity. Logged
impressions land on identifiers in proportion to ``activity * P(L=1 | S, X)``;
the counterfactual identity-powered policy swaps in the pooled score and
serves the same impression volume. Both policies are known exactly, so the
population-level lift they imply is the planted ground truth.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit, ndtr

from .errors import InputError
from .records import ImpressionTable, first_conversion_filter
from .resampling import STREAM_CAMPAIGN, STREAM_UNIVERSE, derive_rng


@dataclass(frozen=True)
class IdentityUniverseConfig:
    n_users: int = 10_000
    cluster_size_median: float = 33.0
    max_cluster_size: int = 2_000
    obs_log_mean: float = 2.5
    obs_log_sd: float = 1.0
    obs_sharing: float = 0.5
    merge_noise: float = 0.0
    split_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1:
            raise InputError("n_users must be >= 1")
        if self.cluster_size_median < 1:
            raise InputError("cluster_size_median must be >= 1")
        for name in ("merge_noise", "split_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")


def _operating_points() -> dict[str, dict]:
    # G1 (high FP) .. G8 (high FN): identifiers per user 33 -> 5, merge noise 2% -> 0
    out = {}
    for k in range(8):
        t = k / 7
        out[f"G{k + 1}"] = {
            "cluster_size_median": float(round(33.0 * (5.0 / 33.0) ** t, 3)),
            "merge_noise": round(0.02 * (1 - t), 5),
            "split_noise": 0.0,
        }
    return out


UNIVERSE_PRESETS = _operating_points()


def universe_preset(name: str, **overrides) -> IdentityUniverseConfig:
    if name not in UNIVERSE_PRESETS:
        raise InputError(f"unknown universe preset {name!r}; choose from {sorted(UNIVERSE_PRESETS)}")
    return IdentityUniverseConfig(**{**UNIVERSE_PRESETS[name], **overrides})


@dataclass(frozen=True)
class UserCluster:
    user_id: str
    identifier_ids: tuple[str, ...]
    true_affinity: float


@dataclass
class IdentityUniverse:
    """Column-wise universe: one entry per identifier unless noted."""

    config: IdentityUniverseConfig
    true_user: np.ndarray
    observed_cluster: np.ndarray
    obs_count: np.ndarray
    signal_noise: np.ndarray  # standard normal draw per identifier
    latent: np.ndarray  # per user

    @property
    def n_identifiers(self) -> int:
        return int(self.true_user.size)

    @property
    def affinity(self) -> np.ndarray:
        """Per-user conversion affinity in [0, 1]."""
        return ndtr(self.latent)

    def observed_sizes(self) -> np.ndarray:
        """Observed cluster size for every identifier."""
        return np.bincount(self.observed_cluster)[self.observed_cluster]

    def cluster_size_counts(self, observed: bool = True) -> np.ndarray:
        labels = self.observed_cluster if observed else self.true_user
        counts = np.bincount(labels)
        return counts[counts > 0]

    def _clusters(self, labels, with_affinity: bool) -> list[UserCluster]:
        order = np.argsort(labels, kind="stable")
        bounds = np.flatnonzero(np.diff(labels[order])) + 1
        aff = self.affinity
        out = []
        for grp in np.split(order, bounds):
            lab = int(labels[grp[0]])
            if with_affinity:
                a = float(aff[lab])
            else:
                a = float(np.mean(aff[self.true_user[grp]]))
            out.append(UserCluster(f"u{lab}", tuple(f"i{j}" for j in grp), a))
        return out

    def true_clusters(self) -> list[UserCluster]:
        return self._clusters(self.true_user, True)

    def observed_clusters(self) -> list[UserCluster]:
        """Observed clusters; affinity is the mean over member identifiers' true users."""
        return self._clusters(self.observed_cluster, False)


def _geometric_p(median: float) -> float:
    # support {1, 2, ...}; centre the median on the integer
    if median <= 1.0:
        return 1.0
    return 1.0 - 0.5 ** (1.0 / (median - 0.5))


def generate_universe(config: IdentityUniverseConfig) -> IdentityUniverse:
    """True users and an observed clustering corrupted by split and merge noise."""
    rng = derive_rng(config.seed, STREAM_UNIVERSE)
    sizes = rng.geometric(_geometric_p(config.cluster_size_median), config.n_users)
    sizes = np.minimum(sizes, config.max_cluster_size)
    true_user = np.repeat(np.arange(config.n_users), sizes)
    n_ids = true_user.size
    # a user's activity is spread over its identifiers: larger clusters, fewer
    # observations per identifier (obs_sharing = 0 makes them independent)
    share = (config.cluster_size_median / sizes[true_user]) ** config.obs_sharing
    raw = np.exp(rng.normal(config.obs_log_mean, config.obs_log_sd, n_ids)) * share
    obs = 1 + np.floor(raw).astype(np.int64)
    noise = rng.standard_normal(n_ids)
    latent = rng.standard_normal(config.n_users)

    observed = true_user.copy()
    split_users = rng.random(config.n_users) < config.split_noise
    split_ids = np.flatnonzero(split_users[true_user])
    observed[split_ids] = config.n_users + np.arange(split_ids.size)
    movers = np.flatnonzero(rng.random(n_ids) < config.merge_noise)
    if movers.size and n_ids > 1:
        # attach to the cluster of a uniformly chosen other identifier
        donor = rng.integers(0, n_ids - 1, movers.size)
        donor = donor + (donor >= movers)
        observed[movers] = observed[donor].copy()
    observed = pd.factorize(observed)[0].astype(np.int64)
    return IdentityUniverse(config, true_user, observed, obs, noise, latent)


@dataclass(frozen=True)
class CampaignSpec:
    """Campaign generation knobs.

    ``base_cvr`` is the expected conversion rate per logged impression.
    ``cvr_spread`` is the log-scale spread of per-user CVR around the latent
    propensity; 0 makes conversion independent of the user. ``planted_lift``
    (if set) re-solves ``cvr_spread`` so the population lift equals it;
    ``cvr_in``/``cvr_out`` (if set) re-solve ``base_cvr`` and ``cvr_spread``
    to hit the expected in/out-of-whitelist conversion rates.
    """

    campaign_id: str = "synthetic"
    n_impressions: int = 200_000
    base_cvr: float = 0.01
    cvr_spread: float = 1.5
    score_noise_ignorant: float = 6.0
    score_noise_identity: float = 1.0
    whitelist_fraction: float = 0.05
    score_weight: float = 20.0
    activity_weight: float = 0.3
    activity_exponent: float = 0.5
    n_covariates: int = 1
    planted_lift: Optional[float] = None
    cvr_in: Optional[float] = None
    cvr_out: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.whitelist_fraction <= 1:
            raise InputError("whitelist_fraction must lie in (0, 1]")
        if self.n_impressions < 1:
            raise InputError("n_impressions must be >= 1")
        if not 0 < self.base_cvr < 1:
            raise InputError("base_cvr must lie in (0, 1)")
        if self.n_covariates < 1:
            raise InputError("need at least the log-activity covariate")
        if self.score_noise_ignorant < 0 or self.score_noise_identity < 0:
            raise InputError("score noise must be >= 0")
        if (self.cvr_in is None) != (self.cvr_out is None):
            raise InputError("cvr_in and cvr_out must be given together")
        if self.planted_lift is not None and self.cvr_in is not None:
            raise InputError("planted_lift and cvr_in/cvr_out both calibrate cvr_spread; give one")
        if self.planted_lift is not None and not self.planted_lift > 0:
            raise InputError("planted_lift must be > 0")


# reference campaigns: impressions (millions), CVR in / out of whitelist (%)
CAMPAIGN_TABLE = {
    "A": (1.21, 0.049, 0.016),
    "B": (7.27, 0.014, 0.010),
    "C": (8.18, 0.032, 0.009),
    "D": (0.80, 0.053, 0.009),
    "E": (1.46, 0.018, 0.009),
    "F": (0.45, 0.027, 0.008),
    "G": (3.71, 0.046, 0.005),
    "H": (5.43, 0.008, 0.005),
}


def campaign_preset(name: str, scale: float = 1.0, **overrides) -> CampaignSpec:
    """Campaign presets: reference campaigns ``A``-``H`` or ``lift-<value>``."""
    if name in CAMPAIGN_TABLE:
        imp, cin, cout = CAMPAIGN_TABLE[name]
        base = dict(
            campaign_id=name,
            n_impressions=max(1, int(round(imp * 1e6 * scale))),
            base_cvr=cout / 100,
            cvr_in=cin / 100,
            cvr_out=cout / 100,
            # in/out ratios up to ~9 need a whitelist score that tracks the latent
            score_noise_ignorant=0.5,
            score_noise_identity=0.25,
        )
    elif name.startswith("lift-"):
        base = dict(
            campaign_id=name,
            n_impressions=max(1, int(round(200_000 * scale))),
            base_cvr=0.005,
            planted_lift=float(name[5:]),
        )
    else:
        raise InputError(f"unknown campaign preset {name!r}")
    return CampaignSpec(**{**base, **overrides})


@dataclass
class CampaignTruth:
    """Exact population quantities behind a generated campaign.

    Rates are per drawn impression, before the first-conversion filter.
    """

    spec: CampaignSpec
    cvr_on_policy: float
    cvr_off_policy: float
    planted_lift: float
    expected_cvr_in: float
    expected_cvr_out: float
    score_weight: float
    intercept_base: float
    intercept_star: float
    activity_weight: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = asdict(self.spec)
        return d


class _Population:
    """Per-identifier quantities for one campaign; cheap to re-evaluate."""

    def __init__(self, universe: IdentityUniverse, spec: CampaignSpec):
        self.u = universe
        self.spec = spec
        obs = universe.obs_count.astype(float)
        self.log_activity = np.log1p(obs)
        self.rate = obs**spec.activity_exponent
        self.z_id = universe.latent[universe.true_user]
        e = universe.signal_noise / np.sqrt(obs)
        self.score_ign = expit(self.z_id + spec.score_noise_ignorant * e)
        self.cluster = universe.observed_cluster
        self.cl_obs = np.bincount(self.cluster, weights=obs)
        self.cl_z = np.bincount(self.cluster, weights=obs * self.z_id)
        self.cl_e = np.bincount(self.cluster, weights=obs * e)
        self.intercept_base = self._base_intercept()
        self.q = expit(self.intercept_base + self.linear(self.score_ign))
        self.pi = self.rate * self.q
        self._star_cache: dict[float, tuple] = {}

    def score_identity(self, noise: float) -> np.ndarray:
        c = self.cluster
        return expit((self.cl_z[c] + noise * self.cl_e[c]) / self.cl_obs[c])

    def conversion_prob(self, base: float, spread: float) -> np.ndarray:
        """Per-identifier CVR with on-policy impression-weighted mean ``base``."""
        shape = np.exp(spread * self.z_id - 0.5 * spread * spread)
        scale = base * self.pi.sum() / float(self.pi @ shape)
        return np.minimum(1.0, scale * shape)

    def linear(self, score) -> np.ndarray:
        return self.spec.score_weight * score + self.spec.activity_weight * self.log_activity

    def _base_intercept(self) -> float:
        lin = self.linear(self.score_ign)
        f = self.spec.whitelist_fraction
        if f >= 1.0:
            return 50.0
        return brentq(lambda b: float(np.mean(expit(b + lin))) - f, -100, 100, xtol=1e-13)

    def star_policy(self, noise_identity: float):
        """Intercept, propensity and score of the identity-powered policy.

        The intercept is set so both policies serve the same impression volume.
        """
        if noise_identity not in self._star_cache:
            s_star = self.score_identity(noise_identity)
            lin = self.linear(s_star)
            volume = float(self.pi.sum())
            b1 = brentq(lambda b: float(np.sum(self.rate * expit(b + lin))) - volume, -100, 100, xtol=1e-13)
            self._star_cache[noise_identity] = (b1, expit(b1 + lin), s_star)
        return self._star_cache[noise_identity]

    def lift(self, noise_identity: float, conv: np.ndarray) -> float:
        _, q_star, _ = self.star_policy(noise_identity)
        pi_star = self.rate * q_star
        return float((pi_star @ conv / pi_star.sum()) / (self.pi @ conv / self.pi.sum()))

    def in_out(self, conv: np.ndarray) -> tuple[float, float]:
        q, pi = self.q, self.pi
        cin = float(np.sum(pi * q * conv) / np.sum(pi * q))
        cout = float(np.sum(pi * (1 - q) * conv) / np.sum(pi * (1 - q)))
        return cin, cout


def calibrate_campaign(universe: IdentityUniverse, spec: CampaignSpec) -> tuple[CampaignSpec, CampaignTruth]:
    """Resolve calibration targets into concrete knobs and compute the truth."""
    pop = _Population(universe, spec)
    base, spread = spec.base_cvr, spec.cvr_spread
    if spec.cvr_in is not None:
        target = spec.cvr_in / spec.cvr_out
        if target <= 1:
            raise InputError("cvr_in must exceed cvr_out")
        if spec.whitelist_fraction >= 1:
            raise InputError("in/out calibration needs whitelist_fraction < 1")

        def ratio_gap(s):
            cin, cout = pop.in_out(pop.conversion_prob(1e-4, s))
            return math.log(cin / cout) - math.log(target)

        if ratio_gap(12.0) < 0:
            raise InputError(f"in/out ratio {target:.3g} not reachable for this universe")
        spread = brentq(ratio_gap, 0.0, 12.0, xtol=1e-12)
        cin1, _ = pop.in_out(pop.conversion_prob(1e-4, spread))
        base = 1e-4 * spec.cvr_in / cin1
    noise_id = spec.score_noise_identity
    if spec.planted_lift is not None:
        target = spec.planted_lift

        def gap(s):
            return math.log(pop.lift(noise_id, pop.conversion_prob(base, s))) - math.log(target)

        # lift is not monotone in the spread: take the root nearest zero
        grid = np.linspace(0.0, 6.0 if target >= 1.0 else -6.0, 49)
        gaps = [0.0] if target == 1.0 else [gap(x) for x in grid]
        hit = next((i for i in range(1, len(gaps)) if gaps[i - 1] * gaps[i] <= 0), None)
        if target == 1.0:
            spread = 0.0
        elif hit is None:
            reach = [math.exp(g) * target for g in gaps]
            raise InputError(
                f"planted lift {target} outside reachable range [{min(reach):.3g}, {max(reach):.3g}]"
            )
        else:
            spread = brentq(gap, grid[hit - 1], grid[hit], xtol=1e-12)
    conv = pop.conversion_prob(base, spread)
    spec = replace(spec, base_cvr=base, cvr_spread=spread, score_noise_identity=noise_id)
    b1, q_star, _ = pop.star_policy(noise_id)
    pi_star = pop.rate * q_star
    on = float(pop.pi @ conv / pop.pi.sum())
    off = float(pi_star @ conv / pi_star.sum())
    cin, cout = pop.in_out(conv)
    truth = CampaignTruth(
        spec, on, off, off / on, cin, cout, spec.score_weight, pop.intercept_base, b1, spec.activity_weight
    )
    return spec, truth


def generate_campaign(
    universe: IdentityUniverse, spec: CampaignSpec, seed: int = 0, campaign_index: int = 0
) -> tuple[ImpressionTable, CampaignTruth]:
    """Logged impressions for one campaign plus its exact ground truth.

    The whitelist is the top ``whitelist_fraction`` of identifiers ranked by a
    selection utility ``score_weight * S + activity_weight * log1p(obs)`` plus
    standard logistic noise, so membership is logistic in (S, X) to within
    the finite-population rank cut. Rows come out in time order with
    first-conversion filtering applied; each row's true user is kept in
    ``table.extra['true_user']``.
    """
    spec, truth = calibrate_campaign(universe, spec)
    pop = _Population(universe, spec)
    rng = derive_rng(seed, STREAM_CAMPAIGN, campaign_index)
    _, _, s_star = pop.star_policy(spec.score_noise_identity)
    conv_p = pop.conversion_prob(spec.base_cvr, spec.cvr_spread)
    n_ids = universe.n_identifiers
    utility = pop.linear(pop.score_ign) + rng.logistic(size=n_ids)
    n_white = int(round(spec.whitelist_fraction * n_ids))
    whitelisted = np.zeros(n_ids, dtype=bool)
    whitelisted[np.argsort(-utility, kind="stable")[:n_white]] = True
    extra_cov = rng.standard_normal((n_ids, spec.n_covariates - 1))
    cdf = np.cumsum(pop.pi)
    cdf /= cdf[-1]
    rows = np.minimum(np.searchsorted(cdf, rng.random(spec.n_impressions), side="right"), n_ids - 1)
    converted = rng.random(rows.size) < conv_p[rows]
    keep = first_conversion_filter(np.zeros(rows.size, np.int8), rows, converted)
    rows, converted = rows[keep], converted[keep]
    covariates = np.column_stack([pop.log_activity[rows], extra_cov[rows]])
    ident = np.char.add("i", rows.astype(str)).astype(object)
    table = ImpressionTable(
        np.full(rows.size, spec.campaign_id, dtype=object),
        ident,
        converted,
        pop.score_ign[rows],
        s_star[rows],
        covariates,
        universe.obs_count[rows],
        universe.observed_sizes()[rows],
        whitelisted[rows],
        extra={"true_user": universe.true_user[rows], "identifier_index": rows},
    )
    return table, truth


def qcut_filter(obs_count, cluster_size, q_cut: float) -> np.ndarray:
    """Rows with few own observations but a large identity cluster.

    ``obs < Q_obs(1 - q_cut)`` and ``cls > Q_cls(q_cut)``, with empirical
    quantiles (linear interpolation) over the rows passed in.
    """
    if not 0.0 <= q_cut < 1.0:
        raise InputError("q_cut must lie in [0, 1)")
    obs = np.asarray(obs_count, dtype=float)
    cls = np.asarray(cluster_size, dtype=float)
    if obs.size == 0:
        raise InputError("no records")
    return (obs < np.quantile(obs, 1.0 - q_cut)) & (cls > np.quantile(cls, q_cut))


def qcut_filter_table(table: ImpressionTable, q_cut: float) -> np.ndarray:
    return qcut_filter(table.obs_count, table.cluster_size, q_cut)


def true_clusters_for(table: ImpressionTable) -> dict[str, list[str]]:
    """Ground-truth user -> impressed identifiers mapping for the sidecar."""
    users = table.extra["true_user"]
    ids = table.identifier_id
    out: dict[str, set] = {}
    for u, i in zip(users.tolist(), ids.tolist()):
        out.setdefault(f"u{u}", set()).add(i)
    return {k: sorted(v, key=lambda s: int(s[1:])) for k, v in sorted(out.items(), key=lambda kv: int(kv[0][1:]))}
