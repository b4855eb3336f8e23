"""Impression records and their CSV interchange format.

Rows are held column-wise in :class:`ImpressionTable`; :class:`ImpressionRecord`
is the per-row view. The CSV header is fixed::

    campaign_id,identifier_id,converted,score_ignorant,score_identity,
    obs_count,cluster_size,whitelisted,x1,...,xK

with K declared in a JSON sidecar next to the CSV.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import pandas as pd

from .errors import InputError

BASE_COLUMNS = (
    "campaign_id",
    "identifier_id",
    "converted",
    "score_ignorant",
    "score_identity",
    "obs_count",
    "cluster_size",
    "whitelisted",
)


@dataclass(frozen=True)
class ImpressionRecord:
    identifier_id: str
    campaign_id: str
    converted: bool
    score_ignorant: float
    score_identity: float
    activity_covariates: tuple[float, ...]
    obs_count: int
    cluster_size: int
    whitelisted: bool


@dataclass
class ImpressionTable:
    campaign_id: np.ndarray
    identifier_id: np.ndarray
    converted: np.ndarray
    score_ignorant: np.ndarray
    score_identity: np.ndarray
    covariates: np.ndarray  # (n, K)
    obs_count: np.ndarray
    cluster_size: np.ndarray
    whitelisted: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.campaign_id = np.asarray(self.campaign_id, dtype=object)
        self.identifier_id = np.asarray(self.identifier_id, dtype=object)
        self.converted = np.asarray(self.converted).astype(bool)
        self.score_ignorant = np.asarray(self.score_ignorant, dtype=float)
        self.score_identity = np.asarray(self.score_identity, dtype=float)
        self.obs_count = np.asarray(self.obs_count, dtype=np.int64)
        self.cluster_size = np.asarray(self.cluster_size, dtype=np.int64)
        self.whitelisted = np.asarray(self.whitelisted).astype(bool)
        n = self.converted.size
        cov = np.asarray(self.covariates, dtype=float)
        self.covariates = cov.reshape(n, -1) if cov.size else np.empty((n, 0))
        for name in ("campaign_id", "identifier_id", "score_ignorant", "score_identity",
                     "obs_count", "cluster_size", "whitelisted"):
            if getattr(self, name).shape != (n,):
                raise InputError(f"column {name} has the wrong length")
        if self.covariates.shape[0] != n:
            raise InputError("covariate matrix has the wrong number of rows")
        for name in ("score_ignorant", "score_identity"):
            col = getattr(self, name)
            if np.any(~np.isfinite(col)) or np.any(col < 0) or np.any(col > 1):
                raise InputError(f"{name} must lie in [0, 1]")
        if np.any(self.obs_count < 0):
            raise InputError("obs_count must be >= 0")
        if np.any(self.cluster_size < 1):
            raise InputError("cluster_size must be >= 1")

    def __len__(self) -> int:
        return int(self.converted.size)

    @property
    def n_covariates(self) -> int:
        return int(self.covariates.shape[1])

    def subset(self, mask) -> "ImpressionTable":
        mask = np.asarray(mask)
        return ImpressionTable(
            self.campaign_id[mask], self.identifier_id[mask], self.converted[mask],
            self.score_ignorant[mask], self.score_identity[mask], self.covariates[mask],
            self.obs_count[mask], self.cluster_size[mask], self.whitelisted[mask],
            {k: np.asarray(v)[mask] for k, v in self.extra.items()},
        )

    def campaigns(self) -> list[str]:
        return sorted(set(self.campaign_id.tolist()))

    def records(self) -> Iterator[ImpressionRecord]:
        for i in range(len(self)):
            yield ImpressionRecord(
                identifier_id=str(self.identifier_id[i]),
                campaign_id=str(self.campaign_id[i]),
                converted=bool(self.converted[i]),
                score_ignorant=float(self.score_ignorant[i]),
                score_identity=float(self.score_identity[i]),
                activity_covariates=tuple(float(v) for v in self.covariates[i]),
                obs_count=int(self.obs_count[i]),
                cluster_size=int(self.cluster_size[i]),
                whitelisted=bool(self.whitelisted[i]),
            )

    @classmethod
    def from_records(cls, records) -> "ImpressionTable":
        records = list(records)
        if not records:
            raise InputError("no records")
        return cls(
            [r.campaign_id for r in records],
            [r.identifier_id for r in records],
            [r.converted for r in records],
            [r.score_ignorant for r in records],
            [r.score_identity for r in records],
            [r.activity_covariates for r in records],
            [r.obs_count for r in records],
            [r.cluster_size for r in records],
            [r.whitelisted for r in records],
        )

    @staticmethod
    def concat(tables: list["ImpressionTable"]) -> "ImpressionTable":
        keys = set.intersection(*(set(t.extra) for t in tables)) if tables else set()
        return ImpressionTable(
            np.concatenate([t.campaign_id for t in tables]),
            np.concatenate([t.identifier_id for t in tables]),
            np.concatenate([t.converted for t in tables]),
            np.concatenate([t.score_ignorant for t in tables]),
            np.concatenate([t.score_identity for t in tables]),
            np.vstack([t.covariates for t in tables]),
            np.concatenate([t.obs_count for t in tables]),
            np.concatenate([t.cluster_size for t in tables]),
            np.concatenate([t.whitelisted for t in tables]),
            {k: np.concatenate([t.extra[k] for t in tables]) for k in keys},
        )


def first_conversion_filter(campaign_id, identifier_id, converted) -> np.ndarray:
    """Mask keeping, per (campaign, identifier), rows up to and including the first conversion.

    Rows are taken to be in time order.
    """
    conv = np.asarray(converted).astype(bool)
    c1 = pd.factorize(np.asarray(campaign_id))[0].astype(np.int64)
    c2 = pd.factorize(np.asarray(identifier_id))[0].astype(np.int64)
    codes = c1 * (int(c2.max(initial=0)) + 1) + c2
    # number of earlier conversions of the same key
    prior = pd.Series(conv.astype(np.int64)).groupby(codes).cumsum().to_numpy() - conv
    return prior == 0


def sidecar_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_suffix(".json")


def write_impressions(table: ImpressionTable, csv_path, sidecar: Optional[dict] = None) -> None:
    """Write the CSV and a sidecar JSON declaring the covariate count."""
    k = table.n_covariates
    cols = {
        "campaign_id": table.campaign_id,
        "identifier_id": table.identifier_id,
        "converted": table.converted.astype(np.int8),
        "score_ignorant": table.score_ignorant,
        "score_identity": table.score_identity,
        "obs_count": table.obs_count,
        "cluster_size": table.cluster_size,
        "whitelisted": table.whitelisted.astype(np.int8),
    }
    for j in range(k):
        cols[f"x{j + 1}"] = table.covariates[:, j]
    pd.DataFrame(cols).to_csv(csv_path, index=False, float_format="%.12g", lineterminator="\n")
    meta = dict(sidecar or {})
    meta["n_covariates"] = k
    with open(sidecar_path(csv_path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def expected_header(k: int) -> list[str]:
    return list(BASE_COLUMNS) + [f"x{j + 1}" for j in range(k)]


def read_impressions(csv_path, n_covariates: Optional[int] = None) -> ImpressionTable:
    """Read an impressions CSV, validating the exact header against the sidecar."""
    if n_covariates is None:
        sc = sidecar_path(csv_path)
        if not sc.exists():
            raise InputError(f"missing sidecar {sc} declaring n_covariates")
        with open(sc) as fh:
            n_covariates = int(json.load(fh)["n_covariates"])
    with open(csv_path) as fh:
        header = fh.readline().rstrip("\r\n").split(",")
    want = expected_header(n_covariates)
    if header != want:
        missing = [c for c in want if c not in header]
        unexpected = [c for c in header if c not in want]
        raise InputError(
            f"bad header in {csv_path}: missing columns {missing}, unexpected columns {unexpected}"
        )
    df = pd.read_csv(csv_path, dtype={"campaign_id": str, "identifier_id": str})
    for c in ("converted", "whitelisted"):
        if not df[c].isin([0, 1]).all():
            raise InputError(f"column {c} must be 0/1")
    return ImpressionTable(
        df["campaign_id"].to_numpy(object),
        df["identifier_id"].to_numpy(object),
        df["converted"].to_numpy() == 1,
        df["score_ignorant"].to_numpy(float),
        df["score_identity"].to_numpy(float),
        df[[f"x{j + 1}" for j in range(n_covariates)]].to_numpy(float),
        df["obs_count"].to_numpy(np.int64),
        df["cluster_size"].to_numpy(np.int64),
        df["whitelisted"].to_numpy() == 1,
    )
