"""Overlap and covariate-balance diagnostics for binned treatments.

Balance compares each bin against a baseline bin via standardized mean
differences, before and after inverse-propensity weighting; overlap
summarizes the per-bin propensity distributions and flags bins where
clipping was active.  Both emit plot-ready tabular payloads only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .coarsen import BinPartition, CounterfactualMeans
from .dataset import ObservationTable
from .errors import ConfigError

_QUANTILES = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    bin: int
    smd_pre: float
    smd_post: float


@dataclass(frozen=True)
class BalanceReport:
    """SMDs per (covariate, bin != baseline), pre and post weighting.

    Covariates with zero pooled sd are listed in `skipped` instead of
    getting rows.  Pooled sd is the unweighted full-sample sd, so pre and
    post share a denominator.
    """

    rows: tuple[BalanceRow, ...]
    baseline: int
    skipped: tuple[str, ...]

    def max_abs(self) -> tuple[float, float]:
        pre = max((abs(r.smd_pre) for r in self.rows), default=0.0)
        post = max((abs(r.smd_post) for r in self.rows), default=0.0)
        return pre, post

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["covariate", "bin", "smd_pre", "smd_post"])
            for r in self.rows:
                writer.writerow([r.covariate, r.bin,
                                 repr(r.smd_pre), repr(r.smd_post)])


def _weighted_mean(values: np.ndarray, weights: np.ndarray) -> float:
    return float((values * weights).sum() / weights.sum())


def balance_report(table: ObservationTable, partition: BinPartition,
                   phat: np.ndarray, baseline: int = 0,
                   covariates=None) -> BalanceReport:
    """Standardized mean differences of covariates across treatment bins.

    smd = (mean in bin k - mean in baseline) / full-sample sd.  The
    pre column uses unit weights within each bin; the post column
    reweights each bin's rows by 1/p_k(X), normalized within the bin.
    """
    labels = partition.assign(table.t)
    if not (labels == baseline).any():
        raise ConfigError(f"diagnostics: baseline bin {baseline} is empty")
    names = covariates if covariates is not None else \
        [c for c in table.column_labels() if c not in ("y", "t")]
    rows: list[BalanceRow] = []
    skipped: list[str] = []
    base_mask = labels == baseline
    ipw_base = 1.0 / phat[base_mask, baseline]
    for name in names:
        col = table.column(name)
        sd = float(col.std())
        if sd <= 0.0:
            skipped.append(name)
            continue
        base_pre = float(col[base_mask].mean())
        base_post = _weighted_mean(col[base_mask], ipw_base)
        for k in range(partition.n_bins):
            if k == baseline:
                continue
            mask = labels == k
            pre = (float(col[mask].mean()) - base_pre) / sd
            post = (_weighted_mean(col[mask], 1.0 / phat[mask, k])
                    - base_post) / sd
            rows.append(BalanceRow(covariate=name, bin=k,
                                   smd_pre=pre, smd_post=post))
    return BalanceReport(rows=tuple(rows), baseline=baseline,
                         skipped=tuple(skipped))


@dataclass(frozen=True)
class OverlapReport:
    """Per-bin propensity summaries with clip-floor counts and warnings."""

    bins: tuple[dict, ...]
    clip: float
    warnings: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"bins": list(self.bins), "clip": self.clip,
                "warnings": list(self.warnings)}


def clip_floor(clip: float) -> float:
    """Largest value a clipped-then-renormalized propensity can take.

    Clipping raises an entry to `clip`; renormalizing divides by a row
    sum that is at least 1 - clip, so flagged entries sit at or below
    clip / (1 - clip).
    """
    return clip / (1.0 - clip) + 1e-12


def overlap_report(phat: np.ndarray, clip: float) -> OverlapReport:
    """Summarize each bin's propensity distribution and flag sparse bins.

    A warning fires for any bin where more than 1% of rows sit at the
    clip floor.
    """
    phat = np.asarray(phat, dtype=np.float64)
    n, k = phat.shape
    floor = clip_floor(clip)
    bins: list[dict] = []
    warns: list[str] = []
    for j in range(k):
        col = phat[:, j]
        at_floor = int((col <= floor).sum())
        qs = np.quantile(col, _QUANTILES)
        bins.append({"bin": j, "min": float(col.min()),
                     "max": float(col.max()),
                     "quantiles": {f"q{int(q * 100):02d}": float(v)
                                   for q, v in zip(_QUANTILES, qs)},
                     "n_at_clip_floor": at_floor, "n": n})
        if at_floor > 0.01 * n:
            warns.append(f"diagnostics: bin {j} has {at_floor}/{n} rows at "
                         f"the clip floor; overlap is weak")
    return OverlapReport(bins=tuple(bins), clip=clip, warnings=tuple(warns))


@dataclass(frozen=True)
class DoseResponsePayload:
    """Plot-ready dose-response tables: curve, bin-to-bin effects, masses."""

    curve: tuple[dict, ...]
    effects: tuple[dict, ...]
    masses: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {"curve": list(self.curve), "effects": list(self.effects),
                "masses": list(self.masses)}

    def write_csv(self, prefix: str) -> list[str]:
        """Write <prefix>_curve.csv, _effects.csv, _masses.csv."""
        paths = []
        for name, rows in (("curve", self.curve), ("effects", self.effects),
                           ("masses", self.masses)):
            path = f"{prefix}_{name}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
                writer.writeheader()
                writer.writerows(rows)
            paths.append(path)
        return paths


def dose_response_export(means: CounterfactualMeans,
                         partition: BinPartition) -> DoseResponsePayload:
    """Aligned tables for the dose-response curve, effects, and masses."""
    n = means.n
    curve = tuple({"bin": k, "psi": float(means.psi[k]),
                   "se": float(means.se[k])}
                  for k in range(partition.n_bins))
    effects = []
    for k in range(partition.n_bins - 1):
        diff = means.influence[:, k + 1] - means.influence[:, k]
        effects.append({"from_bin": k, "to_bin": k + 1,
                        "effect": float(diff.mean()),
                        "se": float(diff.std(ddof=1) / np.sqrt(n))})
    masses = tuple({"bin": k, "mass": float(partition.masses[k])}
                   for k in range(partition.n_bins))
    return DoseResponsePayload(curve=curve, effects=tuple(effects),
                               masses=masses)
