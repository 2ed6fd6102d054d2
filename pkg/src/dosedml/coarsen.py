"""Treatment binning and the coarsened estimators.

Bins are half-open [t_k, t_{k+1}) with the last bin closed, so every
observed treatment value lands in exactly one bin.  Bin weights follow
the lower-segment convention: w_k = mass_k / (1 - mass_K) for k < K and
w_K = 0, i.e. the top bin only ever appears as the destination of a
bin-to-bin increment.

Estimators:

* `coarsened_rorr` — OLS of outcome residuals on propensity-residualized
  bin indicators (first bin omitted), aggregated with the w_k weights.
* `aipw_bin_means` + `aipw_acd` / `aipw_aie` — doubly robust
  counterfactual bin means, differenced into an average-derivative or
  average-increment estimate with influence-function standard errors.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import ObservationTable
from .errors import (
    ConfigError,
    DegenerateTreatmentError,
    GapError,
    NumericError,
    PartitionError,
    RankError,
)
from .nuisance import LearnerSpec, NuisanceFit, cross_fit, fit_insample
from .rorr import Z95, residualize

PARTITION_KINDS = ("equal_width", "quantile", "zero_plus_quantiles",
                   "unit_integer")


@dataclass(frozen=True)
class BinPartition:
    """A binning of the treatment axis plus its empirical masses.

    edges has length K+1; midpoints, lengths, masses and weights have
    length K.  masses sum to 1 and every bin is nonempty in the data the
    partition was built from.
    """

    edges: np.ndarray
    kind: str
    midpoints: np.ndarray
    lengths: np.ndarray
    masses: np.ndarray
    weights: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def assign(self, t) -> np.ndarray:
        """Bin index for each value; values at the top edge go to the last bin."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.edges[1:-1], t, side="right")
        return np.clip(idx, 0, self.n_bins - 1)

    def indicator_matrix(self, t) -> np.ndarray:
        d = np.zeros((len(t), self.n_bins))
        d[np.arange(len(t)), self.assign(t)] = 1.0
        return d

    def summary(self) -> dict:
        return {"kind": self.kind, "k": self.n_bins,
                "edges": [float(e) for e in self.edges],
                "masses": [float(m) for m in self.masses],
                "weights": [float(w) for w in self.weights]}


def _finalize(edges: np.ndarray, kind: str, t: np.ndarray) -> BinPartition:
    edges = np.asarray(edges, dtype=np.float64)
    if len(edges) < 3:
        raise PartitionError("coarsen: partition collapsed below K=2")
    if not np.all(np.diff(edges) > 0):
        raise PartitionError("coarsen: bin edges must be strictly ascending")
    k = len(edges) - 1
    idx = np.searchsorted(edges[1:-1], t, side="right")
    counts = np.bincount(idx, minlength=k)
    if counts.min() == 0:
        empty = int(np.flatnonzero(counts == 0)[0])
        raise PartitionError(f"coarsen: bin {empty} is empty")
    masses = counts / counts.sum()
    weights = np.append(masses[:-1] / (1.0 - masses[-1]), 0.0)
    return BinPartition(edges=edges, kind=kind,
                        midpoints=(edges[:-1] + edges[1:]) / 2.0,
                        lengths=np.diff(edges), masses=masses,
                        weights=weights)


def _merged_quantiles(values: np.ndarray, n_edges: int, label: str) -> np.ndarray:
    qs = np.quantile(values, np.linspace(0.0, 1.0, n_edges))
    merged = np.unique(qs)
    if len(merged) < len(qs):
        warnings.warn(f"coarsen: duplicate {label} quantile edges merged; "
                      f"K reduced to {len(merged) - 1}", stacklevel=3)
    return merged


def make_partition(t, kind: str, k: int) -> BinPartition:
    """Build a K-bin partition of the observed treatment values.

    Kinds: equal_width on [min, max]; quantile with duplicate edges
    merged (reducing K, with a warning); zero_plus_quantiles puts exact
    zeros in bin 1 and quantile-splits the positive values;
    unit_integer makes one bin per observed integer value.
    """
    t = np.asarray(t, dtype=np.float64)
    if kind not in PARTITION_KINDS:
        raise ConfigError(f"coarsen: unknown partition kind {kind!r}")
    if kind != "unit_integer" and k < 2:
        raise ConfigError("coarsen: need K >= 2")
    lo, hi = float(t.min()), float(t.max())
    if kind == "equal_width":
        if hi <= lo:
            raise PartitionError("coarsen: treatment has a single value")
        edges = np.linspace(lo, hi, k + 1)
    elif kind == "quantile":
        edges = _merged_quantiles(t, k + 1, "treatment")
    elif kind == "zero_plus_quantiles":
        if lo < 0:
            raise PartitionError("coarsen: zero_plus_quantiles needs t >= 0")
        pos = t[t > 0]
        if not (t == 0).any() or len(np.unique(pos)) < k - 1:
            raise PartitionError(
                "coarsen: zero_plus_quantiles needs zeros and at least "
                f"{k - 1} distinct positive values")
        inner = _merged_quantiles(pos, k, "positive-part")
        edges = np.concatenate([[0.0], inner])
    else:  # unit_integer
        if not np.all(t == np.rint(t)):
            raise PartitionError(
                "coarsen: unit_integer needs integer-valued treatment")
        values = np.unique(t)
        edges = np.append(values, values[-1] + 1.0)
    return _finalize(edges, kind, t)


def choose_k(n: int, d: float = 2.0) -> int:
    """Bin count from the MSE-rate rule, floored at 2.

    With nuisance errors of order n^{-1/d}: K ~ n^{1/6} when d < 2 (the
    variance term dominates) and K ~ n^{1/(3d+1)} otherwise; d = 2 gives
    the n^{1/7} default.
    """
    if n < 2:
        raise ConfigError("coarsen: need n >= 2")
    if d <= 0:
        raise ConfigError("coarsen: need d > 0")
    exponent = 1.0 / 6.0 if d < 2 else 1.0 / (3.0 * d + 1.0)
    return max(2, int(round(n ** exponent)))


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with its uncertainty and provenance metadata."""

    estimand: str
    estimate: float
    se: float
    ci95: tuple[float, float]
    n: int
    partition: dict | None = None
    nuisance: dict | None = None
    clip: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"estimand": self.estimand, "estimate": self.estimate,
               "se": self.se, "ci95": list(self.ci95), "n": self.n}
        if self.partition is not None:
            out["partition"] = self.partition
        if self.nuisance is not None:
            out["nuisance"] = self.nuisance
        if self.clip is not None:
            out["clip"] = self.clip
        out.update(self.extra)
        return out


def _report(estimand, estimate, se, n, partition=None, nuisance=None,
            clip=None, extra=None) -> EstimateReport:
    return EstimateReport(
        estimand=estimand, estimate=float(estimate), se=float(se),
        ci95=(float(estimate - Z95 * se), float(estimate + Z95 * se)),
        n=n, partition=partition, nuisance=nuisance, clip=clip,
        extra=extra or {})


# ---------------------------------------------------------------------------
# Coarsened RORR


def coarsened_rorr(table: ObservationTable, partition: BinPartition,
                   nuisance: NuisanceFit, weights=None) -> EstimateReport:
    """OLS of outcome residuals on residualized bin indicators.

    The first bin is omitted to avoid multicollinearity; the reported
    estimate is sum_k w_k beta_{k+1} with the partition's lower-segment
    weights (or explicit `weights`).  The se comes from the delta method
    on the HC1 joint covariance of the coefficient vector.
    """
    if nuisance.ghat is None or nuisance.phat is None:
        raise ConfigError("coarsen: coarsened_rorr needs ghat and phat")
    k = partition.n_bins
    w = partition.weights[:-1] if weights is None \
        else np.asarray(weights, dtype=np.float64)[:k - 1]
    y_res = residualize(table.y, nuisance.ghat)
    d = partition.indicator_matrix(table.t)[:, 1:] - nuisance.phat[:, 1:]
    d = d - d.mean(axis=0, keepdims=True)
    n = table.n
    gram = d.T @ d
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise RankError("coarsen: residualized bin indicators are collinear")
    beta = np.linalg.solve(gram, d.T @ y_res)
    resid = y_res - d @ beta
    bread = np.linalg.inv(gram)
    meat = d.T @ (d * resid[:, None] ** 2)
    cov = bread @ meat @ bread * (n / max(n - (k - 1), 1))
    estimate = float(w @ beta)
    se = float(np.sqrt(w @ cov @ w))
    return _report(
        "CoarsenedRORR", estimate, se, n, partition=partition.summary(),
        extra={"coefficients": [float(b) for b in beta]})


@dataclass(frozen=True)
class BinaryCutPlim:
    """Closed-form plim of the K=2 coarsened RORR over discrete strata.

    upsilon are the normalized cut-variance weights
    p2(1-p2)/E[p2(1-p2)]; gaps are the per-stratum above-vs-below
    contrasts in E[f(T)] that the weights average.
    """

    value: float
    upsilon: tuple[float, ...]
    gaps: tuple[float, ...]


def coarsened_rorr_binary_plim(pi, p2, mean_below, mean_above) -> BinaryCutPlim:
    """Closed form for the binarized (K=2) coarsened RORR coefficient.

    pi: stratum probabilities; p2: per-stratum probability of landing
    above the cut; mean_below/mean_above: per-stratum conditional means
    of f(T) below/above the cut.
    """
    pi = np.asarray(pi, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    gaps = np.asarray(mean_above, dtype=np.float64) \
        - np.asarray(mean_below, dtype=np.float64)
    var = p2 * (1.0 - p2)
    denom = float(pi @ var)
    if denom <= 0.0:
        raise DegenerateTreatmentError(
            "coarsen: the cut is deterministic in every stratum")
    upsilon = var / denom
    return BinaryCutPlim(value=float(pi @ (upsilon * gaps)),
                         upsilon=tuple(float(u) for u in upsilon),
                         gaps=tuple(float(g) for g in gaps))


# ---------------------------------------------------------------------------
# Coarsened AIPW


@dataclass(frozen=True)
class CounterfactualMeans:
    """AIPW counterfactual bin means with per-unit influence values.

    psi[k] is the mean of influence column k; se[k] its sample sd over
    sqrt(n).  Keeping the full influence matrix lets downstream
    contrasts account for cross-bin covariance exactly.
    """

    psi: np.ndarray
    influence: np.ndarray
    se: np.ndarray

    @property
    def n(self) -> int:
        return self.influence.shape[0]


def aipw_bin_means(table: ObservationTable, partition: BinPartition,
                   phat: np.ndarray, mhat: np.ndarray) -> CounterfactualMeans:
    """Doubly robust counterfactual mean for every bin.

    influence[i, k] = 1(T_i in S_k)/p_k(X_i) * (Y_i - m_k(X_i)) + m_k(X_i).
    Propensities must be clipped upstream; nonpositive entries are an
    internal invariant violation.
    """
    phat = np.asarray(phat, dtype=np.float64)
    mhat = np.asarray(mhat, dtype=np.float64)
    k = partition.n_bins
    if phat.shape != (table.n, k) or mhat.shape != (table.n, k):
        raise ConfigError("coarsen: phat/mhat must be n x K")
    if not np.isfinite(phat).all() or phat.min() <= 0.0:
        raise NumericError(
            "coarsen: propensity at or below zero; clip upstream")
    d = partition.indicator_matrix(table.t)
    influence = d / phat * (table.y[:, None] - mhat) + mhat
    psi = influence.mean(axis=0)
    se = influence.std(axis=0, ddof=1) / np.sqrt(table.n)
    return CounterfactualMeans(psi=psi, influence=influence, se=se)


def _weighted_differences(means: CounterfactualMeans, partition: BinPartition,
                          denominators: np.ndarray) -> tuple[float, float]:
    w = partition.weights[:-1]
    scale = w / denominators
    unit = means.influence[:, 1:] @ scale - means.influence[:, :-1] @ scale
    estimate = float(unit.mean())
    se = float(unit.std(ddof=1) / np.sqrt(means.n))
    return estimate, se


def aipw_acd(means: CounterfactualMeans,
             partition: BinPartition) -> EstimateReport:
    """Average causal derivative from bin means.

    Piecewise-linear slope between adjacent bin midpoints, averaged with
    the lower-segment weights; se aggregates the per-unit influence
    values so cross-bin covariances are respected.
    """
    gaps = np.diff(partition.midpoints)
    if (gaps <= 0).any():
        raise NumericError("coarsen: bin midpoints must be strictly increasing")
    estimate, se = _weighted_differences(means, partition, gaps)
    return _report("AIPW_ACD", estimate, se, means.n,
                   partition=partition.summary())


def aipw_aie(means: CounterfactualMeans,
             partition: BinPartition) -> EstimateReport:
    """Average incremental effect for integer treatments.

    Requires a unit_integer partition over consecutive observed values;
    bin-to-bin differences are unit increments, so no midpoint division.
    """
    if partition.kind != "unit_integer":
        raise ConfigError("coarsen: AIE needs a unit_integer partition")
    values = partition.edges[:-1]
    if not np.all(np.diff(values) == 1):
        observed = set(int(v) for v in values)
        missing = sorted(set(range(int(values[0]), int(values[-1]) + 1))
                         - observed)
        raise GapError(f"coarsen: integer treatment support has gaps at {missing}")
    estimate, se = _weighted_differences(
        means, partition, np.ones(partition.n_bins - 1))
    return _report("AIPW_AIE", estimate, se, means.n,
                   partition=partition.summary())


# ---------------------------------------------------------------------------
# End-to-end pipelines (shared by the CLI and tests)


def _nuisances(table, n_folds, learner, targets, partition) -> NuisanceFit:
    if n_folds and n_folds >= 2:
        return cross_fit(table, n_folds, learner, targets=targets,
                         partition=partition)
    return fit_insample(table, learner, targets=targets, partition=partition)


def coarsened_rorr_pipeline(table: ObservationTable, partition: BinPartition,
                            learner: LearnerSpec,
                            n_folds: int = 5) -> EstimateReport:
    """Nuisances (cross-fit when n_folds >= 2), then coarsened RORR."""
    fit = _nuisances(table, n_folds, learner, ("g", "p"), partition)
    report = coarsened_rorr(table, partition, fit)
    return dataclasses.replace(report, clip=learner.clip,
                               nuisance=dict(learner.to_dict(), folds=n_folds))


def aipw_pipeline(table: ObservationTable, partition: BinPartition,
                  learner: LearnerSpec, estimand: str = "acd",
                  n_folds: int = 5,
                  ) -> tuple[EstimateReport, CounterfactualMeans]:
    """Nuisances, AIPW bin means, then the requested aggregate estimand."""
    if estimand not in ("acd", "aie"):
        raise ConfigError(f"coarsen: unknown estimand {estimand!r}")
    fit = _nuisances(table, n_folds, learner, ("m", "p"), partition)
    means = aipw_bin_means(table, partition, fit.phat, fit.mhat)
    report = aipw_acd(means, partition) if estimand == "acd" \
        else aipw_aie(means, partition)
    report = dataclasses.replace(report, clip=learner.clip,
                                 nuisance=dict(learner.to_dict(), folds=n_folds))
    return report, means
