"""Nuisance function estimation: learners and cross-fitting.

Two learner families cover the package's needs without external ML
runtimes:

* ``stratum_mean`` — exact conditional means (or class frequencies) over
  discrete covariate patterns.  On fully categorical covariates this is
  the exact group-by oracle, which is what the simulation tests lean on.
* ``boosted_stumps`` — squared-loss gradient boosting with depth-1 trees
  over histogrammed features, with the number of rounds optionally chosen
  on a held-out validation slice.

Cross-fitting trains per-fold models on the fold's complement and merges
predictions in fold-index order, so output is deterministic given
(seed, n, n_folds) regardless of how the per-fold fits are scheduled.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import FoldAssignment, ObservationTable, make_folds
from .errors import ClassSupportError, ConfigError, SparseCellError

_MAX_BINS = 256

LEARNER_KINDS = ("stratum_mean", "boosted_stumps")


@dataclass(frozen=True)
class LearnerSpec:
    """Configuration for a nuisance learner.

    ``clip`` is the propensity floor/ceiling applied to multiclass
    probabilities before renormalization.
    """

    kind: str = "boosted_stumps"
    rounds: int = 200
    learning_rate: float = 0.1
    validation_fraction: float = 0.2
    seed: int = 0
    clip: float = 1e-3

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ConfigError(f"nuisance: unknown learner kind {self.kind!r}")
        if self.rounds < 1:
            raise ConfigError("nuisance: rounds must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("nuisance: learning_rate must be in (0, 1]")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("nuisance: validation_fraction must be in [0, 1)")
        if not 0.0 < self.clip < 0.5:
            raise ConfigError("nuisance: clip must be in (0, 0.5)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def feature_matrix(table: ObservationTable) -> np.ndarray:
    """Numeric covariates followed by categorical codes, as one float matrix."""
    return np.column_stack([table.x_num, table.x_cat.astype(np.float64)]) \
        if (table.x_num.shape[1] + table.x_cat.shape[1]) \
        else np.zeros((table.n, 1))


def clip_probabilities(p: np.ndarray, clip: float) -> np.ndarray:
    """Clip each probability into [clip, 1-clip], then renormalize rows.

    After renormalization every entry is at least clip / (1 + K*clip).
    """
    q = np.clip(p, clip, 1.0 - clip)
    return q / q.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Exact per-stratum learners (discrete covariates)


def _check_integral(x: np.ndarray) -> np.ndarray:
    xi = np.asarray(x)
    if xi.ndim == 1:
        xi = xi.reshape(-1, 1)
    rounded = np.rint(xi)
    if not np.all(xi == rounded):
        raise ConfigError(
            "nuisance: stratum_mean requires all-categorical (integer) covariates")
    return rounded.astype(np.int64)


class _StratumIndex:
    """Encodes discrete covariate rows to integer keys for O(log u) lookup."""

    def __init__(self, x: np.ndarray):
        self._base = x.max(axis=0) + 1
        self._strides = np.concatenate(
            [np.cumprod(self._base[::-1])[::-1][1:], [1]]).astype(np.int64)
        self.train_keys = x @ self._strides
        self.unique_keys, self.inverse = np.unique(self.train_keys,
                                                   return_inverse=True)

    def lookup(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (slot, matched) for each query row."""
        in_range = (x < self._base).all(axis=1) & (x >= 0).all(axis=1)
        keys = np.where(in_range, x @ self._strides, -1)
        pos = np.searchsorted(self.unique_keys, keys)
        pos = np.minimum(pos, len(self.unique_keys) - 1)
        matched = in_range & (self.unique_keys[pos] == keys)
        return pos, matched


class StratumMeanRegressor:
    """Exact conditional sample means over discrete covariate patterns.

    Unseen patterns at predict time fall back to the global training mean
    (with a warning), matching the behavior of a saturated regression.
    """

    def fit(self, x, target) -> "StratumMeanRegressor":
        xi = _check_integral(x)
        y = np.asarray(target, dtype=np.float64)
        self._index = _StratumIndex(xi)
        counts = np.bincount(self._index.inverse)
        sums = np.bincount(self._index.inverse, weights=y)
        self._means = sums / counts
        self._global = float(y.mean())
        return self

    def predict(self, x) -> np.ndarray:
        xi = _check_integral(x)
        slot, matched = self._index.lookup(xi)
        if not matched.all():
            warnings.warn("nuisance: unseen stratum at predict time; "
                          "falling back to global mean", stacklevel=2)
        return np.where(matched, self._means[slot], self._global)


class StratumMeanClassifier:
    """Exact per-stratum class frequencies, clipped and renormalized."""

    def fit(self, x, labels, n_classes: int, clip: float) -> "StratumMeanClassifier":
        xi = _check_integral(x)
        lab = np.asarray(labels, dtype=np.int64)
        support = np.bincount(lab, minlength=n_classes)
        if support.min() == 0:
            empty = int(np.flatnonzero(support == 0)[0])
            raise ClassSupportError(
                f"nuisance: class {empty} has no training rows")
        self._index = _StratumIndex(xi)
        u = len(self._index.unique_keys)
        flat = np.bincount(self._index.inverse * n_classes + lab,
                           minlength=u * n_classes).reshape(u, n_classes)
        self._freq = flat / flat.sum(axis=1, keepdims=True)
        self._global = support / support.sum()
        self._clip = clip
        return self

    def predict_proba(self, x) -> np.ndarray:
        xi = _check_integral(x)
        slot, matched = self._index.lookup(xi)
        if not matched.all():
            warnings.warn("nuisance: unseen stratum at predict time; "
                          "falling back to marginal frequencies", stacklevel=2)
        p = np.where(matched[:, None], self._freq[slot], self._global[None, :])
        return clip_probabilities(p, self._clip)


# ---------------------------------------------------------------------------
# Histogram-based boosted stumps


def _split_candidates(col: np.ndarray) -> np.ndarray:
    u = np.unique(col)
    if len(u) > _MAX_BINS:
        u = np.unique(np.quantile(col, np.linspace(0.0, 1.0, _MAX_BINS)))
    return u


class BoostedStumpRegressor:
    """Squared-loss gradient boosting with depth-1 trees.

    Split search runs over per-feature histograms (at most 256 candidate
    thresholds from training quantiles), so each round is O(n) per
    feature.  When ``validation_fraction`` > 0, the model trains on the
    remaining slice and the ensemble is truncated at the round with the
    lowest validation MSE.
    """

    def __init__(self, rounds: int = 200, learning_rate: float = 0.1,
                 validation_fraction: float = 0.2, seed: int = 0):
        self.rounds = rounds
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.train_mse_path_: list[float] = []

    def fit(self, x, target) -> "BoostedStumpRegressor":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.asarray(target, dtype=np.float64)
        n = len(y)

        x_val = y_val = None
        if self.validation_fraction > 0:
            n_val = int(round(self.validation_fraction * n))
            if n_val >= 1 and n - n_val >= 2:
                perm = np.random.default_rng(self.seed).permutation(n)
                val_idx, tr_idx = perm[:n_val], perm[n_val:]
                x_val, y_val = x[val_idx], y[val_idx]
                x, y = x[tr_idx], y[tr_idx]
                n = len(y)

        n_feat = x.shape[1]
        cands = [_split_candidates(x[:, f]) for f in range(n_feat)]
        binned = [np.searchsorted(cands[f], x[:, f], side="left")
                  for f in range(n_feat)]
        counts = [np.bincount(binned[f], minlength=len(cands[f]) + 1)
                  for f in range(n_feat)]

        self.base_ = float(y.mean())
        fit_pred = np.full(n, self.base_)
        resid = y - fit_pred
        stumps: list[tuple[int, float, float, float]] = []
        self.train_mse_path_ = []

        val_pred = None
        val_mse_path: list[float] = []
        if x_val is not None:
            val_binned = [np.searchsorted(cands[f], x_val[:, f], side="left")
                          for f in range(n_feat)]
            val_pred = np.full(len(y_val), self.base_)

        total_cnt = n
        for _ in range(self.rounds):
            best = None  # (score, feature, split_bin, left_mean, right_mean)
            for f in range(n_feat):
                m = len(cands[f])
                if m < 2:
                    continue
                sums = np.bincount(binned[f], weights=resid, minlength=m + 1)
                left_sum = np.cumsum(sums)[:m - 1]
                left_cnt = np.cumsum(counts[f])[:m - 1]
                right_sum = resid.sum() - left_sum
                right_cnt = total_cnt - left_cnt
                with np.errstate(divide="ignore", invalid="ignore"):
                    score = np.where(
                        (left_cnt > 0) & (right_cnt > 0),
                        left_sum ** 2 / left_cnt + right_sum ** 2 / right_cnt,
                        -np.inf)
                j = int(np.argmax(score))
                if best is None or score[j] > best[0]:
                    best = (float(score[j]), f, j,
                            left_sum[j] / max(left_cnt[j], 1),
                            right_sum[j] / max(right_cnt[j], 1))
            if best is None:
                break
            score, f, j, left_mean, right_mean = best
            parent = resid.sum() ** 2 / total_cnt
            if score - parent <= 1e-12 * max(1.0, abs(parent)):
                break  # no split reduces squared loss
            lv = self.learning_rate * left_mean
            rv = self.learning_rate * right_mean
            threshold = float(cands[f][j])
            update = np.where(binned[f] <= j, lv, rv)
            fit_pred += update
            resid -= update
            stumps.append((f, threshold, lv, rv))
            self.train_mse_path_.append(float(np.mean(resid ** 2)))
            if val_pred is not None:
                val_pred += np.where(val_binned[f] <= j, lv, rv)
                val_mse_path.append(float(np.mean((y_val - val_pred) ** 2)))

        if val_mse_path:
            best_rounds = int(np.argmin(val_mse_path)) + 1
            stumps = stumps[:best_rounds]
            self.train_mse_path_ = self.train_mse_path_[:best_rounds]
        self.stumps_ = stumps
        return self

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        out = np.full(x.shape[0], self.base_)
        for f, threshold, lv, rv in self.stumps_:
            out += np.where(x[:, f] <= threshold, lv, rv)
        return out


class BoostedStumpClassifier:
    """One-vs-rest squared-loss boosting on class indicators.

    Per-class scores estimate class probabilities directly, so the
    probability vector is the clipped, renormalized score vector.  (A
    softmax over probability-scale scores would be miscalibrated: with
    labels independent of features it would not reproduce the marginal
    class frequencies.)
    """

    def __init__(self, rounds: int, learning_rate: float,
                 validation_fraction: float, seed: int, clip: float):
        self.rounds = rounds
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.clip = clip

    def fit(self, x, labels, n_classes: int) -> "BoostedStumpClassifier":
        lab = np.asarray(labels, dtype=np.int64)
        support = np.bincount(lab, minlength=n_classes)
        if support.min() == 0:
            empty = int(np.flatnonzero(support == 0)[0])
            raise ClassSupportError(
                f"nuisance: class {empty} has no training rows")
        self._models = []
        for k in range(n_classes):
            model = BoostedStumpRegressor(
                rounds=self.rounds, learning_rate=self.learning_rate,
                validation_fraction=self.validation_fraction,
                seed=self.seed + 31 * k)
            model.fit(x, (lab == k).astype(np.float64))
            self._models.append(model)
        return self

    def predict_proba(self, x) -> np.ndarray:
        scores = np.column_stack([m.predict(x) for m in self._models])
        scores = np.maximum(scores, 0.0)
        rowsum = scores.sum(axis=1, keepdims=True)
        uniform = np.full_like(scores, 1.0 / scores.shape[1])
        p = np.where(rowsum > 0, scores / np.where(rowsum > 0, rowsum, 1.0),
                     uniform)
        return clip_probabilities(p, self.clip)


# ---------------------------------------------------------------------------
# Fit dispatch and cross-fitting


def fit_regression(features, target, spec: LearnerSpec):
    """Fit a regression predictor per the learner spec."""
    if len(np.atleast_1d(target)) < 1:
        raise ConfigError("nuisance: need at least 1 training row")
    if spec.kind == "stratum_mean":
        return StratumMeanRegressor().fit(features, target)
    return BoostedStumpRegressor(
        rounds=spec.rounds, learning_rate=spec.learning_rate,
        validation_fraction=spec.validation_fraction,
        seed=spec.seed).fit(features, target)


def fit_multiclass(features, labels, spec: LearnerSpec,
                   n_classes: int | None = None):
    """Fit a multiclass propensity model per the learner spec."""
    lab = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(lab.max()) + 1
    if lab.min() < 0 or lab.max() >= n_classes:
        raise ConfigError("nuisance: labels must lie in 0..K-1")
    if spec.kind == "stratum_mean":
        return StratumMeanClassifier().fit(features, lab, n_classes, spec.clip)
    return BoostedStumpClassifier(
        rounds=spec.rounds, learning_rate=spec.learning_rate,
        validation_fraction=spec.validation_fraction,
        seed=spec.seed, clip=spec.clip).fit(features, lab, n_classes)


@dataclass
class NuisanceFit:
    """Out-of-fold nuisance predictions.

    ghat/hhat are E[Y|X] and E[T|X]; mhat[:, k] is the bin-conditional
    outcome mean m_k(X); phat[:, k] the clipped bin propensity p_k(X).
    Every prediction for a row comes from models that never saw that
    row's fold (or from in-sample fits when folds is None).
    """

    ghat: np.ndarray | None = None
    hhat: np.ndarray | None = None
    mhat: np.ndarray | None = None
    phat: np.ndarray | None = None
    folds: FoldAssignment | None = None


def _fold_seed(base: int, fold: int, salt: int) -> int:
    return int(np.random.SeedSequence((base, fold, salt)).generate_state(1)[0])


def _stratum_features(table: ObservationTable, spec: LearnerSpec) -> np.ndarray:
    if spec.kind == "stratum_mean":
        if table.x_num.shape[1] > 0:
            raise ConfigError(
                "nuisance: stratum_mean requires all-categorical covariates")
        if table.x_cat.shape[1] == 0:
            raise ConfigError("nuisance: stratum_mean needs categorical covariates")
        return table.x_cat.astype(np.float64)
    return feature_matrix(table)


def _fit_block(table, features, train, spec, targets, partition, fold, out):
    """Fit requested targets on `train` rows and predict the complement."""
    test = ~train
    ft, fs = features[train], features[test]
    if "g" in targets:
        model = fit_regression(
            ft, table.y[train],
            dataclasses.replace(spec, seed=_fold_seed(spec.seed, fold, 1)))
        out.ghat[test] = model.predict(fs)
    if "h" in targets:
        model = fit_regression(
            ft, table.t[train],
            dataclasses.replace(spec, seed=_fold_seed(spec.seed, fold, 2)))
        out.hhat[test] = model.predict(fs)
    if "p" in targets or "m" in targets:
        labels = partition.assign(table.t)
    if "p" in targets:
        model = fit_multiclass(
            ft, labels[train],
            dataclasses.replace(spec, seed=_fold_seed(spec.seed, fold, 3)),
            n_classes=partition.n_bins)
        out.phat[test] = model.predict_proba(fs)
    if "m" in targets:
        for k in range(partition.n_bins):
            cell = train & (labels == k)
            if not cell.any():
                raise SparseCellError(
                    f"nuisance: no training rows for fold {fold}, bin {k}")
            model = fit_regression(
                features[cell], table.y[cell],
                dataclasses.replace(spec,
                                    seed=_fold_seed(spec.seed, fold, 4 + k)))
            out.mhat[test, k] = model.predict(fs)


def _empty_fit(table, targets, partition, folds) -> NuisanceFit:
    n = table.n
    fit = NuisanceFit(folds=folds)
    if "g" in targets:
        fit.ghat = np.empty(n)
    if "h" in targets:
        fit.hhat = np.empty(n)
    if ("m" in targets or "p" in targets) and partition is None:
        raise ConfigError("nuisance: targets m/p require a bin partition")
    if "m" in targets:
        fit.mhat = np.empty((n, partition.n_bins))
    if "p" in targets:
        fit.phat = np.empty((n, partition.n_bins))
    return fit


def cross_fit(table: ObservationTable, folds: FoldAssignment | int,
              spec: LearnerSpec, targets=("g", "h"),
              partition=None) -> NuisanceFit:
    """Cross-fit the requested nuisance targets.

    Each fold's rows are predicted by models trained only on the other
    folds.  m_k models train only on complement rows with T in bin k;
    an empty (fold, bin) training cell raises SparseCellError.
    """
    if isinstance(folds, int):
        folds = make_folds(table.n, folds, spec.seed)
    features = _stratum_features(table, spec)
    out = _empty_fit(table, targets, partition, folds)
    for fold in range(folds.n_folds):
        test = folds.test_mask(fold)
        _fit_block(table, features, ~test, spec, targets, partition, fold, out)
    return out


def fit_insample(table: ObservationTable, spec: LearnerSpec,
                 targets=("g", "h"), partition=None) -> NuisanceFit:
    """Fit nuisances on the full sample and predict in-sample.

    Appropriate for exact low-dimensional learners (stratum_mean on
    discrete covariates), where overfitting bias is not a concern and
    cross-fitting would starve sparse bins of training rows.
    """
    x = _stratum_features(table, spec)
    out = _empty_fit(table, targets, partition, None)
    if "g" in targets:
        out.ghat[:] = fit_regression(x, table.y, spec).predict(x)
    if "h" in targets:
        out.hhat[:] = fit_regression(x, table.t, spec).predict(x)
    if "p" in targets or "m" in targets:
        labels = partition.assign(table.t)
    if "p" in targets:
        out.phat[:] = fit_multiclass(x, labels, spec,
                                     n_classes=partition.n_bins).predict_proba(x)
    if "m" in targets:
        for k in range(partition.n_bins):
            cell = labels == k
            if not cell.any():
                raise SparseCellError(f"nuisance: no rows in bin {k}")
            out.mhat[:, k] = fit_regression(x[cell], table.y[cell],
                                            spec).predict(x)
    return out
