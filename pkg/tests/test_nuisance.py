import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dosedml.coarsen import make_partition
from dosedml.dataset import make_folds, make_table
from dosedml.errors import ClassSupportError, ConfigError, SparseCellError
from dosedml.nuisance import (
    BoostedStumpRegressor,
    LearnerSpec,
    StratumMeanRegressor,
    clip_probabilities,
    cross_fit,
    fit_insample,
    fit_multiclass,
    fit_regression,
)

STRATUM = LearnerSpec(kind="stratum_mean", seed=0)


class TestStratumMean:
    def test_exact_group_means(self):
        x = np.array([[0], [0], [1], [1]])
        y = np.array([1.0, 1.0, 3.0, 3.0])
        model = StratumMeanRegressor().fit(x, y)
        np.testing.assert_array_equal(model.predict([[0], [1]]), [1.0, 3.0])

    def test_matches_brute_force_groupby(self):
        rng = np.random.default_rng(5)
        x = rng.integers(0, 4, (500, 2))
        y = rng.standard_normal(500)
        model = StratumMeanRegressor().fit(x, y)
        pred = model.predict(x)
        for i in range(500):
            mask = (x == x[i]).all(axis=1)
            assert abs(pred[i] - y[mask].mean()) < 1e-12

    def test_unseen_stratum_falls_back_with_warning(self):
        model = StratumMeanRegressor().fit([[0], [1]], [1.0, 3.0])
        with pytest.warns(UserWarning, match="global mean"):
            out = model.predict([[7]])
        assert out[0] == 2.0

    def test_requires_integer_covariates(self):
        with pytest.raises(ConfigError):
            StratumMeanRegressor().fit([[0.5], [1.0]], [1.0, 2.0])


class TestBoostedStumps:
    def test_fits_step_function(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (1000, 1))
        y = (x[:, 0] > 0).astype(float)
        model = BoostedStumpRegressor(rounds=60, learning_rate=0.3,
                                      validation_fraction=0.0, seed=1).fit(x, y)
        # oracle: the direct threshold rule
        oracle = (x[:, 0] > 0).astype(float)
        assert np.mean((model.predict(x) - oracle) ** 2) < 0.01

    def test_constant_target(self):
        x = np.arange(20, dtype=float).reshape(-1, 1)
        model = BoostedStumpRegressor(rounds=50, validation_fraction=0.0,
                                      seed=0).fit(x, np.full(20, 3.25))
        np.testing.assert_allclose(model.predict([[100.0], [-5.0]]), 3.25)

    def test_training_loss_non_increasing(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((400, 3))
        y = np.sin(x[:, 0]) + 0.5 * rng.standard_normal(400)
        model = BoostedStumpRegressor(rounds=120, learning_rate=0.2,
                                      validation_fraction=0.0, seed=0).fit(x, y)
        path = np.asarray(model.train_mse_path_)
        assert np.all(np.diff(path) <= 1e-12)

    def test_validation_truncates_rounds(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((600, 1))
        y = rng.standard_normal(600)  # pure noise: early stopping should bite
        model = BoostedStumpRegressor(rounds=300, learning_rate=0.3,
                                      validation_fraction=0.25, seed=4).fit(x, y)
        assert len(model.stumps_) < 300


class TestMulticlass:
    def test_stratum_frequencies(self):
        x = np.zeros((3, 1), dtype=int)
        model = fit_multiclass(x, [0, 0, 1], STRATUM, n_classes=2)
        p = model.predict_proba(x)
        np.testing.assert_allclose(p[0], [2 / 3, 1 / 3], atol=1e-9)

    def test_independent_labels_match_marginals(self):
        rng = np.random.default_rng(11)
        n = 10000
        x = rng.standard_normal((n, 2))
        labels = rng.choice(3, size=n, p=[0.5, 0.3, 0.2])
        spec = LearnerSpec(kind="boosted_stumps", rounds=60,
                           validation_fraction=0.25, seed=2)
        model = fit_multiclass(x, labels, spec, n_classes=3)
        p = model.predict_proba(x).mean(axis=0)
        marginal = np.bincount(labels, minlength=3) / n
        assert np.max(np.abs(p - marginal)) < 0.02

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((300, 2))
        labels = rng.integers(0, 4, 300)
        model = fit_multiclass(x, labels, LearnerSpec(rounds=20, seed=1),
                               n_classes=4)
        p = model.predict_proba(rng.standard_normal((50, 2)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_empty_class_errors(self):
        with pytest.raises(ClassSupportError):
            fit_multiclass(np.zeros((4, 1)), [0, 0, 1, 1],
                           LearnerSpec(rounds=5, seed=0), n_classes=3)


class TestClipProbabilities:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=2, max_value=8),
           st.integers(min_value=1, max_value=30),
           st.integers(min_value=0, max_value=2 ** 31))
    def test_invariants(self, k, n, seed):
        rng = np.random.default_rng(seed)
        raw = rng.dirichlet(np.full(k, 0.3), size=n)
        clip = 1e-3
        p = clip_probabilities(raw, clip)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert p.min() >= clip / (1.0 + k * clip) - 1e-15


def _discrete_table(n=600, seed=0, noise=1.0):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, n)
    t = rng.poisson(2.0 + 2.0 * x)
    y = 0.5 * t + x * 1.5 + noise * rng.standard_normal(n)
    return make_table(y, t.astype(float), x_cat=x)


class TestCrossFit:
    def test_fold_complement_means(self):
        table = _discrete_table()
        folds = make_folds(table.n, 2, seed=3)
        fit = cross_fit(table, folds, STRATUM, targets=("g",))
        mask0 = folds.test_mask(0)
        x = table.x_cat[:, 0]
        for j in range(3):
            rows = mask0 & (x == j)
            train = ~mask0 & (x == j)
            if rows.any() and train.any():
                expected = table.y[train].mean()
                np.testing.assert_allclose(fit.ghat[rows], expected)

    def test_out_of_fold_property(self):
        # predictions for fold j depend only on data outside fold j
        table = _discrete_table(seed=1)
        folds = make_folds(table.n, 3, seed=5)
        fit = cross_fit(table, folds, STRATUM, targets=("g", "h"))
        mask = folds.test_mask(1)
        y2 = table.y.copy()
        y2[mask] += 100.0  # perturb only fold-1 rows
        table2 = make_table(y2, table.t, x_cat=table.x_cat)
        fit2 = cross_fit(table2, folds, STRATUM, targets=("g", "h"))
        np.testing.assert_array_equal(fit.ghat[mask], fit2.ghat[mask])
        assert not np.allclose(fit.ghat[~mask], fit2.ghat[~mask])

    def test_differs_from_insample_on_noisy_target(self):
        table = _discrete_table(seed=2, noise=3.0)
        fit_cv = cross_fit(table, 2, STRATUM, targets=("g",))
        fit_in = fit_insample(table, STRATUM, targets=("g",))
        assert not np.allclose(fit_cv.ghat, fit_in.ghat)

    def test_deterministic(self):
        table = _discrete_table(seed=4)
        spec = LearnerSpec(kind="boosted_stumps", rounds=30, seed=9)
        # boosted stumps accept the categorical code as a numeric feature
        table = make_table(table.y, table.t,
                           x_num=table.x_cat.astype(float))
        a = cross_fit(table, 4, spec, targets=("g", "h"))
        b = cross_fit(table, 4, spec, targets=("g", "h"))
        np.testing.assert_array_equal(a.ghat, b.ghat)
        np.testing.assert_array_equal(a.hhat, b.hhat)

    def test_propensity_rows_normalized(self):
        table = _discrete_table(seed=6)
        partition = make_partition(table.t, "quantile", 3)
        fit = cross_fit(table, 3, STRATUM, targets=("p",), partition=partition)
        np.testing.assert_allclose(fit.phat.sum(axis=1), 1.0, atol=1e-6)
        assert fit.phat.min() > 0

    def test_sparse_cell_raises(self):
        # one lonely row in the top bin: its fold's complement is empty there
        y = np.arange(40, dtype=float)
        t = np.concatenate([np.zeros(39), [50.0]])
        table = make_table(y, t, x_cat=np.zeros(40, dtype=int))
        partition = make_partition(t, "unit_integer", 0)
        with pytest.raises(SparseCellError, match="bin 1"):
            cross_fit(table, 4, STRATUM, targets=("m",), partition=partition)

    def test_stratum_mean_rejects_numeric_covariates(self):
        rng = np.random.default_rng(0)
        table = make_table(rng.standard_normal(50), rng.standard_normal(50),
                           x_num=rng.standard_normal((50, 1)))
        with pytest.raises(ConfigError):
            cross_fit(table, 2, STRATUM, targets=("g",))


class TestFitRegressionDispatch:
    def test_boosted_spec_roundtrip(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((200, 1))
        y = x[:, 0] ** 2
        model = fit_regression(x, y, LearnerSpec(rounds=40, seed=3))
        assert isinstance(model, BoostedStumpRegressor)
        assert np.mean((model.predict(x) - y) ** 2) < np.var(y)

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            LearnerSpec(kind="neural_net")
        with pytest.raises(ConfigError):
            LearnerSpec(rounds=0)
        with pytest.raises(ConfigError):
            LearnerSpec(learning_rate=0.0)
        with pytest.raises(ConfigError):
            LearnerSpec(validation_fraction=1.0)
