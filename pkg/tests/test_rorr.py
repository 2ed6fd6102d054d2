import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dosedml.dataset import make_table
from dosedml.errors import DegenerateTreatmentError, ValidationError
from dosedml.nuisance import LearnerSpec
from dosedml.rorr import (
    DiscreteStrataModel,
    binary_bias,
    binary_rorr_plim,
    ols_slope,
    residualize,
    rorr_pipeline,
)

STRATUM = LearnerSpec(kind="stratum_mean", seed=0)


def _random_model(rng, j=None):
    j = j or rng.integers(2, 6)
    pi = rng.dirichlet(np.ones(j))
    h = rng.uniform(0.05, 0.95, j)
    theta = rng.uniform(-2.0, 2.0, j)
    return DiscreteStrataModel(pi=tuple(pi), h=tuple(h), theta=tuple(theta))


def _enumeration_plim(model):
    """Independent oracle: enumerate the (stratum, T) support directly."""
    pi = np.asarray(model.pi)
    h = np.asarray(model.h)
    theta = np.asarray(model.theta)
    num = den = 0.0
    for j in range(len(pi)):
        for t in (0.0, 1.0):
            prob = pi[j] * (h[j] if t == 1.0 else 1.0 - h[j])
            t_res = t - h[j]
            num += prob * t_res * (theta[j] * t_res)
            den += prob * t_res ** 2
    return num / den


def _sample_model(model, n, rng, noise=0.5):
    pi = np.asarray(model.pi)
    h = np.asarray(model.h)
    theta = np.asarray(model.theta)
    strata = rng.choice(len(pi), size=n, p=pi)
    t = (rng.random(n) < h[strata]).astype(float)
    g = np.linspace(-1.0, 1.0, len(pi))
    y = theta[strata] * t + g[strata] + noise * rng.standard_normal(n)
    return make_table(y, t, x_cat=strata)


class TestResidualize:
    def test_centered_difference(self):
        out = residualize([3.0, 4.0], [1.0, 1.0])
        np.testing.assert_allclose(out, [-0.5, 0.5])

    def test_exact_predictions_give_zeros(self):
        v = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(residualize(v, v), 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            residualize([1.0, 2.0], [1.0])

    def test_centering_preserves_slope(self):
        rng = np.random.default_rng(1)
        y_raw = rng.standard_normal(50) + 2.0
        t_raw = rng.standard_normal(50) - 1.0
        est = ols_slope(y_raw - y_raw.mean(), t_raw - t_raw.mean())
        design = np.column_stack([np.ones(50), t_raw])
        with_intercept = np.linalg.lstsq(design, y_raw, rcond=None)[0][1]
        assert abs(est.theta_hat - with_intercept) < 1e-10


class TestOlsSlope:
    def test_half_slope(self):
        est = ols_slope([-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0])
        assert est.theta_hat == pytest.approx(0.5)

    def test_perfect_fit_zero_se(self):
        t = np.array([-1.0, 0.5, 2.0, -1.5])
        est = ols_slope(2.0 * t, t)
        assert est.theta_hat == pytest.approx(2.0)
        assert est.se == pytest.approx(0.0, abs=1e-14)
        assert est.ci95 == pytest.approx((2.0, 2.0), abs=1e-13)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(7)
        t = rng.standard_normal(20)
        y = rng.standard_normal(20)
        est = ols_slope(y, t)
        assert abs(est.theta_hat - (t @ y) / (t @ t)) < 1e-12

    def test_degenerate_treatment(self):
        with pytest.raises(DegenerateTreatmentError):
            ols_slope([1.0, 2.0], [0.0, 0.0])


class TestBinaryPlim:
    def test_homogeneous_effects(self):
        model = DiscreteStrataModel(pi=(0.3, 0.7), h=(0.2, 0.6),
                                    theta=(1.2, 1.2))
        assert binary_rorr_plim(model) == pytest.approx(1.2)
        assert binary_bias(model) == pytest.approx(0.0, abs=1e-14)

    def test_worked_example(self):
        model = DiscreteStrataModel(pi=(0.5, 0.5), h=(0.1, 0.5),
                                    theta=(1.0, 2.0))
        assert binary_rorr_plim(model) == pytest.approx(0.295 / 0.17)
        assert binary_bias(model) == pytest.approx(0.295 / 0.17 - 1.5)

    def test_equal_h_gives_plain_mean(self):
        model = DiscreteStrataModel(pi=(0.25, 0.75), h=(0.4, 0.4),
                                    theta=(2.0, -1.0))
        expected = 0.25 * 2.0 + 0.75 * -1.0
        assert binary_rorr_plim(model) == pytest.approx(expected)
        assert binary_bias(model) == pytest.approx(0.0, abs=1e-14)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            model = _random_model(rng)
            assert abs(binary_rorr_plim(model)
                       - _enumeration_plim(model)) < 1e-12

    def test_bias_equals_weight_covariance(self):
        rng = np.random.default_rng(29)
        for _ in range(50):
            model = _random_model(rng)
            pi = np.asarray(model.pi)
            h = np.asarray(model.h)
            theta = np.asarray(model.theta)
            omega = h * (1 - h) / (pi @ (h * (1 - h)))
            cov = pi @ (omega * theta) - (pi @ omega) * (pi @ theta)
            assert abs(binary_bias(model) - cov) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31))
    def test_convexity_and_relabeling(self, seed):
        rng = np.random.default_rng(seed)
        model = _random_model(rng)
        plim = binary_rorr_plim(model)
        assert min(model.theta) - 1e-12 <= plim <= max(model.theta) + 1e-12
        perm = rng.permutation(len(model.pi))
        shuffled = DiscreteStrataModel(
            pi=tuple(np.asarray(model.pi)[perm]),
            h=tuple(np.asarray(model.h)[perm]),
            theta=tuple(np.asarray(model.theta)[perm]))
        assert binary_rorr_plim(shuffled) == pytest.approx(plim)

    def test_degenerate_model(self):
        model = DiscreteStrataModel(pi=(0.5, 0.5), h=(0.0, 1.0),
                                    theta=(1.0, 2.0))
        with pytest.raises(DegenerateTreatmentError):
            binary_rorr_plim(model)


class TestPipeline:
    def test_affine_recovery(self):
        # linear dose response: the slope is the target, small-n version
        from dosedml.simlab import PoissonCategoricalDGP, sample_dgp
        dgp = PoissonCategoricalDGP(pi=(0.5, 0.5), lam=(2.0, 6.0),
                                    f_kind="affine", f_intercept=0.5,
                                    f_slope=1.5, noise_sd=1.0, seed=21)
        table, _ = sample_dgp(dgp, 30000)
        est = rorr_pipeline(table, 5, STRATUM)
        assert abs(est.theta_hat - 1.5) < 3 * est.se

    def test_randomized_treatment_recovers_ate(self):
        # uniform random binary T: Cov(omega, theta) = 0, so plim = E[theta]
        rng = np.random.default_rng(17)
        model = DiscreteStrataModel(pi=(0.4, 0.6), h=(0.5, 0.5),
                                    theta=(1.0, 3.0))
        table = _sample_model(model, 40000, rng)
        est = rorr_pipeline(table, 5, STRATUM)
        ate = 0.4 * 1.0 + 0.6 * 3.0
        assert abs(est.theta_hat - ate) < 3 * est.se

    def test_confounded_matches_closed_form(self):
        rng = np.random.default_rng(31)
        model = DiscreteStrataModel(pi=(0.5, 0.5), h=(0.15, 0.7),
                                    theta=(0.5, 2.0))
        table = _sample_model(model, 50000, rng)
        est = rorr_pipeline(table, 5, STRATUM)
        assert abs(est.theta_hat - binary_rorr_plim(model)) < 3 * est.se
