"""Residuals-on-residuals regression and its binary-treatment oracles.

The estimator partials covariates out of outcome and treatment with
cross-fitted nuisance models, then regresses the centered outcome
residuals on the centered treatment residuals without an intercept.
Standard errors are HC1; nuisance noise is ignored, which is valid under
the usual DML rate conditions.

For binary treatments over discrete covariate strata the probability
limit has a closed form: a conditional-variance-weighted average of
per-stratum effects.  `binary_rorr_plim` and `binary_bias` expose it so
the sampling-based estimator can be checked against exact arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import FoldAssignment, ObservationTable
from .errors import DegenerateTreatmentError, ValidationError
from .nuisance import LearnerSpec, cross_fit

Z95 = 1.959963984540054  # two-sided 95% normal quantile


@dataclass(frozen=True)
class RorrEstimate:
    """Slope estimate with HC1 standard error and 95% CI."""

    theta_hat: float
    se: float
    ci95: tuple[float, float]
    n: int


def residualize(values, predictions) -> np.ndarray:
    """Elementwise residuals, re-centered to sample mean zero.

    Centering removes the finite-sample intercept that nuisance bias
    would otherwise leak into the no-intercept regression; it leaves the
    OLS slope identical to a with-intercept fit.
    """
    v = np.asarray(values, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if v.shape != p.shape:
        raise ValidationError(
            f"rorr: length mismatch {v.shape} vs {p.shape}")
    r = v - p
    return r - r.mean()


def ols_slope(y_res, t_res) -> RorrEstimate:
    """No-intercept OLS of outcome residuals on treatment residuals.

    se is the HC1 sandwich with small-sample factor n/(n-1).
    """
    y = np.asarray(y_res, dtype=np.float64)
    t = np.asarray(t_res, dtype=np.float64)
    if y.shape != t.shape:
        raise ValidationError(f"rorr: length mismatch {y.shape} vs {t.shape}")
    n = len(t)
    stt = float(t @ t)
    if stt <= 0.0:
        raise DegenerateTreatmentError(
            "rorr: treatment residuals have zero variation")
    theta = float(t @ y) / stt
    e = y - theta * t
    var = n / (n - 1) * float((t * t) @ (e * e)) / stt ** 2
    se = float(np.sqrt(var))
    return RorrEstimate(theta_hat=theta, se=se,
                        ci95=(theta - Z95 * se, theta + Z95 * se), n=n)


def rorr_pipeline(table: ObservationTable, folds: FoldAssignment | int,
                  learner: LearnerSpec) -> RorrEstimate:
    """Cross-fit E[Y|X] and E[T|X], residualize, and regress."""
    fit = cross_fit(table, folds, learner, targets=("g", "h"))
    y_res = residualize(table.y, fit.ghat)
    t_res = residualize(table.t, fit.hhat)
    return ols_slope(y_res, t_res)


@dataclass(frozen=True)
class DiscreteStrataModel:
    """Binary-treatment population over J discrete covariate strata.

    pi are stratum probabilities, h the per-stratum treatment
    probabilities E[T|X=j], theta the per-stratum mean effects.
    """

    pi: tuple[float, ...]
    h: tuple[float, ...]
    theta: tuple[float, ...]

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        h = np.asarray(self.h, dtype=np.float64)
        th = np.asarray(self.theta, dtype=np.float64)
        if not (len(pi) == len(h) == len(th)):
            raise ValidationError("rorr: pi, h, theta must share a length")
        if abs(pi.sum() - 1.0) > 1e-9 or (pi < 0).any():
            raise ValidationError("rorr: pi must be a probability vector")
        if ((h < 0) | (h > 1)).any():
            raise ValidationError("rorr: h entries must lie in [0, 1]")

    def arrays(self):
        return (np.asarray(self.pi), np.asarray(self.h),
                np.asarray(self.theta))


def binary_rorr_plim(model: DiscreteStrataModel) -> float:
    """Probability limit of the binary-treatment RORR slope.

    Equals sum_j pi_j theta_j h_j (1-h_j) / sum_j pi_j h_j (1-h_j): the
    conditional-variance-weighted average of stratum effects.
    """
    pi, h, theta = model.arrays()
    var = h * (1.0 - h)
    denom = float(pi @ var)
    if denom <= 0.0:
        raise DegenerateTreatmentError(
            "rorr: every stratum has deterministic treatment")
    return float(pi @ (theta * var)) / denom


def binary_bias(model: DiscreteStrataModel) -> float:
    """Bias of the RORR plim relative to the ATE = E[theta].

    Identity: equals Cov(omega, theta) for the normalized conditional
    variance weights omega_j = h_j(1-h_j) / E[h(1-h)].
    """
    pi, _, theta = model.arrays()
    return binary_rorr_plim(model) - float(pi @ theta)
