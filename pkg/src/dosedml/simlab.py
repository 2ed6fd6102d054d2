"""Poisson-Categorical simulation laboratory.

The data-generating process draws a categorical stratum, a conditionally
Poisson treatment, and an outcome built from a known dose-response curve
(log1p or affine) plus a per-stratum shift and Gaussian noise.  Against
it the module computes the quantities a residuals-on-residuals analysis
would converge to, all in closed form or by Monte Carlo:

* `acd_analytic` / `aie_analytic` — the average causal derivative and the
  average incremental effect of the true curve.
* `tstar` — the mean-value point between a draw and its conditional mean
  at which the secant slope equals the derivative.
* `rorr_plim_mc` — the probability limit of the residual regression, a
  conditional-variance-weighted average of derivatives at `tstar`.
* `bias_decomposition_mc` — the plim-minus-ACD gap split into the
  mean-value-shift term and the weight-covariance term, with the
  curvature bound |A| <= L * kappa checked on the same draws.
* `midpoint_lemma_check` — quadrature check that a bin-conditional mean
  of a smooth curve equals the midpoint value up to O(length^2).

Monte Carlo draws use counter-based Philox streams keyed by
(seed, shard), one shard per stratum, so results are reproducible and
the per-stratum loops could be farmed out without changing output.
Poisson variates are generated by inversion for rate <= 10 and by
transformed rejection above, keeping the draw stream independent of any
library's internal algorithm choices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.special import gammaln

from .dataset import ObservationTable, make_table
from .errors import ConfigError, NumericError, ValidationError

_TAIL_MASS = 1e-12


def _stream(seed: int, shard: int) -> np.random.Generator:
    """Counter-based RNG stream for (seed, shard)."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed,
                                                spawn_key=(shard,))))


@dataclass(frozen=True)
class PoissonCategoricalDGP:
    """Categorical strata with conditionally Poisson treatment.

    Outcome: Y = f(T) + shift[stratum] + Normal(0, noise_sd^2) where f is
    log1p or affine(intercept, slope).  The per-stratum outcome shifts
    default to the Poisson rates themselves, which confounds outcome
    levels with treatment levels.
    """

    pi: tuple[float, ...]
    lam: tuple[float, ...]
    f_kind: str = "log1p"
    f_intercept: float = 0.0
    f_slope: float = 1.0
    noise_sd: float = 0.0
    seed: int = 0
    shift: tuple[float, ...] | None = None

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        lam = np.asarray(self.lam, dtype=np.float64)
        if len(pi) != len(lam):
            raise ValidationError("simlab: pi and lambda must share a length")
        if abs(pi.sum() - 1.0) > 1e-9 or (pi <= 0).any():
            raise ValidationError("simlab: pi must be a positive probability vector")
        if (lam <= 0).any():
            raise ValidationError("simlab: every lambda must be positive")
        if self.f_kind not in ("log1p", "affine"):
            raise ConfigError(f"simlab: unknown f_kind {self.f_kind!r}")
        if self.noise_sd < 0:
            raise ValidationError("simlab: noise_sd must be nonnegative")
        if self.shift is not None and len(self.shift) != len(pi):
            raise ValidationError("simlab: shift must have one entry per stratum")

    @property
    def n_strata(self) -> int:
        return len(self.pi)

    def stratum_shifts(self) -> np.ndarray:
        return np.asarray(self.shift if self.shift is not None else self.lam,
                          dtype=np.float64)

    def f(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.f_kind == "log1p":
            return np.log1p(t)
        return self.f_intercept + self.f_slope * t

    def f_deriv(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.f_kind == "log1p":
            return 1.0 / (1.0 + t)
        return np.full_like(t, self.f_slope)

    def fprime_lipschitz(self) -> float:
        """Lipschitz constant of f' on t >= 0 (sup |f''|): 1 for log1p, 0 affine."""
        return 1.0 if self.f_kind == "log1p" else 0.0


def canonical_dgp(seed: int = 0, noise_sd: float = 1.0,
                  f_kind: str = "log1p") -> PoissonCategoricalDGP:
    """The package's reference configuration: pi uniform, lambda = (1, 3, 9)."""
    return PoissonCategoricalDGP(pi=(1 / 3, 1 / 3, 1 / 3), lam=(1.0, 3.0, 9.0),
                                 f_kind=f_kind, noise_sd=noise_sd, seed=seed)


# ---------------------------------------------------------------------------
# Poisson sampling


def _poisson_inversion(rng: np.random.Generator, lam: float,
                       size: int) -> np.ndarray:
    u = rng.random(size)
    k = np.zeros(size, dtype=np.int64)
    p = np.full(size, math.exp(-lam))
    cdf = p.copy()
    k_cap = int(lam + 20.0 * math.sqrt(lam) + 100.0)
    active = np.flatnonzero(u > cdf)
    it = 0
    while active.size and it < k_cap:
        it += 1
        p[active] *= lam / it
        cdf[active] += p[active]
        done = u[active] <= cdf[active]
        k[active[done]] = it
        active = active[~done]
    if active.size:  # u within 1e-15 of 1; clamp at the iteration cap
        k[active] = k_cap
    return k


def _poisson_ptrs(rng: np.random.Generator, lam: float,
                  size: int) -> np.ndarray:
    """Transformed-rejection sampler for lam > 10 (Hormann's PTRS)."""
    loglam = math.log(lam)
    b = 0.931 + 2.53 * math.sqrt(lam)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    v_r = 0.9277 - 3.6224 / (b - 2.0)
    out = np.empty(size, dtype=np.int64)
    todo = np.arange(size)
    while todo.size:
        u = rng.random(todo.size) - 0.5
        v = rng.random(todo.size)
        us = 0.5 - np.abs(u)
        kf = np.floor((2.0 * a / us + b) * u + lam + 0.43)
        accept = (us >= 0.07) & (v <= v_r)
        maybe = ~accept & (kf >= 0) & ~((us < 0.013) & (v > us))
        if maybe.any():
            kr = kf[maybe]
            lhs = (np.log(v[maybe]) + np.log(inv_alpha)
                   - np.log(a / (us[maybe] * us[maybe]) + b))
            rhs = kr * loglam - lam - gammaln(kr + 1.0)
            sel = np.flatnonzero(maybe)[lhs <= rhs]
            accept[sel] = True
        accept &= kf >= 0
        out[todo[accept]] = kf[accept].astype(np.int64)
        todo = todo[~accept]
    return out


def poisson_sample(rng: np.random.Generator, lam: float,
                   size: int) -> np.ndarray:
    """Poisson draws: inversion for lam <= 10, transformed rejection above."""
    if lam <= 0:
        raise ConfigError("simlab: Poisson rate must be positive")
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    if lam <= 10.0:
        return _poisson_inversion(rng, lam, size)
    return _poisson_ptrs(rng, lam, size)


def poisson_pmf(t, lam) -> np.ndarray:
    """Poisson mass function, stable for large t via gammaln."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp(t * math.log(lam) - lam - gammaln(t + 1.0))


def _tail_cutoff(lam: float) -> int:
    return int(math.ceil(lam + 20.0 * math.sqrt(lam) + 20.0))


@dataclass(frozen=True)
class GroundTruth:
    """Latent columns of a simulated table."""

    stratum: np.ndarray
    f_t: np.ndarray
    shift: np.ndarray


def sample_dgp(dgp: PoissonCategoricalDGP,
               n: int) -> tuple[ObservationTable, GroundTruth]:
    """Draw n observations; deterministic given dgp.seed.

    The returned table's categorical column holds the stratum codes
    (densified if a stratum happens to be absent from the sample).
    """
    if n < 1:
        raise ConfigError("simlab: need n >= 1")
    rng = _stream(dgp.seed, 0)
    pi = np.asarray(dgp.pi)
    lam = np.asarray(dgp.lam)
    cut = np.cumsum(pi)
    stratum = np.searchsorted(cut, rng.random(n), side="right")
    stratum = np.minimum(stratum, len(pi) - 1)
    t = np.zeros(n, dtype=np.int64)
    for j in range(len(pi)):
        rows = np.flatnonzero(stratum == j)
        t[rows] = poisson_sample(rng, float(lam[j]), rows.size)
    shifts = dgp.stratum_shifts()
    f_t = dgp.f(t)
    y = f_t + shifts[stratum]
    if dgp.noise_sd > 0:
        y = y + dgp.noise_sd * rng.standard_normal(n)
    _, codes = np.unique(stratum, return_inverse=True)
    table = make_table(y, t.astype(np.float64), x_cat=codes.reshape(-1, 1))
    return table, GroundTruth(stratum=stratum, f_t=f_t,
                              shift=shifts[stratum])


# ---------------------------------------------------------------------------
# Analytic targets


def acd_analytic(dgp: PoissonCategoricalDGP) -> float:
    """Average causal derivative E[f'(T)].

    For log1p, E[f'(T) | stratum j] = (1 - exp(-lam_j)) / lam_j; for an
    affine curve the derivative is the slope.
    """
    if dgp.f_kind == "affine":
        return dgp.f_slope
    lam = np.asarray(dgp.lam)
    pi = np.asarray(dgp.pi)
    return float(pi @ (-np.expm1(-lam) / lam))


def aie_analytic(dgp: PoissonCategoricalDGP) -> float:
    """Average incremental effect E[f(T+1) - f(T)].

    The Poisson series is truncated once the remaining tail mass drops
    below 1e-12 (or at lam + 20*sqrt(lam) + 20, whichever is first).
    """
    if dgp.f_kind == "affine":
        return dgp.f_slope
    total = 0.0
    for pj, lj in zip(dgp.pi, dgp.lam):
        tmax = _tail_cutoff(lj)
        term = math.exp(-lj)  # pmf at t = 0
        cum = 0.0
        acc = 0.0
        for t in range(tmax + 1):
            if t > 0:
                term *= lj / t
            acc += math.log((t + 2.0) / (t + 1.0)) * term
            cum += term
            if 1.0 - cum < _TAIL_MASS:
                break
        total += pj * acc
    return total


def tstar(t, lam):
    """Mean-value point for the log1p curve between a draw and its mean.

    Solves f(t) - f(lam) = f'(t*) (t - lam); at t == lam the point is t
    itself.  Always lies strictly between min(t, lam) and max(t, lam)
    when t != lam.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    lam_arr = np.asarray(lam, dtype=np.float64)
    denom = np.log1p(t_arr) - np.log1p(lam_arr)
    same = t_arr == lam_arr
    safe = np.where(same, 1.0, denom)
    out = np.where(same, t_arr, (t_arr - lam_arr) / safe - 1.0)
    if np.isscalar(t) and np.isscalar(lam):
        return float(out)
    return out


def empirical_acd(dgp: PoissonCategoricalDGP, t) -> tuple[float, float]:
    """Sample-mean estimate of E[f'(T)] with its standard error."""
    fp = dgp.f_deriv(t)
    return float(fp.mean()), float(fp.std(ddof=1) / math.sqrt(len(fp)))


def bin_conditional_truth(dgp: PoissonCategoricalDGP,
                          partition) -> tuple[np.ndarray, np.ndarray]:
    """True per-stratum bin propensities and bin-conditional outcome means.

    Brute-force enumeration of the Poisson mass up to the tail cutoff;
    values beyond the partition's top edge land in the last bin, matching
    assign().  Returns (p, m) with shape (n_strata, K); p rows are
    normalized over the enumerated support.
    """
    k_bins = partition.n_bins
    shifts = dgp.stratum_shifts()
    p = np.zeros((dgp.n_strata, k_bins))
    m = np.zeros((dgp.n_strata, k_bins))
    for j, lj in enumerate(dgp.lam):
        top = max(_tail_cutoff(lj), int(partition.edges[-1]) + 1)
        t = np.arange(0, top + 1, dtype=np.float64)
        pmf = poisson_pmf(t, lj)
        bins = partition.assign(t)
        mass = np.bincount(bins, weights=pmf, minlength=k_bins)
        f_mass = np.bincount(bins, weights=pmf * dgp.f(t), minlength=k_bins)
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.where(mass > 0, f_mass / np.where(mass > 0, mass, 1.0), 0.0)
        p[j] = mass / mass.sum()
        m[j] = cond + shifts[j]
    return p, m


# ---------------------------------------------------------------------------
# Monte Carlo plim and bias decomposition


@dataclass(frozen=True)
class McValue:
    """A Monte Carlo estimate with its standard error."""

    value: float
    se: float
    draws: int


class _StratifiedDraws:
    """Per-stratum Poisson draws plus the moments the plim needs.

    All ratio quantities are self-normalized: the conditional-variance
    weights use the same draws in the numerator and denominator, so
    identities like E[w] = 1 and the curvature bound |A| <= L * kappa
    hold exactly in-sample rather than only in expectation.
    """

    def __init__(self, dgp: PoissonCategoricalDGP, draws: int, seed: int):
        if draws < 1:
            raise ConfigError("simlab: draws must be positive")
        self.dgp = dgp
        self.m = draws
        self.pi = np.asarray(dgp.pi)
        lam = np.asarray(dgp.lam)
        self.sq = []        # (T - lam)^2
        self.fp_star = []   # f'(T*)
        self.fp = []        # f'(T)
        self.abs3 = []      # |T - lam|^3
        for j in range(dgp.n_strata):
            rng = _stream(seed, j + 1)
            t = poisson_sample(rng, float(lam[j]), draws).astype(np.float64)
            dev = t - lam[j]
            self.sq.append(dev * dev)
            self.abs3.append(np.abs(dev) ** 3)
            if dgp.f_kind == "log1p":
                self.fp_star.append(1.0 / (tstar(t, lam[j]) + 1.0))
            else:
                self.fp_star.append(np.full(draws, dgp.f_slope))
            self.fp.append(dgp.f_deriv(t))
        self.var_mc = self._mean(self.sq)  # MC estimate of E[(T - h)^2]

    def _mean(self, cols) -> float:
        return float(sum(p * c.mean() for p, c in zip(self.pi, cols)))

    def ratio(self, num_cols, den_cols) -> tuple[float, float]:
        """Self-normalized ratio of stratified means with delta-method se."""
        num = self._mean(num_cols)
        den = self._mean(den_cols)
        r = num / den
        var_n = var_d = cov = 0.0
        for p, a, b in zip(self.pi, num_cols, den_cols):
            var_n += p * p * a.var(ddof=1) / self.m
            var_d += p * p * b.var(ddof=1) / self.m
            cov += p * p * float(np.cov(a, b, ddof=1)[0, 1]) / self.m
        var_r = max((var_n - 2.0 * r * cov + r * r * var_d) / den ** 2, 0.0)
        return r, math.sqrt(var_r)


def rorr_plim_mc(dgp: PoissonCategoricalDGP, draws: int,
                 seed: int | None = None) -> McValue:
    """Monte Carlo estimate of the residual-regression probability limit.

    Stratified: `draws` Poisson draws per stratum.  The estimate is the
    ratio of the pi-weighted means of (T - lam)^2 f'(T*) and (T - lam)^2;
    the denominator is the same-draw estimate of the conditional
    treatment variance (sum_j pi_j lam_j for Poisson), which makes the
    ratio exactly the slope for an affine curve.
    """
    sim = _StratifiedDraws(dgp, draws, dgp.seed if seed is None else seed)
    num = [s * f for s, f in zip(sim.sq, sim.fp_star)]
    value, se = sim.ratio(num, sim.sq)
    return McValue(value=value, se=se, draws=draws)


@dataclass(frozen=True)
class BiasDecomposition:
    """Split of (plim - ACD) into mean-value and weighting terms.

    A is the weighted mean of f'(T*) - f'(T); B is Cov(w, f'(T)) for the
    normalized conditional-variance weights w.  All entries come from the
    same stratified draws, so plim - acd = A + B holds to float rounding
    and |A| <= lipschitz_bound = L * kappa holds deterministically.
    """

    A: float
    B: float
    kappa: float
    lipschitz_bound: float
    acd: float
    plim: float
    a_se: float
    plim_se: float

    def to_dict(self) -> dict:
        return {"A": self.A, "B": self.B, "kappa": self.kappa,
                "lipschitz_bound": self.lipschitz_bound, "acd": self.acd,
                "plim": self.plim, "a_se": self.a_se,
                "plim_se": self.plim_se}


def bias_decomposition_mc(dgp: PoissonCategoricalDGP, draws: int,
                          seed: int | None = None) -> BiasDecomposition:
    """Monte Carlo bias decomposition of the residual-regression plim."""
    sim = _StratifiedDraws(dgp, draws, dgp.seed if seed is None else seed)
    plim, plim_se = sim.ratio(
        [s * f for s, f in zip(sim.sq, sim.fp_star)], sim.sq)
    a_val, a_se = sim.ratio(
        [s * (fs - f) for s, fs, f in zip(sim.sq, sim.fp_star, sim.fp)],
        sim.sq)
    weighted_fp = sim._mean([s * f for s, f in zip(sim.sq, sim.fp)]) / sim.var_mc
    acd_mc = sim._mean(sim.fp)
    b_val = weighted_fp - acd_mc
    kappa = sim._mean(sim.abs3) / sim.var_mc
    lips = dgp.fprime_lipschitz()
    out = BiasDecomposition(A=a_val, B=b_val, kappa=kappa,
                            lipschitz_bound=lips * kappa, acd=acd_mc,
                            plim=plim, a_se=a_se, plim_se=plim_se)
    tol = 1e-9 * max(1.0, abs(plim))
    if abs(out.plim - out.acd - (out.A + out.B)) > tol:
        raise NumericError("simlab: bias decomposition identity violated")
    if abs(out.A) > out.lipschitz_bound + 1e-12 + 3.0 * a_se:
        raise NumericError("simlab: curvature bound violated")
    return out


def effective_treatment_histogram(dgp: PoissonCategoricalDGP, draws: int,
                                  seed: int | None = None,
                                  bin_width: float = 1.0) -> list[dict]:
    """Observed-vs-effective treatment masses on a common grid.

    The effective distribution is the conditional-variance-weighted
    distribution of the mean-value points t*; both mass columns sum to 1.
    Plot-ready payload (no rendering here).
    """
    base_seed = dgp.seed if seed is None else seed
    lam = np.asarray(dgp.lam)
    pi = np.asarray(dgp.pi)
    all_t, all_star, all_sq, all_obs = [], [], [], []
    for j in range(dgp.n_strata):
        rng = _stream(base_seed, j + 1)
        t = poisson_sample(rng, float(lam[j]), draws).astype(np.float64)
        all_t.append(t)
        all_star.append(tstar(t, float(lam[j])))
        all_sq.append((t - lam[j]) ** 2 * (pi[j] / draws))
        all_obs.append(np.full(draws, pi[j] / draws))
    t = np.concatenate(all_t)
    star = np.concatenate(all_star)
    w_eff = np.concatenate(all_sq)
    w_eff = w_eff / w_eff.sum()
    w_obs = np.concatenate(all_obs)
    top = max(t.max(), star.max()) + bin_width
    edges = np.arange(0.0, top + bin_width, bin_width)
    obs_mass, _ = np.histogram(t, bins=edges, weights=w_obs)
    eff_mass, _ = np.histogram(star, bins=edges, weights=w_eff)
    return [{"bin_left": float(edges[i]), "bin_right": float(edges[i + 1]),
             "observed_mass": float(obs_mass[i]),
             "effective_mass": float(eff_mass[i])}
            for i in range(len(edges) - 1)]


# ---------------------------------------------------------------------------
# Midpoint approximation check


def _quad(fn, lo: float, hi: float) -> float:
    value, err = quad(fn, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=200)
    if err > 1e-10:
        raise NumericError("simlab: quadrature did not converge to 1e-10")
    return value


def midpoint_lemma_check(f, density, lo: float, hi: float) -> float:
    """|bin-conditional mean of f minus f(midpoint)|, by adaptive quadrature.

    For twice continuously differentiable f and density (bounded below on
    the bin) the result is O(length^2); an affine f with a density
    symmetric about the midpoint gives 0 up to quadrature tolerance.
    """
    if not hi > lo:
        raise ConfigError("simlab: bin must have positive length")
    num = _quad(lambda s: f(s) * density(s), lo, hi)
    den = _quad(density, lo, hi)
    if den <= 0.0:
        raise NumericError("simlab: density must be positive on the bin")
    return abs(num / den - f(0.5 * (lo + hi)))
