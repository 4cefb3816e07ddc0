"""Stage 2: Bayesian mixed-effects inference across a population of tendons.

Each tendon i has log-scale parameters ``xi_i ~ N(mu_pop, S C S)`` where ``S`` is
diagonal (the population scales) and ``C`` a correlation matrix with Cholesky
factor ``L_C``. The sampler works on one flat unconstrained vector::

    [xi_1 (4), ..., xi_Ne (4), mu_pop (4), log scales (4), cpc (6)]

``cpc`` are unbounded coordinates for ``L_C``: ``tanh`` gives canonical partial
correlations, which fill ``L_C`` row by row. The log density includes the
Jacobians of the log-scale and correlation maps, and the gradient is exact.

Observation j of tendon i contributes ``-gamma_ij r_ij**2 / (2 sigma**2)``, where
``gamma_ij`` is the (fixed) fidelity mean from stage 1. The centred
parametrisation is used throughout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize, stats

from .constitutive import (PARAM_NAMES, THETA_NAMES, ModelParams, engineering_stress, model_stress,
                           model_stress_rows,
                           stress_and_gradient_rows, xi_to_theta)
from .dataio import DataError, Experiment, Population
from .priors import (LKJ_SHAPE, XI_PRIOR_MEAN, XI_PRIOR_SD, half_student_t_dlogpdf, half_student_t_logpdf,
                     normal_logpdf)
from .samplers import Chain, LogDensityTarget, NUTSConfig, effective_sample_size, nuts, split_rhat

log = logging.getLogger(__name__)

K = 4
N_CPC = K * (K - 1) // 2
RHAT_THRESHOLD = 1.05
_LOG_2PI = math.log(2.0 * math.pi)


# --- correlation Cholesky factor ---------------------------------------------------

def _log_sech2(y):
    # log(1 - tanh(y)**2), stable for large |y|
    ay = np.abs(y)
    return 2.0 * (math.log(2.0) - ay - np.log1p(np.exp(-2.0 * ay)))


def cpc_to_cholesky(y, with_grad: bool = False):
    """Cholesky factor of a correlation matrix from unconstrained coordinates.

    Returns ``(L, log_jacobian)``, plus their derivatives with respect to ``y``
    (shapes ``(6, 4, 4)`` and ``(6,)``) when ``with_grad``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (N_CPC,):
        raise ValueError(f"expected {N_CPC} correlation coordinates")
    z = np.tanh(y)
    dz = 1.0 - z * z
    lj = float(np.sum(_log_sech2(y)))
    dlj = -2.0 * z
    L = np.zeros((K, K))
    dL = np.zeros((N_CPC, K, K))
    L[0, 0] = 1.0
    k = 0
    for i in range(1, K):
        ss, dss = 0.0, np.zeros(N_CPC)
        for j in range(i):
            root = math.sqrt(1.0 - ss)
            if j > 0:
                lj += 0.5 * math.log1p(-ss)
                dlj += -0.5 * dss / (1.0 - ss)
            L[i, j] = z[k] * root
            d = -z[k] * dss / (2.0 * root)
            d[k] += dz[k] * root
            dL[:, i, j] = d
            ss += L[i, j] ** 2
            dss = dss + 2.0 * L[i, j] * d
            k += 1
        L[i, i] = math.sqrt(1.0 - ss)
        dL[:, i, i] = -dss / (2.0 * L[i, i])
    if with_grad:
        return L, lj, dL, dlj
    return L, lj


def cholesky_to_cpc(L) -> np.ndarray:
    """Inverse of :func:`cpc_to_cholesky`."""
    L = np.asarray(L, dtype=float)
    y = np.empty(N_CPC)
    k = 0
    for i in range(1, K):
        ss = 0.0
        for j in range(i):
            z = L[i, j] / math.sqrt(1.0 - ss)
            y[k] = np.arctanh(z)
            ss += L[i, j] ** 2
            k += 1
    return y


def lkj_cholesky_logpdf(L, shape: float = LKJ_SHAPE) -> float:
    """Log density of ``L_C`` induced by LKJ(shape) on ``C = L_C L_C^T`` (unnormalised).

    Includes the Jacobian of ``L_C -> C``; for shape 1 the density on ``C`` is flat.
    """
    d = np.diag(L)
    expo = np.array([K - k - 1 + 2.0 * (shape - 1.0) for k in range(K)])
    return float(np.sum(expo[1:] * np.log(d[1:])))


def lkj_corr_logpdf(C, shape: float = LKJ_SHAPE) -> float:
    """Unnormalised LKJ log density on a correlation matrix."""
    sign, logdet = np.linalg.slogdet(C)
    if sign <= 0:
        return -math.inf
    return (shape - 1.0) * logdet


# --- population parameters -----------------------------------------------------

@dataclass(frozen=True)
class PopulationParams:
    mu_pop: np.ndarray
    scales: np.ndarray
    corr_chol: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu_pop, dtype=float)
        s = np.asarray(self.scales, dtype=float)
        L = np.asarray(self.corr_chol, dtype=float)
        if mu.shape != (K,) or s.shape != (K,) or L.shape != (K, K):
            raise ValueError("population parameters have the wrong shape")
        if not np.allclose(np.triu(L, 1), 0.0):
            raise ValueError("correlation factor must be lower triangular")
        if np.any(np.diag(L) <= 0) or not np.allclose(np.sum(L * L, axis=1), 1.0, atol=1e-10):
            raise ValueError("correlation factor rows must have unit norm and positive diagonal")
        object.__setattr__(self, "mu_pop", mu)
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "corr_chol", L)

    @property
    def cov_chol(self) -> np.ndarray:
        return self.scales[:, None] * self.corr_chol

    @property
    def covariance(self) -> np.ndarray:
        A = self.cov_chol
        return A @ A.T

    @property
    def correlation(self) -> np.ndarray:
        return self.corr_chol @ self.corr_chol.T


def population_log_prior(pop: PopulationParams) -> float:
    """Normal on ``mu_pop``, half Student-t on scales, LKJ on the correlation factor."""
    if np.any(pop.scales <= 0) or not np.all(np.isfinite(pop.scales)):
        return -math.inf
    val = float(np.sum(normal_logpdf(pop.mu_pop, XI_PRIOR_MEAN, XI_PRIOR_SD)))
    val += float(np.sum(half_student_t_logpdf(pop.scales)))
    return val + lkj_cholesky_logpdf(pop.corr_chol)


# --- joint density ----------------------------------------------------------------

def state_names(ids) -> list:
    out = [f"{i}.{p}" for i in ids for p in PARAM_NAMES]
    out += [f"mu.{p}" for p in PARAM_NAMES]
    out += [f"log_scale.{p}" for p in PARAM_NAMES]
    return out + [f"cpc.{k}" for k in range(N_CPC)]


@dataclass
class _Tendon:
    stretch: np.ndarray
    stress: np.ndarray
    weight: np.ndarray


class MixedEffectsModel:
    """Joint log posterior over the flat unconstrained state, with gradient."""

    def __init__(self, experiments: Sequence[Experiment], sigma_obs: float):
        if len(experiments) == 0:
            raise DataError("population has no experiments")
        if sigma_obs <= 0:
            raise ValueError("sigma_obs must be positive")
        self.ids = [e.id for e in experiments]
        self.tendons = [
            _Tendon(np.array(e.stretch), np.array(e.stress),
                    np.ones(len(e)) if e.fidelity is None else np.array(e.fidelity))
            for e in experiments
        ]
        self.sigma_obs = float(sigma_obs)
        self.n_experiments = len(experiments)
        self.dimension = K * self.n_experiments + K + K + N_CPC
        # all observations stacked, with the owning tendon of each
        self._lam = np.concatenate([t.stretch for t in self.tendons])
        self._y = np.concatenate([t.stress for t in self.tendons])
        self._w = np.concatenate([t.weight for t in self.tendons])
        self._owner = np.concatenate([np.full(len(t.stretch), i) for i, t in enumerate(self.tendons)])

    @classmethod
    def from_population(cls, population: Population) -> "MixedEffectsModel":
        return cls(population.experiments, population.sigma_obs)

    @property
    def names(self) -> list:
        return state_names(self.ids)

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise ValueError(f"state has shape {x.shape}, expected ({self.dimension},)")
        n = K * self.n_experiments
        xi = x[:n].reshape(self.n_experiments, K)
        mu = x[n:n + K]
        log_s = x[n + K:n + 2 * K]
        cpc = x[n + 2 * K:]
        return xi, mu, log_s, cpc

    def pack(self, xi, mu, log_s, cpc) -> np.ndarray:
        return np.concatenate([np.ravel(xi), mu, log_s, cpc])

    def population(self, x) -> PopulationParams:
        _, mu, log_s, cpc = self.unpack(x)
        return PopulationParams(mu, np.exp(log_s), cpc_to_cholesky(cpc)[0])

    def log_likelihood(self, xi) -> float:
        total = 0.0
        for t, xv in zip(self.tendons, xi):
            with np.errstate(all="ignore"):
                r = t.stress - model_stress(t.stretch, xv)
            total -= float(np.sum(t.weight * r * r)) / (2.0 * self.sigma_obs**2)
        return total if np.isfinite(total) else -math.inf

    def log_density(self, x) -> float:
        return self.value_and_grad(x, need_grad=False)[0]

    def value_and_grad(self, x, need_grad: bool = True):
        xi, mu, log_s, cpc = self.unpack(x)
        if not np.all(np.isfinite(x)):
            return -math.inf, np.zeros(self.dimension)
        grad = np.zeros(self.dimension) if need_grad else None
        n = K * self.n_experiments
        var = self.sigma_obs**2

        # likelihood
        rows = xi[self._owner]
        with np.errstate(all="ignore"):
            if need_grad:
                pred, dpred = stress_and_gradient_rows(self._lam, rows)
            else:
                pred = model_stress_rows(self._lam, rows)
        r = self._y - pred
        lp = -float(np.sum(self._w * r * r)) / (2.0 * var)
        if not np.isfinite(lp):
            return -math.inf, np.zeros(self.dimension)
        if need_grad:
            coef = self._w * r / var
            for k in range(K):
                grad[k:n:K] = np.bincount(self._owner, coef * dpred[:, k], minlength=self.n_experiments)

        # population normal on xi
        s = np.exp(log_s)
        if need_grad:
            Lc, lj, dLc, dlj = cpc_to_cholesky(cpc, with_grad=True)
        else:
            Lc, lj = cpc_to_cholesky(cpc)
        A = s[:, None] * Lc
        diag = np.diag(A)
        if np.any(diag <= 0) or not np.all(np.isfinite(A)):
            return -math.inf, np.zeros(self.dimension)
        dev = xi - mu
        Z = linalg.solve_triangular(A, dev.T, lower=True)  # (K, Ne)
        lp += -0.5 * float(np.sum(Z * Z)) - self.n_experiments * float(np.sum(np.log(diag)))
        lp -= 0.5 * self.n_experiments * K * _LOG_2PI

        # priors (with log-scale and correlation Jacobians)
        lp += float(np.sum(normal_logpdf(mu, XI_PRIOR_MEAN, XI_PRIOR_SD)))
        lp += float(np.sum(half_student_t_logpdf(s))) + float(np.sum(log_s))
        lp += lkj_cholesky_logpdf(Lc) + lj
        if not need_grad:
            return lp, None

        W = linalg.solve_triangular(A, Z, lower=True, trans="T")  # A^-T z_i, (K, Ne)
        grad[:n] += -W.T.ravel()
        grad[n:n + K] = W.sum(axis=1) - (mu - XI_PRIOR_MEAN) / XI_PRIOR_SD**2
        GA = np.tril(W @ Z.T)
        GA[np.diag_indices(K)] -= self.n_experiments / diag
        ds = np.sum(GA * Lc, axis=1)
        grad[n + K:n + 2 * K] = s * (ds + half_student_t_dlogpdf(s)) + 1.0
        GL = s[:, None] * GA
        lkj_expo = np.array([K - k - 1 + 2.0 * (LKJ_SHAPE - 1.0) for k in range(K)])
        GL[np.diag_indices(K)] += np.where(np.arange(K) > 0, lkj_expo / np.diag(Lc), 0.0)
        grad[n + 2 * K:] = np.einsum("mij,ij->m", dLc, GL) + dlj
        return lp, grad

    def constrained_log_density(self, theta, pop: PopulationParams) -> float:
        """Density over ``(theta_i, mu_pop, scales, C)`` in constrained coordinates.

        Written independently of :meth:`value_and_grad`: each ``theta_i`` has the
        log-normal-type density induced by ``N(mu_pop, Sigma_pop)`` on its log
        transform, i.e. the normal density times ``1 / (ncm fib (a-1) (b-a))``.
        """
        theta = np.asarray(theta, dtype=float)
        total = 0.0
        cov = pop.covariance
        mvn = stats.multivariate_normal(mean=pop.mu_pop, cov=cov)
        for t, th in zip(self.tendons, theta):
            ncm, fib, a, b = th
            xi = np.array([math.log(ncm), math.log(fib), math.log(a - 1.0), math.log(b - a)])
            r = t.stress - engineering_stress(t.stretch, ModelParams(ncm, fib, a, b))
            total -= float(np.sum(t.weight * r * r)) / (2.0 * self.sigma_obs**2)
            total += mvn.logpdf(xi) - math.log(ncm) - math.log(fib) - math.log(a - 1.0) - math.log(b - a)
        return total + population_log_prior(pop)

    def target(self) -> LogDensityTarget:
        return LogDensityTarget(dimension=self.dimension, log_density=self.log_density,
                                value_and_grad=self.value_and_grad)


# --- fitting -----------------------------------------------------------------------

@dataclass
class PopulationConfig:
    n_warmup: int = 1000
    n_samples: int = 1000
    n_chains: int = 4
    seed: int = 0
    step_size: float = 0.01
    adapt_delta: float = 0.99
    max_tree_depth: int = 14
    workers: int = 1
    init_jitter: float = 0.05

    @classmethod
    def paper_scale(cls, **kwargs) -> "PopulationConfig":
        return cls(n_warmup=1000, n_samples=4000, n_chains=10, **kwargs)

    def nuts_config(self) -> NUTSConfig:
        return NUTSConfig(n_warmup=self.n_warmup, n_samples=self.n_samples, n_chains=self.n_chains,
                          seed=self.seed, step_size=self.step_size, adapt_delta=self.adapt_delta,
                          max_tree_depth=self.max_tree_depth, workers=self.workers)


@dataclass
class PopulationPosterior:
    ids: list
    chains: list
    rhat: np.ndarray
    ess: np.ndarray
    converged: bool
    sigma_obs: float
    config: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def n_experiments(self) -> int:
        return len(self.ids)

    @property
    def names(self) -> list:
        return state_names(self.ids)

    def draws(self) -> np.ndarray:
        """All retained draws pooled over chains, ``(n_total, dimension)``."""
        return np.concatenate([c.draws for c in self.chains])

    def xi(self, index: int) -> np.ndarray:
        return self.draws()[:, K * index:K * index + K]

    def mu_pop(self) -> np.ndarray:
        n = K * self.n_experiments
        return self.draws()[:, n:n + K]

    def scales(self) -> np.ndarray:
        n = K * self.n_experiments
        return np.exp(self.draws()[:, n + K:n + 2 * K])

    def corr_chol(self) -> np.ndarray:
        n = K * self.n_experiments
        return np.stack([cpc_to_cholesky(y)[0] for y in self.draws()[:, n + 2 * K:]])

    def report(self) -> dict:
        names = self.names
        return {
            "converged": self.converged,
            "max_rhat": None if not np.isfinite(self.rhat).any() else float(np.nanmax(self.rhat)),
            "rhat": {k: (None if not np.isfinite(v) else float(v)) for k, v in zip(names, self.rhat)},
            "ess": {k: (None if not np.isfinite(v) else float(v)) for k, v in zip(names, self.ess)},
            "divergences": [int(c.divergences) for c in self.chains],
            "acceptance_rates": [float(c.acceptance_rate) for c in self.chains],
            "chain_seeds": [int(c.seed) for c in self.chains],
            "experiments": list(self.ids),
            "sigma_obs": self.sigma_obs,
            "warnings": self.warnings,
            "config": self.config,
        }


def individual_map(exp: Experiment, sigma_obs: float) -> np.ndarray:
    """Penalised least-squares estimate of one tendon's ``xi`` (prior as penalty)."""
    w = np.sqrt(np.ones(len(exp)) if exp.fidelity is None else exp.fidelity)

    def resid(xi):
        with np.errstate(all="ignore"):
            r = w * (exp.stress - model_stress(exp.stretch, xi)) / sigma_obs
        r = np.where(np.isfinite(r), r, 1e6)
        return np.concatenate([r, (xi - XI_PRIOR_MEAN) / XI_PRIOR_SD])

    best = None
    for shift in (0.0, 0.5, -0.5):
        start = XI_PRIOR_MEAN + np.array([0.0, 0.0, shift, shift])
        fit = optimize.least_squares(resid, start, method="trf")
        if best is None or fit.cost < best.cost:
            best = fit
    return best.x


class _Init:
    def __init__(self, model: MixedEffectsModel, xi_map, jitter):
        self.model, self.xi_map, self.jitter = model, xi_map, jitter

    def __call__(self, rng):
        xi = self.xi_map + self.jitter * XI_PRIOR_SD * rng.standard_normal(self.xi_map.shape)
        mu = xi.mean(axis=0) + self.jitter * XI_PRIOR_SD * rng.standard_normal(K)
        if len(xi) > 1:
            sd = np.clip(xi.std(axis=0, ddof=1), 0.05, 1.0)
        else:
            sd = np.full(K, 0.5)
        log_s = np.log(sd) + self.jitter * rng.standard_normal(K)
        cpc = self.jitter * rng.standard_normal(N_CPC)
        return self.model.pack(xi, mu, log_s, cpc)


def fit_population(population: Population, config: PopulationConfig = PopulationConfig(),
                   allow_untrimmed: bool = True) -> PopulationPosterior:
    """Sample the mixed-effects posterior with NUTS."""
    if len(population.experiments) == 0:
        raise DataError("population has no experiments")
    if not allow_untrimmed and any(e.fidelity is None for e in population.experiments):
        raise DataError("experiments have not been through selection")
    model = MixedEffectsModel.from_population(population)
    xi_map = np.stack([individual_map(e, population.sigma_obs) for e in population.experiments])
    chains = nuts(model.target(), config.nuts_config(), _Init(model, xi_map, config.init_jitter))
    x = np.stack([c.draws for c in chains])
    rhat = split_rhat(x)
    ess = effective_sample_size(x)
    converged = bool(np.all(np.nan_to_num(rhat, nan=np.inf) <= RHAT_THRESHOLD))
    warnings = [w for c in chains for w in c.warnings]
    if not converged:
        warnings.append(f"not converged: max split R-hat {np.nanmax(rhat):.3f} > {RHAT_THRESHOLD}")
    total_div = sum(c.divergences for c in chains)
    if total_div:
        warnings.append(f"{total_div} divergent transitions after warmup")
    return PopulationPosterior(list(model.ids), chains, rhat, ess, converged, population.sigma_obs,
                               config=asdict(config), warnings=warnings)


def posterior_from_draws(ids, draws_per_chain, sigma_obs: float, seeds=None, config=None) -> PopulationPosterior:
    """Rebuild a posterior (with fresh diagnostics) from persisted per-chain draws."""
    seeds = seeds or [0] * len(draws_per_chain)
    chains = [Chain(draws=np.asarray(d, dtype=float), acceptance_rate=math.nan, seed=int(s))
              for d, s in zip(draws_per_chain, seeds)]
    n = min(c.n_draws for c in chains)
    x = np.stack([c.draws[:n] for c in chains])
    rhat = split_rhat(x)
    ess = effective_sample_size(x)
    converged = bool(np.all(np.nan_to_num(rhat, nan=np.inf) <= RHAT_THRESHOLD))
    return PopulationPosterior(list(ids), chains, rhat, ess, converged, sigma_obs, config=config or {})


# --- predictives ----------------------------------------------------------------

def _subsample(n_total: int, n_draws: Optional[int], rng) -> np.ndarray:
    if n_draws is None or n_draws >= n_total:
        return np.arange(n_total)
    return np.sort(rng.choice(n_total, size=n_draws, replace=False))


def sample_predictive_xi(mu, cov_chol, rng) -> np.ndarray:
    """One ``xi* ~ N(mu, A A^T)`` per row of ``mu`` / ``cov_chol``."""
    z = rng.standard_normal(mu.shape)
    return mu + np.einsum("nij,nj->ni", cov_chol, z)


def posterior_predictive_params(posterior: PopulationPosterior, n_draws: Optional[int] = None,
                                seed: int = 0) -> np.ndarray:
    """Parameters ``theta*`` of a new tendon, one per (sub-sampled) posterior draw."""
    rng = np.random.default_rng(seed)
    idx = _subsample(sum(c.n_draws for c in posterior.chains), n_draws, rng)
    mu = posterior.mu_pop()[idx]
    A = posterior.scales()[idx][:, :, None] * posterior.corr_chol()[idx]
    return xi_to_theta(sample_predictive_xi(mu, A, rng))


def kde_mode(sample, grid_size: int = 2048) -> float:
    """Mode of a Gaussian KDE (Silverman bandwidth) on a grid over the 0.5-99.5% range."""
    x = np.asarray(sample, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) < 2 or np.ptp(x) == 0:
        return float(x[0]) if len(x) else math.nan
    kde = stats.gaussian_kde(x, bw_method="silverman")
    lo, hi = np.percentile(x, [0.5, 99.5])
    grid = np.linspace(lo, hi, grid_size)
    return float(grid[np.argmax(kde(grid))])


def kde_grid(sample, grid_size: int = 512):
    x = np.asarray(sample, dtype=float)
    kde = stats.gaussian_kde(x, bw_method="silverman")
    lo, hi = np.percentile(x, [0.5, 99.5])
    grid = np.linspace(lo, hi, grid_size)
    return grid, kde(grid)


def predictive_modes(theta_star) -> dict:
    return {name: kde_mode(theta_star[:, k]) for k, name in enumerate(THETA_NAMES)}


def posterior_predictive_stress(posterior: PopulationPosterior, index: int, stretch, sigma_obs: float,
                                n_draws: Optional[int] = None, seed: int = 0, level: float = 0.95) -> dict:
    """Median and central band of ``M(lam, theta_i) + noise`` over posterior draws."""
    if not 0 <= index < posterior.n_experiments:
        raise IndexError(f"tendon index {index} out of range")
    rng = np.random.default_rng(seed)
    xi = posterior.xi(index)
    idx = _subsample(len(xi), n_draws, rng)
    lam = np.asarray(stretch, dtype=float)
    curves = np.stack([model_stress(lam, xi[k]) for k in idx])
    samples = curves + sigma_obs * rng.standard_normal(curves.shape)
    tail = 0.5 * (1.0 - level)
    lo, med, hi = np.quantile(samples, [tail, 0.5, 1.0 - tail], axis=0)
    return {"stretch": lam, "median": med, "lower": lo, "upper": hi}


# --- linear modulus comparison -------------------------------------------------

@dataclass
class LinearModulusComparison:
    slopes: dict
    valid: list
    n_total: int
    lognormal_mu: float = math.nan
    lognormal_sigma: float = math.nan
    slope_mean: float = math.nan
    lognormal_mean: float = math.nan
    warnings: list = field(default_factory=list)

    def density(self, grid) -> np.ndarray:
        grid = np.asarray(grid, dtype=float)
        if not np.isfinite(self.lognormal_mu):
            return np.full(grid.shape, np.nan)
        if self.lognormal_sigma == 0:
            return np.where(np.isclose(grid, math.exp(self.lognormal_mu)), np.inf, 0.0)
        return stats.lognorm.pdf(grid, s=self.lognormal_sigma, scale=math.exp(self.lognormal_mu))

    def report(self) -> dict:
        return {
            "n_valid": len(self.valid),
            "n_total": self.n_total,
            "valid": self.valid,
            "slopes": self.slopes,
            "slope_mean": self.slope_mean,
            "lognormal_mu": self.lognormal_mu,
            "lognormal_sigma": self.lognormal_sigma,
            "lognormal_mean": self.lognormal_mean,
            "warnings": self.warnings,
        }


def lognormal_moment_match(mean: float, var: float):
    """``(mu, sigma)`` of the log-normal with the given mean and variance."""
    if mean <= 0:
        raise ValueError("log-normal moment match needs a positive mean")
    s2 = math.log1p(var / mean**2)
    return math.log(mean) - 0.5 * s2, math.sqrt(s2)


def ols_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    return float(np.sum(xc * (y - y.mean())) / np.sum(xc * xc))


def linear_modulus_comparison(experiments: Sequence[Experiment], b_means: Sequence[float],
                              truncation_stretches: Sequence[float]) -> LinearModulusComparison:
    """OLS slopes over ``[b_mean, truncation stretch]`` and a log-normal fit to them.

    An experiment has a valid linear region when its independent posterior-mean
    ``b`` lies below its truncation stretch and the window holds two or more points.
    """
    slopes, valid, warnings = {}, [], []
    for e, b, top in zip(experiments, b_means, truncation_stretches):
        if not b < top:
            continue
        mask = (e.stretch >= b) & (e.stretch <= top)
        if mask.sum() < 2:
            warnings.append(f"{e.id}: fewer than two observations in linear window")
            continue
        slopes[e.id] = ols_slope(e.stretch[mask], e.stress[mask])
        valid.append(e.id)
    out = LinearModulusComparison(slopes=slopes, valid=valid, n_total=len(experiments), warnings=warnings)
    if not slopes:
        out.warnings.append("no valid linear regions")
        log.warning("no valid linear regions")
        return out
    v = np.array(list(slopes.values()))
    m = float(v.mean())
    var = float(v.var(ddof=1)) if len(v) > 1 else 0.0
    out.slope_mean = m
    if m > 0:
        out.lognormal_mu, out.lognormal_sigma = lognormal_moment_match(m, var)
        out.lognormal_mean = math.exp(out.lognormal_mu + 0.5 * out.lognormal_sigma**2)
    else:
        out.warnings.append("non-positive mean slope; log-normal fit skipped")
    return out
