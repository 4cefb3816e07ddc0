"""Stage 1: per-experiment data selection with fidelity parameters.

Each observation j carries a fidelity ``gamma_j = logistic(chi_j)`` that tempers
its Gaussian likelihood factor::

    gamma_j**0.5 * exp(-gamma_j * r_j**2 / (2 sigma**2))

The logits ``chi`` have a multivariate normal prior whose mean and standard
deviation are sigmoids in stretch (high, confident fidelity at low strain,
vaguer at high strain) and whose correlation is a squared-exponential kernel.

Sampling uses Metropolis-within-Gibbs with two blocks: the log-scale model
parameters (adaptive covariance) and the fidelity field. The field is sampled in
whitened coordinates ``w`` with ``chi = mu + L w`` (``L L^T`` the prior
covariance), so an isotropic proposal on ``w`` is a proposal proportional to the
prior covariance on ``chi``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, optimize, special

from .constitutive import PARAM_NAMES, model_stress, xi_to_theta
from .dataio import DataError, Experiment
from .priors import XI_PRIOR_MEAN, XI_PRIOR_SD, xi_log_prior
from .samplers import (GibbsBlockSpec, LogDensityTarget, RWMConfig, effective_sample_size, rwm_gibbs,
                       split_rhat)

log = logging.getLogger(__name__)

JITTER = 1e-10
RHAT_THRESHOLD = 1.05


@dataclass(frozen=True)
class FidelityPriorSpec:
    A_mu: float = 4.0
    K_mu: float = 1.0
    A_sigma: float = 0.25
    K_sigma: float = 1.0
    B_rate: float = 50.0
    lambda_0: float = 1.1
    lengthscale: float = 0.05

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")
        if not (self.A_sigma > 0 and self.K_sigma > 0):
            raise ValueError("sd asymptotes must be positive")


def _sigmoid(lam, left, right, spec: FidelityPriorSpec):
    lam = np.asarray(lam, dtype=float)
    return left + (right - left) * special.expit(spec.B_rate * (lam - spec.lambda_0))


def prior_mean(lam, spec: FidelityPriorSpec = FidelityPriorSpec()):
    return _sigmoid(lam, spec.A_mu, spec.K_mu, spec)


def prior_sd(lam, spec: FidelityPriorSpec = FidelityPriorSpec()):
    return _sigmoid(lam, spec.A_sigma, spec.K_sigma, spec)


def prior_covariance(stretch, spec: FidelityPriorSpec = FidelityPriorSpec()) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(stretch, dtype=float))
    if not np.all(np.isfinite(lam)):
        raise ValueError("stretches must be finite")
    sd = prior_sd(lam, spec)
    d = lam[:, None] - lam[None, :]
    return np.outer(sd, sd) * np.exp(-0.5 * (d / spec.lengthscale) ** 2)


def prior_cholesky(stretch, spec: FidelityPriorSpec = FidelityPriorSpec()) -> np.ndarray:
    """Lower Cholesky factor of the prior covariance after relative diagonal jitter."""
    cov = prior_covariance(stretch, spec)
    cov[np.diag_indices_from(cov)] += JITTER * np.max(np.diag(cov))
    return np.linalg.cholesky(cov)


def sample_prior(stretch, n_draws: int, spec: FidelityPriorSpec = FidelityPriorSpec(), seed=0):
    """Draws of the fidelity field ``gamma`` from its prior, shape ``(n_draws, N)``."""
    rng = np.random.default_rng(seed)
    L = prior_cholesky(stretch, spec)
    z = rng.standard_normal((n_draws, L.shape[0]))
    chi = prior_mean(stretch, spec) + z @ L.T
    return special.expit(chi)


def log_gamma(chi):
    """``log logistic(chi)`` without overflow."""
    return -np.logaddexp(0.0, -np.asarray(chi, dtype=float))


def fidelity_loglik(residual, chi, sigma_obs: float):
    """Sum of tempered Gaussian log factors, dropping ``-log(sigma sqrt(2 pi))``."""
    chi = np.asarray(chi, dtype=float)
    lg = log_gamma(chi)
    return float(np.sum(0.5 * lg - np.exp(lg) * np.asarray(residual) ** 2 / (2.0 * sigma_obs**2)))


def selection_log_posterior(xi, chi, exp: Experiment, sigma_obs: float,
                            spec: FidelityPriorSpec = FidelityPriorSpec(), chol=None) -> float:
    """Unnormalised log posterior over ``(xi, chi)`` for one experiment.

    The fidelity prior term includes its normalising determinant, so values are
    comparable across experiments of equal length.
    """
    if sigma_obs <= 0:
        raise ValueError("sigma_obs must be positive")
    xi = np.asarray(xi, dtype=float)
    chi = np.asarray(chi, dtype=float)
    if chi.shape != exp.stretch.shape:
        raise ValueError("chi must have one entry per observation")
    L = prior_cholesky(exp.stretch, spec) if chol is None else chol
    with np.errstate(all="ignore"):
        pred = model_stress(exp.stretch, xi)
    if not np.all(np.isfinite(pred)):
        return -math.inf
    z = linalg.solve_triangular(L, chi - prior_mean(exp.stretch, spec), lower=True)
    chi_prior = -0.5 * float(z @ z) - float(np.sum(np.log(np.diag(L)))) - 0.5 * len(z) * math.log(2 * math.pi)
    return xi_log_prior(xi) + chi_prior + fidelity_loglik(exp.stress - pred, chi, sigma_obs)


class SelectionPosterior:
    """Log density over the sampler state ``[xi (4), w (N)]``.

    Differs from :func:`selection_log_posterior` at ``chi = mu + L w`` only by the
    constant ``log det L``. The last model evaluation is cached, since Gibbs
    sweeps over the fidelity block leave ``xi`` unchanged.
    """

    def __init__(self, exp: Experiment, sigma_obs: float, spec: FidelityPriorSpec = FidelityPriorSpec()):
        if sigma_obs <= 0:
            raise ValueError("sigma_obs must be positive")
        self.stretch = np.array(exp.stretch)
        self.stress = np.array(exp.stress)
        self.sigma_obs = float(sigma_obs)
        self.spec = spec
        self.mu = prior_mean(self.stretch, spec)
        self.chol = prior_cholesky(self.stretch, spec)
        self.n = len(self.stretch)
        self.dimension = 4 + self.n
        self._cache = {}

    def chi(self, state):
        return self.mu + self.chol @ state[4:]

    def gamma(self, state):
        return special.expit(self.chi(state))

    def _squared_residuals(self, xi):
        # two slots: the current state and the latest proposal
        key = xi.tobytes()
        if key in self._cache:
            self._cache[key] = self._cache.pop(key)
        else:
            with np.errstate(all="ignore"):
                pred = model_stress(self.stretch, xi)
            sq = (self.stress - pred) ** 2
            if len(self._cache) >= 2:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = sq if np.all(np.isfinite(sq)) else None
        return self._cache[key]

    def __call__(self, state):
        state = np.asarray(state, dtype=float)
        xi, w = state[:4], state[4:]
        sq = self._squared_residuals(xi)
        if sq is None:
            return -math.inf
        lg = log_gamma(self.mu + self.chol @ w)
        data = 0.5 * np.sum(lg) - np.sum(np.exp(lg) * sq) / (2.0 * self.sigma_obs**2)
        return xi_log_prior(xi) - 0.5 * float(w @ w) + float(data)


@dataclass
class SelectionConfig:
    n_burnin: int = 10_000
    n_samples: int = 50_000
    n_chains: int = 3
    seed: int = 0
    thin: int = 10
    target_accept: float = 0.234
    threshold: float = 0.3
    workers: int = 1
    init_jitter: float = 0.1

    @classmethod
    def paper_scale(cls, **kwargs) -> "SelectionConfig":
        return cls(n_burnin=2_500_000, n_samples=5_000_000, thin=1000, **kwargs)


@dataclass
class FidelitySummary:
    experiment_id: str
    stretch: np.ndarray
    fidelity_mean: np.ndarray
    xi_draws: np.ndarray  # (n_chains, n_draws, 4)
    rhat: np.ndarray
    ess: np.ndarray
    block_acceptance: list
    converged: bool
    truncation_index: Optional[int]
    warnings: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "experiment": self.experiment_id,
            "rhat": dict(zip(PARAM_NAMES, map(_none_if_nan, self.rhat))),
            "ess": dict(zip(PARAM_NAMES, map(_none_if_nan, self.ess))),
            "block_acceptance": self.block_acceptance,
            "converged": self.converged,
            "truncation_index": self.truncation_index,
            "warnings": self.warnings,
            "config": self.config,
        }


def _none_if_nan(x):
    return None if not np.isfinite(x) else float(x)


def _map_start(exp: Experiment, sigma_obs: float, spec: FidelityPriorSpec):
    """Penalised robust fit of ``xi`` with prior-mean fidelity weights."""
    weights = np.sqrt(special.expit(prior_mean(exp.stretch, spec)))

    def resid(xi):
        with np.errstate(all="ignore"):
            r = weights * (exp.stress - model_stress(exp.stretch, xi)) / sigma_obs
        r = np.where(np.isfinite(r), r, 1e6)
        return np.concatenate([r, (xi - XI_PRIOR_MEAN) / XI_PRIOR_SD])

    best = None
    for start in (XI_PRIOR_MEAN, XI_PRIOR_MEAN + np.array([0, 0, 0.5, 0.5]),
                  XI_PRIOR_MEAN - np.array([0, 0, 0.5, 0.5])):
        fit = optimize.least_squares(resid, start, loss="soft_l1", f_scale=3.0, method="trf")
        if best is None or fit.cost < best.cost:
            best = fit
    return best.x


class _GammaTransform:
    def __init__(self, posterior: SelectionPosterior):
        self.posterior = posterior

    def __call__(self, state):
        return self.posterior.gamma(state)


class _Init:
    def __init__(self, xi0, n, jitter):
        self.xi0, self.n, self.jitter = xi0, n, jitter

    def __call__(self, rng):
        xi = self.xi0 + self.jitter * XI_PRIOR_SD * rng.standard_normal(4)
        return np.concatenate([xi, np.zeros(self.n)])


def run_selection(exp: Experiment, sigma_obs: float, config: SelectionConfig = SelectionConfig(),
                  spec: FidelityPriorSpec = FidelityPriorSpec()) -> FidelitySummary:
    """Sample the data-selection posterior of one (clipped) experiment."""
    if len(exp) == 0:
        raise DataError("experiment has no observations")
    post = SelectionPosterior(exp, sigma_obs, spec)
    target = LogDensityTarget(dimension=post.dimension, log_density=post)
    blocks = GibbsBlockSpec(
        blocks=[list(range(4)), list(range(4, post.dimension))],
        covariances=[np.diag((0.05 * XI_PRIOR_SD) ** 2), None],
        adapt_covariance=[True, False],
        scales=[1.0, 2.38 / math.sqrt(post.n)],
    )
    rwm_cfg = RWMConfig(n_burnin=config.n_burnin, n_samples=config.n_samples, n_chains=config.n_chains,
                        seed=config.seed, target_accept=config.target_accept, thin=config.thin,
                        workers=config.workers)
    xi0 = _map_start(exp, sigma_obs, spec)
    chains = rwm_gibbs(target, blocks, rwm_cfg, _Init(xi0, post.n, config.init_jitter),
                       mean_transform=_GammaTransform(post))

    means = np.mean([c.transformed_mean for c in chains], axis=0)
    xi_draws = np.stack([c.draws[:, :4] for c in chains])
    rhat = split_rhat(xi_draws)
    ess = effective_sample_size(xi_draws)
    converged = bool(np.all(np.nan_to_num(rhat, nan=np.inf) <= RHAT_THRESHOLD))
    warnings = [w for c in chains for w in c.warnings]
    if not converged:
        warnings.append(f"not converged: max split R-hat {np.nanmax(rhat):.3f}")
    below = np.nonzero(means < config.threshold)[0]
    return FidelitySummary(
        experiment_id=exp.id,
        stretch=np.array(exp.stretch),
        fidelity_mean=means,
        xi_draws=xi_draws,
        rhat=rhat,
        ess=ess,
        block_acceptance=[c.block_acceptance for c in chains],
        converged=converged,
        truncation_index=int(below[0]) if len(below) else None,
        warnings=warnings,
        config={**asdict(config), "sigma_obs": float(sigma_obs), "prior": asdict(spec),
                "chain_seeds": [int(c.seed) for c in chains]},
    )


def estimate_sigma(exp: Experiment, max_strain: float = 0.02) -> float:
    """Residual sd of a least-squares model fit to observations below ``max_strain``."""
    mask = exp.strain < max_strain
    n = int(mask.sum())
    if n < 6:
        raise DataError(f"need at least 6 observations below strain {max_strain}, have {n}")
    lam, y = exp.stretch[mask], exp.stress[mask]

    def resid(xi):
        with np.errstate(all="ignore"):
            r = y - model_stress(lam, xi)
        return np.where(np.isfinite(r), r, 1e6)

    fit = optimize.least_squares(resid, XI_PRIOR_MEAN, method="trf")
    r = resid(fit.x)
    return float(math.sqrt(np.sum(r**2) / (n - 4)))
