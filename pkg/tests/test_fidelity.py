import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special, stats

from tendonfit.constitutive import ModelParams, model_stress, to_unconstrained
from tendonfit.dataio import Experiment
from tendonfit.fidelity import (
    FidelityPriorSpec,
    SelectionConfig,
    SelectionPosterior,
    estimate_sigma,
    fidelity_loglik,
    prior_cholesky,
    prior_covariance,
    prior_mean,
    prior_sd,
    run_selection,
    sample_prior,
    selection_log_posterior,
)
from tendonfit.priors import xi_log_prior
from tendonfit.synth import SyntheticSpec, generate_experiment


def test_prior_mean_and_sd_values():
    assert prior_mean(1.1) == pytest.approx(2.5)
    assert prior_mean(1.0) == pytest.approx(4 - 3 / (1 + math.exp(5)), abs=1e-12)
    # the commonly quoted decimals (3.97993, 0.255017) are rounded loosely
    assert prior_mean(1.0) == pytest.approx(3.97993, abs=2e-5)
    assert prior_mean(50.0) == pytest.approx(1.0)
    assert prior_sd(1.1) == pytest.approx(0.625)
    assert prior_sd(1.0) == pytest.approx(0.25 + 0.75 / (1 + math.exp(5)), abs=1e-12)
    assert prior_sd(1.0) == pytest.approx(0.255017, abs=5e-6)
    assert prior_sd(50.0) == pytest.approx(1.0)


def test_prior_covariance_entries():
    cov = prior_covariance([1.0, 1.1, 5.0])
    assert cov[0, 1] == pytest.approx(prior_sd(1.0) * 0.625 * math.exp(-2), rel=1e-12)
    assert cov[0, 1] == pytest.approx(0.021573, abs=5e-6)
    assert np.allclose(np.diag(cov), prior_sd([1.0, 1.1, 5.0]) ** 2)
    assert cov[0, 2] < 1e-300


@pytest.mark.parametrize("n", [2, 200, 2000])
def test_prior_cholesky_factorizes_fine_grids(n):
    lam = np.linspace(1.0, 1.15, n)
    L = prior_cholesky(lam)
    assert np.all(np.isfinite(L))
    cov = prior_covariance(lam)
    assert np.allclose(L @ L.T, cov, atol=1e-8)
    assert np.allclose(cov, cov.T)


def test_prior_median_at_midpoint():
    g = sample_prior(np.array([1.1]), 100_000, seed=1)[:, 0]
    assert np.median(g) == pytest.approx(special.expit(2.5), abs=0.01)


def test_single_observation_likelihood():
    r, sigma = 0.7, 0.4
    chi = special.logit(0.5)
    assert fidelity_loglik([r], [chi], sigma) == pytest.approx(0.5 * math.log(0.5) - 0.25 * r**2 / sigma**2)


def test_full_fidelity_reduces_to_gaussian_likelihood():
    r = np.array([0.3, -0.2, 1.1])
    sigma = 0.5
    got = fidelity_loglik(r, np.full(3, 60.0), sigma)
    want = np.sum(stats.norm.logpdf(r, scale=sigma)) + 3 * math.log(sigma * math.sqrt(2 * math.pi))
    assert got == pytest.approx(want, abs=1e-12)


@given(st.floats(-4, 4), st.floats(0.01, 3), st.floats(0.01, 2.0))
def test_residual_penalty_grows_with_fidelity(chi, r, dchi):
    def penalty(c):
        return fidelity_loglik([r], [c], 1.0) - 0.5 * float(-np.logaddexp(0, -c))
    assert penalty(chi + dchi) < penalty(chi)


def test_vanishing_fidelity_drives_likelihood_down():
    assert fidelity_loglik([0.0, 0.0], [-800.0, -800.0], 1.0) < -700


def _experiment(n=30, seed=0, top=0.1):
    params = ModelParams(2.8665, 931.36, 1.022352, 1.049725)
    spec = SyntheticSpec(params=params, stretch=np.round(np.linspace(1.0, 1 + top, n), 12), seed=seed)
    return generate_experiment(spec, "t")


def test_whitened_state_matches_full_posterior_up_to_constant(rng):
    exp = _experiment()
    post = SelectionPosterior(exp, 0.4)
    logdet = float(np.sum(np.log(np.diag(post.chol))))
    const = None
    for _ in range(5):
        xi = to_unconstrained(ModelParams(2.8665, 931.36, 1.022352, 1.049725)).as_array() + 0.05 * rng.normal(size=4)
        w = rng.normal(size=post.n)
        state = np.concatenate([xi, w])
        full = selection_log_posterior(xi, post.chi(state), exp, 0.4)
        diff = post(state) - full
        const = diff if const is None else const
        assert diff == pytest.approx(const, abs=1e-9)
    assert const == pytest.approx(logdet + 0.5 * post.n * math.log(2 * math.pi), abs=1e-8)


def test_full_fidelity_posterior_is_likelihood_plus_priors():
    exp = _experiment()
    xi = to_unconstrained(ModelParams(2.8665, 931.36, 1.022352, 1.049725)).as_array()
    chi = np.full(len(exp), 60.0)
    r = exp.stress - model_stress(exp.stretch, xi)
    L = prior_cholesky(exp.stretch)
    z = np.linalg.solve(L, chi - prior_mean(exp.stretch))
    chi_prior = -0.5 * z @ z - np.sum(np.log(np.diag(L))) - 0.5 * len(z) * math.log(2 * math.pi)
    plain = -np.sum(r**2) / (2 * 0.4**2)
    assert selection_log_posterior(xi, chi, exp, 0.4) == pytest.approx(xi_log_prior(xi) + chi_prior + plain, rel=1e-10)


def test_invalid_parameters_are_rejected():
    exp = _experiment()
    post = SelectionPosterior(exp, 0.4)
    assert post(np.concatenate([[0, 0, 0, np.inf], np.zeros(post.n)])) == -math.inf


def test_short_selection_run_is_sane():
    exp = _experiment(n=25, top=0.06)
    cfg = SelectionConfig(n_burnin=2000, n_samples=4000, n_chains=2, thin=4, seed=3)
    s = run_selection(exp, 0.4, cfg)
    assert s.fidelity_mean.shape == (25,)
    assert np.all((s.fidelity_mean > 0) & (s.fidelity_mean < 1))
    assert s.xi_draws.shape == (2, 1000, 4)
    assert s.truncation_index is None
    assert np.all(s.fidelity_mean > 0.5)
    rep = s.report()
    assert rep["config"]["chain_seeds"] and "rhat" in rep


def test_estimate_sigma_recovers_noise_level():
    params = ModelParams(2.8665, 931.36, 1.022352, 1.049725)
    spec = SyntheticSpec(params=params, stretch=np.round(np.linspace(1.0, 1.02, 201), 12), noise_sd=0.3, seed=4)
    est = estimate_sigma(generate_experiment(spec, "s"), max_strain=0.02)
    assert est == pytest.approx(0.3, rel=0.15)


def test_estimate_sigma_needs_enough_points():
    exp = Experiment("e", "SDFT", [1.0, 1.01, 1.03], [0.0, 0.1, 0.5])
    with pytest.raises(ValueError):
        estimate_sigma(exp)
