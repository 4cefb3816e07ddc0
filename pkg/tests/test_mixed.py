import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from tendonfit.constitutive import log_abs_det_jacobian, model_stress, xi_to_theta
from tendonfit.dataio import DataError, Experiment, Population
from tendonfit.mixed import (
    MixedEffectsModel,
    PopulationConfig,
    PopulationParams,
    cholesky_to_cpc,
    cpc_to_cholesky,
    fit_population,
    kde_mode,
    linear_modulus_comparison,
    lkj_cholesky_logpdf,
    lkj_corr_logpdf,
    lognormal_moment_match,
    ols_slope,
    population_log_prior,
    posterior_from_draws,
    posterior_predictive_params,
    posterior_predictive_stress,
)
from tendonfit.priors import XI_PRIOR_MEAN, XI_PRIOR_SD
from tendonfit.samplers import GibbsBlockSpec, LogDensityTarget, RWMConfig, rwm_gibbs
from tendonfit.synth import PopulationSpec, SyntheticSpec, generate_population

SD_POP = np.array([0.3, 0.15, 0.2, 0.2])


def _population(n=3, seed=1, npts=41, with_fidelity=False):
    spec = SyntheticSpec(population=PopulationSpec(XI_PRIOR_MEAN, np.diag(SD_POP**2), n),
                         stretch=np.round(np.linspace(1.0, 1.08, npts), 12), seed=seed)
    pop = generate_population(spec)
    if with_fidelity:
        rng = np.random.default_rng(seed)
        exps = [Experiment(e.id, e.tendon_type, e.stretch, e.stress, fidelity=rng.uniform(0.3, 1.0, len(e)))
                for e in pop.experiments]
        pop = Population(tuple(exps), pop.sigma_obs)
    return pop


def _random_state(model, rng):
    n = model.n_experiments
    return model.pack(np.tile(XI_PRIOR_MEAN, (n, 1)) + 0.15 * rng.standard_normal((n, 4)),
                      XI_PRIOR_MEAN + 0.1 * rng.standard_normal(4),
                      rng.normal(-1.0, 0.5, 4), rng.normal(0.0, 0.7, 6))


# --- correlation factor ------------------------------------------------------------

@given(hnp.arrays(float, 6, elements=st.floats(-3, 3)))
def test_cpc_roundtrip_and_unit_rows(y):
    L, _ = cpc_to_cholesky(y)
    assert np.allclose(np.sum(L * L, axis=1), 1.0, atol=1e-12)
    assert np.all(np.diag(L) > 0)
    assert np.allclose(cholesky_to_cpc(L), y, atol=1e-8)


def test_cpc_derivatives_match_finite_differences(rng):
    y = rng.normal(size=6)
    L, lj, dL, dlj = cpc_to_cholesky(y, with_grad=True)
    for m in range(6):
        e = np.zeros(6)
        e[m] = 1e-6
        Lp, ljp = cpc_to_cholesky(y + e)
        Lm, ljm = cpc_to_cholesky(y - e)
        assert np.allclose(dL[m], (Lp - Lm) / 2e-6, atol=1e-7)
        assert dlj[m] == pytest.approx((ljp - ljm) / 2e-6, abs=1e-6)


def _corr_upper(L):
    C = L @ L.T
    return C[np.tril_indices(4, -1)]


def test_cpc_log_jacobian_matches_numerical(rng):
    # log |d vech(C) / d y| from the factor plus the L -> C Jacobian
    for _ in range(5):
        y = rng.normal(size=6)
        L, lj = cpc_to_cholesky(y)
        J = np.empty((6, 6))
        for m in range(6):
            e = np.zeros(6)
            e[m] = 1e-6
            J[:, m] = (_corr_upper(cpc_to_cholesky(y + e)[0]) - _corr_upper(cpc_to_cholesky(y - e)[0])) / 2e-6
        assert lj + lkj_cholesky_logpdf(L) == pytest.approx(np.log(abs(np.linalg.det(J))), abs=1e-6)


def test_lkj_one_is_flat_on_correlations(rng):
    C1 = cpc_to_cholesky(rng.normal(size=6))[0]
    C2 = cpc_to_cholesky(rng.normal(size=6))[0]
    assert lkj_corr_logpdf(C1 @ C1.T) == lkj_corr_logpdf(C2 @ C2.T) == 0.0


def test_lkj_marginal_correlation_is_beta():
    # under LKJ(1) in 4-d each off-diagonal correlation is Beta(2, 2) on (-1, 1): variance 1/5
    def logp(y):
        L, lj = cpc_to_cholesky(y)
        return lkj_cholesky_logpdf(L) + lj

    chains = rwm_gibbs(LogDensityTarget(6, logp), GibbsBlockSpec([list(range(6))]),
                       RWMConfig(n_burnin=3000, n_samples=40_000, n_chains=2, seed=4, thin=5), np.zeros(6))
    r = np.array([_corr_upper(cpc_to_cholesky(y)[0]) for c in chains for y in c.draws])
    assert np.allclose(r.mean(axis=0), 0.0, atol=0.04)
    assert np.allclose(r.var(axis=0), 0.2, atol=0.02)
    u = (r[:, 0] + 1) / 2
    assert stats.kstest(u[::10], stats.beta(2, 2).cdf).pvalue > 1e-3


# --- priors and joint density ------------------------------------------------------

def test_population_prior_at_mean():
    pop = PopulationParams(XI_PRIOR_MEAN, np.ones(4), np.eye(4))
    want = -np.sum(np.log(XI_PRIOR_SD * math.sqrt(2 * math.pi)))
    want += 4 * (math.log(2) + stats.t(3).logpdf(1.0))
    assert population_log_prior(pop) == pytest.approx(want, rel=1e-12)
    bad = PopulationParams(XI_PRIOR_MEAN, np.array([0.0, 1, 1, 1]), np.eye(4))
    assert population_log_prior(bad) == -math.inf


def test_gradient_matches_finite_differences(rng):
    model = MixedEffectsModel.from_population(_population(with_fidelity=True))
    for _ in range(20):
        x = _random_state(model, rng)
        _, g = model.value_and_grad(x)
        fd = np.empty_like(x)
        for k in range(len(x)):
            h = 1e-6 * max(1.0, abs(x[k]))
            e = np.zeros_like(x)
            e[k] = h
            fd[k] = (model.log_density(x + e) - model.log_density(x - e)) / (2 * h)
        assert np.all(np.abs(fd - g) <= 1e-5 * np.maximum(np.abs(g), 1.0))


def test_unconstrained_density_is_constrained_plus_jacobian(rng):
    model = MixedEffectsModel.from_population(_population(with_fidelity=True))
    for _ in range(10):
        x = _random_state(model, rng)
        xi, _, log_s, cpc = model.unpack(x)
        pop = model.population(x)
        L, lj = cpc_to_cholesky(cpc)
        want = model.constrained_log_density(xi_to_theta(xi), pop)
        want += float(np.sum(log_abs_det_jacobian(xi))) + float(np.sum(log_s)) + lj
        got = model.log_density(x)
        assert got == pytest.approx(want, rel=1e-10)


def test_experiment_order_does_not_matter(rng):
    pop = _population(n=4, with_fidelity=True)
    model = MixedEffectsModel.from_population(pop)
    perm = [2, 0, 3, 1]
    other = MixedEffectsModel([pop.experiments[i] for i in perm], pop.sigma_obs)
    for _ in range(5):
        x = _random_state(model, rng)
        xi, mu, ls, cpc = model.unpack(x)
        y = other.pack(xi[perm], mu, ls, cpc)
        assert other.log_density(y) == pytest.approx(model.log_density(x), rel=1e-12, abs=1e-12)


def test_doubling_one_fidelity_weight_shifts_density_by_residual(rng):
    pop = _population(n=2, with_fidelity=True)
    e = pop.experiments[0]
    fid = np.array(e.fidelity) * 0.5
    base = Experiment(e.id, e.tendon_type, e.stretch, e.stress, fidelity=fid)
    fid2 = fid.copy()
    fid2[5] *= 2
    doubled = Experiment(e.id, e.tendon_type, e.stretch, e.stress, fidelity=fid2)
    m1 = MixedEffectsModel([base, pop.experiments[1]], pop.sigma_obs)
    m2 = MixedEffectsModel([doubled, pop.experiments[1]], pop.sigma_obs)
    x = _random_state(m1, rng)
    r = e.stress[5] - model_stress(e.stretch[5:6], m1.unpack(x)[0][0])[0]
    shift = -r**2 / (2 * pop.sigma_obs**2) * fid[5]
    assert m2.log_density(x) - m1.log_density(x) == pytest.approx(shift, rel=1e-9, abs=1e-10)


def test_unit_weights_give_gaussian_likelihood(rng):
    pop = _population(n=2)
    model = MixedEffectsModel.from_population(pop)
    xi = np.tile(XI_PRIOR_MEAN, (2, 1))
    want = 0.0
    for e, x in zip(pop.experiments, xi):
        want += np.sum(stats.norm.logpdf(e.stress, model_stress(e.stretch, x), pop.sigma_obs))
    n = sum(len(e) for e in pop.experiments)
    const = n * math.log(pop.sigma_obs * math.sqrt(2 * math.pi))
    assert model.log_likelihood(xi) == pytest.approx(want + const, rel=1e-12)


def test_empty_population_rejected():
    with pytest.raises(DataError):
        MixedEffectsModel([], 0.4)


# --- predictives -------------------------------------------------------------------

def _fake_posterior(n_draws=2000, scale=0.05, seed=0):
    # draws around a fixed state; enough to exercise the predictive code paths
    rng = np.random.default_rng(seed)
    pop = _population(n=2)
    model = MixedEffectsModel.from_population(pop)
    x0 = model.pack(np.stack([e.meta["xi"] for e in pop.experiments]), XI_PRIOR_MEAN, np.log(SD_POP), np.zeros(6))
    draws = x0 + scale * rng.standard_normal((2, n_draws, len(x0)))
    return pop, posterior_from_draws(model.ids, list(draws), pop.sigma_obs, seeds=[1, 2])


def test_zero_population_scale_concentrates_predictive():
    pop = _population(n=1)
    model = MixedEffectsModel.from_population(pop)
    x0 = model.pack(XI_PRIOR_MEAN[None], XI_PRIOR_MEAN, np.full(4, -40.0), np.zeros(6))
    post = posterior_from_draws(model.ids, [np.tile(x0, (50, 1))], pop.sigma_obs)
    theta = posterior_predictive_params(post, seed=1)
    assert np.allclose(theta, xi_to_theta(XI_PRIOR_MEAN), rtol=1e-12)


def test_predictive_variance_exceeds_tendon_variance():
    _, post = _fake_posterior()
    theta = posterior_predictive_params(post, seed=3)
    xi_star = np.log(theta[:, :2])
    for i in range(post.n_experiments):
        assert np.all(xi_star.var(axis=0) >= post.xi(i)[:, :2].var(axis=0))


def test_stress_band_collapses_and_widens():
    pop, post = _fake_posterior(n_draws=200, scale=0.0)
    lam = pop.experiments[0].stretch
    band = posterior_predictive_stress(post, 0, lam, 0.0)
    curve = model_stress(lam, post.xi(0)[0])
    assert np.allclose(band["lower"], curve) and np.allclose(band["upper"], curve)
    narrow = posterior_predictive_stress(post, 0, lam, 0.1, seed=2)
    wide = posterior_predictive_stress(post, 0, lam, 0.5, seed=2)
    assert np.all(wide["upper"] - wide["lower"] > narrow["upper"] - narrow["lower"])
    with pytest.raises(IndexError):
        posterior_predictive_stress(post, 5, lam, 0.1)


def test_kde_mode_of_lognormal():
    x = np.random.default_rng(0).lognormal(math.log(800), 0.3, 20_000)
    assert kde_mode(x) == pytest.approx(800 * math.exp(-0.09), rel=0.05)


# --- linear modulus comparison -------------------------------------------------------

def test_ols_slope_exact_on_line():
    x = np.linspace(1.05, 1.1, 7)
    assert ols_slope(x, 661.157 * x - 3.0) == pytest.approx(661.157, rel=1e-12)


def test_lognormal_moment_match():
    mu, s = lognormal_moment_match(661.157, 0.0)
    assert s == 0.0 and mu == pytest.approx(math.log(661.157))
    mu, s = lognormal_moment_match(600.0, 90.0**2)
    d = stats.lognorm(s=s, scale=math.exp(mu))
    assert d.mean() == pytest.approx(600.0) and d.var() == pytest.approx(8100.0)


def test_linear_modulus_comparison_windows():
    lam = np.round(np.linspace(1.0, 1.1, 21), 12)
    exps = [Experiment(f"e{k}", "SDFT", lam, m * (lam - 1.0)) for k, m in enumerate([500.0, 700.0, 900.0])]
    comp = linear_modulus_comparison(exps, [1.04, 1.04, 1.11], [1.1, 1.1, 1.1])
    assert comp.valid == ["e0", "e1"] and comp.n_total == 3
    assert comp.slopes["e0"] == pytest.approx(500.0)
    assert comp.lognormal_mean == pytest.approx(600.0)
    empty = linear_modulus_comparison(exps, [1.2] * 3, [1.1] * 3)
    assert not empty.valid and empty.warnings


# --- sampling -----------------------------------------------------------------------

def test_single_tendon_fit_runs():
    pop = _population(n=1, npts=21)
    post = fit_population(pop, PopulationConfig(n_warmup=60, n_samples=40, n_chains=1, seed=2, max_tree_depth=6))
    assert post.draws().shape == (40, 4 + 4 + 4 + 6)
    rep = post.report()
    assert rep["experiments"] == [pop.experiments[0].id]
    assert np.all(post.scales() > 0)
