"""Acceptance criteria 1-10, one test each.

Every test records a PASS/FAIL line, shown in the terminal summary, and
asserts at the stated tolerance.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import special

from conftest import ACCEPTANCE_LINES
from tendonfit.cli import main
from tendonfit.constitutive import (
    ModelParams,
    engineering_stress,
    fibril_stress,
    from_unconstrained,
    linear_modulus,
    log_abs_det_jacobian,
    strain_energy,
    to_unconstrained,
    xi_to_theta,
)
from tendonfit.dataio import DEFAULT_SIGMA_OBS, Population, clip_to_max_stress, load_experiment, truncate
from tendonfit.fidelity import SelectionConfig, run_selection, sample_prior
from tendonfit.mixed import (
    PopulationConfig,
    fit_population,
    linear_modulus_comparison,
    posterior_predictive_params,
    predictive_modes,
)
from tendonfit.priors import XI_PRIOR_MEAN
from tendonfit.samplers import GibbsBlockSpec, LogDensityTarget, NUTSConfig, RWMConfig, nuts, rwm_gibbs, split_rhat
from tendonfit.synth import PopulationSpec, SyntheticSpec, generate_experiment, generate_population, \
    quadrature_fibril_stress

PAPER_DATA = os.environ.get("TENDONFIT_PAPER_DATA")


def record(number, ok, detail, started):
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail} ({time.perf_counter() - started:.1f}s)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _random_params(rng, n):
    a = 1.0 + rng.uniform(0.001, 0.08, n)
    w = rng.uniform(0.002, 0.08, n)
    return [ModelParams(float(m), float(f), float(x), float(x + y))
            for m, f, x, y in zip(rng.uniform(0.1, 20, n), rng.uniform(50, 3000, n), a, w)]


def test_c1_closed_form_vs_quadrature():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, n_points, counts = 0.0, 0, np.zeros(4, dtype=int)
    for p in _random_params(rng, 100):
        # 25 stretches in each regime: [1, a), [a, c), [c, b), [b, b + 0.1]
        edges = [(1.0, p.a), (p.a, p.c), (p.c, p.b), (p.b, p.b + 0.1)]
        lam = np.concatenate([rng.uniform(lo, hi, 25) for lo, hi in edges])
        closed = fibril_stress(lam, p)
        quad = quadrature_fibril_stress(lam, p)
        regime = np.searchsorted([p.a, p.c, p.b], lam, side="right")
        counts += np.bincount(regime, minlength=4)
        zero = quad == 0
        assert np.all(closed[zero] == 0)
        rel = np.abs(closed[~zero] - quad[~zero]) / np.abs(quad[~zero])
        worst = max(worst, float(rel.max(initial=0.0)))
        n_points += len(lam)
    ok = n_points >= 10_000 and worst <= 1e-6 and np.all(counts > 0) and time.perf_counter() - t0 < 60
    record(1, ok, f"{n_points} points, regime counts {counts.tolist()}, worst rel err {worst:.2e} (tol 1e-6)", t0)


def test_c2_energy_stress_consistency():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    params = _random_params(rng, 1000)
    for p in params:
        lam = float(rng.uniform(1.001, p.b + 0.1))
        h = 1e-6 * lam
        fd = (strain_energy(lam + h, p) - strain_energy(lam - h, p)) / (2 * h)
        n = engineering_stress(lam, p)
        worst = max(worst, abs(fd - n) / abs(n))
    record(2, worst <= 1e-5, f"1000 interior points, worst rel err {worst:.2e} (tol 1e-5)", t0)


def test_c3_linear_modulus():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst, below = 0.0, True
    for p in _random_params(rng, 200):
        lam_bar = float(p.b + rng.uniform(0.001, 0.2))
        h = 1e-5
        fd = (fibril_stress(lam_bar + h, p) - fibril_stress(lam_bar - h, p)) / (2 * h) if lam_bar - h >= p.b else None
        if fd is not None:
            worst = max(worst, abs(linear_modulus(p, lam_bar) - fd) / fd)
        grid = np.linspace(p.b, p.b + 1.0, 50)
        below &= bool(np.all(linear_modulus(p, grid) < p.fibril_term))
    record(3, worst <= 1e-6 and below,
           f"worst rel err vs FD slope {worst:.2e} (tol 1e-6); LM < fibril modulus everywhere: {below}", t0)


def test_c4_transform_roundtrip_and_jacobian():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_rt, worst_jac = 0.0, 0.0
    for p in _random_params(rng, 500):
        back = from_unconstrained(to_unconstrained(p)).as_array()
        worst_rt = max(worst_rt, float(np.max(np.abs(back - p.as_array()) / p.as_array())))
        xi = to_unconstrained(p).as_array()
        J = np.empty((4, 4))
        for j in range(4):
            e = np.zeros(4)
            e[j] = 1e-6
            J[:, j] = (xi_to_theta(xi + e) - xi_to_theta(xi - e)) / 2e-6
        worst_jac = max(worst_jac, abs(log_abs_det_jacobian(xi) - np.log(abs(np.linalg.det(J)))))
    ok = worst_rt <= 1e-12 and worst_jac <= 1e-6
    record(4, ok, f"roundtrip rel err {worst_rt:.1e} (tol 1e-12), log-Jacobian err {worst_jac:.1e} (tol 1e-6)", t0)


class _StdNormal:
    def vg(self, x):
        return -0.5 * float(x @ x), -x

    def __call__(self, x):
        return -0.5 * float(x @ x)


def test_c5_sampler_calibration():
    t0 = time.perf_counter()
    g = _StdNormal()
    target = LogDensityTarget(4, g, value_and_grad=g.vg)
    blocks = GibbsBlockSpec([[0, 1], [2, 3]], adapt_covariance=[True, False])
    rwm = rwm_gibbs(target, blocks, RWMConfig(n_burnin=10_000, n_samples=100_000, n_chains=3, seed=5),
                    np.random.default_rng(0).normal(size=(3, 4)))
    rates = [r for c in rwm for r in c.block_acceptance]
    rhat_rwm = float(np.max(split_rhat(np.stack([c.draws for c in rwm]))))
    rwm_ok = all(abs(r - 0.234) <= 0.05 for r in rates) and rhat_rwm < 1.01

    ch = nuts(target, NUTSConfig(n_warmup=1000, n_samples=10_000, n_chains=4, seed=5, adapt_delta=0.99),
              np.zeros(4))
    x = np.concatenate([c.draws for c in ch])
    div = sum(c.divergences for c in ch)
    mean_err = float(np.max(np.abs(x.mean(axis=0))))
    var_err = float(np.max(np.abs(x.var(axis=0) - 1.0)))
    nuts_ok = div == 0 and mean_err <= 0.05 and var_err <= 0.05
    detail = (f"RWM block acceptance {min(rates):.3f}-{max(rates):.3f} (0.234+-0.05), R-hat {rhat_rwm:.4f} (<1.01); "
              f"NUTS divergences {div}, max |mean| {mean_err:.3f} (<=0.05), max var err {var_err:.3f} (<=0.05)")
    record(5, rwm_ok and nuts_ok and time.perf_counter() - t0 < 600, detail, t0)


def test_c6_fidelity_prior_reproduction():
    t0 = time.perf_counter()
    lam = np.round(np.linspace(1.0, 1.2, 41), 12)
    gamma = sample_prior(lam, 100_000, seed=6)
    at = {v: int(np.argmin(np.abs(lam - v))) for v in (1.02, 1.1, 1.15)}
    median = float(np.median(gamma[:, at[1.1]]))
    q_low = float(np.quantile(gamma[:, at[1.02]], 0.025))
    q_high = float(np.quantile(gamma[:, at[1.15]], 0.025))
    ok = abs(median - special.expit(2.5)) <= 0.01 and q_low > 0.9 and q_high < 0.5
    record(6, ok, f"median at 1.1 = {median:.4f} (target {special.expit(2.5):.4f}+-0.01); "
                  f"2.5% quantile at 1.02 = {q_low:.3f} (>0.9), at 1.15 = {q_high:.3f} (<0.5)", t0)


SELECTION_PARAMS = ModelParams(2.8665, 931.36, 1.022352, 1.049725)
SELECTION_GRID = np.round(np.linspace(1.0, 1.12, 121), 12)


def _selection(seed, onset):
    spec = SyntheticSpec(params=SELECTION_PARAMS, stretch=SELECTION_GRID, noise_sd=DEFAULT_SIGMA_OBS,
                         damage_onset=onset, softening=0.5, seed=seed)
    exp = clip_to_max_stress(generate_experiment(spec, f"seed{seed}"))
    summary = run_selection(exp, DEFAULT_SIGMA_OBS, SelectionConfig(seed=seed))
    return exp, summary


def test_c7_selection_on_synthetic_damage():
    t0 = time.perf_counter()
    hits, strains = 0, []
    for seed in range(10):
        exp, s = _selection(seed, onset=1.08)
        k = s.truncation_index
        strain = float(exp.stretch[k] - 1.0) if k is not None else float("nan")
        strains.append(round(strain, 4))
        hits += abs(strain - 0.08) <= 0.01
    trimmed = []
    for seed in range(10):
        exp, s = _selection(100 + seed, onset=None)
        k = s.truncation_index
        trimmed.append(0.0 if k is None else 1.0 - k / len(exp))
    elapsed = time.perf_counter() - t0
    ok = hits >= 8 and max(trimmed) <= 0.05 and elapsed < 1800
    record(7, ok, f"damaged: truncation strains {strains}, {hits}/10 within 0.08+-0.01 (need 8); "
                  f"undamaged: max trimmed fraction {max(trimmed):.3f} (<=0.05)", t0)


# desk-scale settings for the population recovery run; see the decisions ledger
C8_CONFIG = PopulationConfig(n_warmup=400, n_samples=600, n_chains=4, seed=8)
C8_SD = np.array([0.3, 0.15, 0.2, 0.2])


def test_c8_mixed_effects_recovery():
    t0 = time.perf_counter()
    spec = SyntheticSpec(population=PopulationSpec(XI_PRIOR_MEAN, np.diag(C8_SD**2), 6),
                         stretch=np.round(np.linspace(1.0, 1.08, 61), 12), seed=8)
    pop = generate_population(spec)
    post = fit_population(pop, C8_CONFIG)
    mu = post.mu_pop()
    lo, hi = np.percentile(mu, [2.5, 97.5], axis=0)
    cover = (lo <= XI_PRIOR_MEAN) & (XI_PRIOR_MEAN <= hi)
    max_rhat = float(np.nanmax(post.rhat))
    elapsed = time.perf_counter() - t0
    ok = bool(cover.all()) and max_rhat < 1.05 and elapsed < 7200
    record(8, ok, f"95% intervals {np.round(lo, 3).tolist()} .. {np.round(hi, 3).tolist()} "
                  f"cover truth {cover.tolist()}; max split R-hat {max_rhat:.3f} (<1.05); "
                  f"divergences {sum(c.divergences for c in post.chains)}", t0)


def _paper_run(directory: Path):
    exps = [clip_to_max_stress(load_experiment(p)) for p in sorted(directory.glob("*.csv"))]
    cfg = SelectionConfig(seed=9)
    trimmed, b_means, tops = [], [], []
    for e in exps:
        s = run_selection(e, DEFAULT_SIGMA_OBS, cfg)
        t = truncate(e, s.fidelity_mean)
        trimmed.append(t)
        b_means.append(float(np.mean(xi_to_theta(s.xi_draws.reshape(-1, 4))[:, 3])))
        tops.append(float(t.stretch[-1]))
    post = fit_population(Population(tuple(trimmed), DEFAULT_SIGMA_OBS), PopulationConfig(seed=9))
    modes = predictive_modes(posterior_predictive_params(post, seed=9))
    comp = linear_modulus_comparison(trimmed, b_means, tops)
    return modes["fibril_term"], len(comp.valid), len(exps)


@pytest.mark.slow
def test_c9_paper_reproduction():
    t0 = time.perf_counter()
    if not PAPER_DATA or not Path(PAPER_DATA).is_dir():
        record(9, False, "public dataset not available (set TENDONFIT_PAPER_DATA to a directory with "
                         "SDFT/ and CDET/ experiment CSVs); criterion not evaluated", t0)
    root = Path(PAPER_DATA)
    results = {}
    for kind, target_mode, target_valid in (("SDFT", 811.5, 12), ("CDET", 1430.2, 16)):
        mode, n_valid, n_total = _paper_run(root / kind)
        results[kind] = (mode, n_valid, n_total, abs(mode - target_mode) <= 0.15 * target_mode
                         and n_valid == target_valid and n_total == 18)
    ok = all(r[3] for r in results.values())
    record(9, ok, "; ".join(f"{k}: fibril modulus mode {m:.1f} MPa, valid linear regions {v}/{n}"
                            for k, (m, v, n, _) in results.items()), t0)


def test_c10_determinism(tmp_path):
    t0 = time.perf_counter()
    assert main(["synth", "--out", str(tmp_path / "data"), "--population", "2", "--points", "21",
                 "--max-strain", "0.06", "--seed", "10"]) == 0
    data = sorted(str(p) for p in (tmp_path / "data").glob("s*.csv"))
    out = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        # identical config includes the output paths, so rerun in place
        main(["select", *data, "--out", str(out / "sel"), "--seed", "10", "--burnin", "300", "--samples", "600",
              "--chains", "2", "--thin", "2", "--workers", "1", "--force"])
        main(["fit-pop", *data, "--no-selection", "--out", str(out / "pop"), "--seed", "10", "--warmup", "30",
              "--samples", "20", "--chains", "2", "--max-tree-depth", "5", "--workers", "2", "--force"])
        snapshots.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    files = list(snapshots[0])
    chain_files = [f for f in files if "chain" in f.name]
    same = snapshots[0] == snapshots[1]
    ok = same and len(chain_files) >= 8
    record(10, ok, f"{len(files)} output files ({len(chain_files)} chain files) byte-identical across runs: {same}", t0)
