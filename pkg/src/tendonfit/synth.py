"""Synthetic tendon data and numerical oracles.

The quadrature oracle integrates the per-fibril Hookean stress directly against
the triangular recruitment density, independently of the closed forms in
:mod:`tendonfit.constitutive`.

Damage is emulated by softening: beyond the onset stretch the increment of the
stress over its value at onset is multiplied by ``softening``. This is a test
device for the selection stage, not a constitutive damage law.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from .constitutive import ModelParams, engineering_stress, xi_to_theta
from .dataio import DEFAULT_SIGMA_OBS, Experiment, Population, TendonType


class QuadratureError(RuntimeError):
    pass


def _triangular_density(x, a, b):
    c = 0.5 * (a + b)
    if x <= a or x >= b:
        return 0.0
    if x < c:
        return 2.0 * (x - a) / ((b - a) * (c - a))
    return 2.0 * (b - x) / ((b - a) * (b - c))


def quadrature_fibril_integral(lam: float, a: float, b: float, epsabs: float = 1e-13,
                               epsrel: float = 1e-12, return_error: bool = False):
    """``int_a^min(lam,b) (lam/x - 1) p(x) dx`` by adaptive quadrature."""
    lam = float(lam)
    if lam < 1.0:
        raise ValueError("stretch must be >= 1")
    upper = min(lam, b)
    if upper <= a:
        return (0.0, 0.0) if return_error else 0.0
    c = 0.5 * (a + b)
    pieces = [(a, min(c, upper))]
    if upper > c:
        pieces.append((c, upper))
    total, err = 0.0, 0.0
    for lo, hi in pieces:
        val, e, info = integrate.quad(lambda x: (lam / x - 1.0) * _triangular_density(x, a, b),
                                      lo, hi, epsabs=epsabs, epsrel=epsrel, limit=200, full_output=1)[:3]
        if info.get("ier", 0) not in (0,) and e > 1e-9:
            raise QuadratureError(f"quadrature failed at lam={lam}: {info.get('message', '')}")
        total += val
        err += e
    return (total, err) if return_error else total


def quadrature_fibril_stress(lam, params: ModelParams, epsabs: float = 1e-10, return_error: bool = False):
    """Fibril contribution ``(phi E / lam) * integral`` from quadrature (MPa)."""
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
    vals = np.empty_like(lam_arr)
    errs = np.empty_like(lam_arr)
    for i, x in enumerate(lam_arr):
        # tolerance on the integral scaled so the stress meets epsabs
        tol = epsabs * x / max(params.fibril_term, 1e-300)
        v, e = quadrature_fibril_integral(x, params.a, params.b, epsabs=min(tol, 1e-13), return_error=True)
        vals[i] = params.fibril_term * v / x
        errs[i] = params.fibril_term * e / x
    if np.ndim(lam) == 0:
        return (vals[0], errs[0]) if return_error else vals[0]
    return (vals, errs) if return_error else vals


# --- generation --------------------------------------------------------------------

@dataclass
class PopulationSpec:
    mu_pop: np.ndarray
    sigma_pop: np.ndarray
    n_experiments: int = 18

    def validate(self):
        mu = np.asarray(self.mu_pop, dtype=float)
        cov = np.asarray(self.sigma_pop, dtype=float)
        if mu.shape != (4,) or cov.shape != (4, 4):
            raise ValueError("population mean must have 4 entries and covariance be 4x4")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("population covariance must be symmetric")
        evals = np.linalg.eigvalsh(cov)
        if evals.min() < -1e-10 * max(1.0, evals.max()):
            raise ValueError("population covariance must be positive semidefinite")
        if self.n_experiments < 1:
            raise ValueError("population needs at least one experiment")
        return mu, cov


@dataclass
class SyntheticSpec:
    params: Optional[ModelParams] = None
    stretch: np.ndarray = field(default_factory=lambda: np.round(np.linspace(1.0, 1.12, 121), 12))
    noise_sd: float = DEFAULT_SIGMA_OBS
    damage_onset: Optional[float] = None
    softening: float = 0.25
    early_damage: bool = False
    population: Optional[PopulationSpec] = None
    tendon_type: str = "SDFT"
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.softening < 1.0:
            raise ValueError("softening factor must lie in [0, 1)")
        if self.noise_sd < 0:
            raise ValueError("noise sd must be nonnegative")
        if self.damage_onset is not None and self.params is not None and not self.early_damage:
            if self.damage_onset <= self.params.b:
                raise ValueError("damage onset must exceed b unless early_damage is set")


def soften(lam, stress, onset: Optional[float], softening: float):
    """Apply post-onset softening to a noiseless stress curve sampled at ``lam``."""
    if onset is None:
        return stress
    lam = np.asarray(lam, dtype=float)
    stress = np.array(stress, dtype=float)
    if not np.any(lam > onset):
        return stress
    base = float(np.interp(onset, lam, stress)) if onset >= lam[0] else stress[0]
    after = lam > onset
    stress[after] = base + softening * (stress[after] - base)
    return stress


def _experiment(params: ModelParams, spec: SyntheticSpec, rng, exp_id: str, truth_extra=None) -> Experiment:
    lam = np.asarray(spec.stretch, dtype=float)
    clean = engineering_stress(lam, params)
    if spec.damage_onset is not None:
        onset_val = float(engineering_stress(spec.damage_onset, params))
        after = lam > spec.damage_onset
        clean = np.array(clean, dtype=float)
        clean[after] = onset_val + spec.softening * (clean[after] - onset_val)
    noise = rng.normal(0.0, spec.noise_sd, size=lam.shape) if spec.noise_sd > 0 else 0.0
    meta = {
        "synthetic": True,
        "seed": int(spec.seed),
        "theta": [float(v) for v in params.as_array()],
        "noise_sd": float(spec.noise_sd),
        "damage_onset": None if spec.damage_onset is None else float(spec.damage_onset),
        "softening": float(spec.softening),
    }
    if truth_extra:
        meta.update(truth_extra)
    return Experiment(id=exp_id, tendon_type=spec.tendon_type, stretch=lam, stress=clean + noise, meta=meta)


def generate_experiment(spec: SyntheticSpec, exp_id: str = "synthetic") -> Experiment:
    spec.validate()
    if spec.params is None:
        raise ValueError("generate_experiment needs spec.params")
    rng = np.random.default_rng(spec.seed)
    return _experiment(spec.params, spec, rng, exp_id)


def sample_population_xi(pop: PopulationSpec, rng) -> np.ndarray:
    mu, cov = pop.validate()
    # eigh handles semidefinite (including zero) covariances
    evals, evecs = np.linalg.eigh(cov)
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    z = rng.standard_normal((pop.n_experiments, 4))
    return mu + z @ root.T


def generate_population(spec: SyntheticSpec, sigma_obs: Optional[float] = None) -> Population:
    """Draw ``xi_i ~ N(mu_pop, Sigma_pop)`` and generate one experiment per draw."""
    spec.validate()
    if spec.population is None:
        raise ValueError("generate_population needs spec.population")
    rng = np.random.default_rng(spec.seed)
    xis = sample_population_xi(spec.population, rng)
    exps = []
    for i, xi in enumerate(xis):
        params = ModelParams.from_array(xi_to_theta(xi))
        sub = SyntheticSpec(params=params, stretch=spec.stretch, noise_sd=spec.noise_sd,
                            damage_onset=spec.damage_onset, softening=spec.softening,
                            early_damage=True, tendon_type=spec.tendon_type, seed=spec.seed)
        exps.append(_experiment(params, sub, rng, f"s{i + 1:02d}", {
            "xi": [float(v) for v in xi],
            "mu_pop": [float(v) for v in spec.population.mu_pop],
        }))
    if sigma_obs is None:
        # noise-free data still need a positive likelihood scale
        sigma_obs = spec.noise_sd if spec.noise_sd > 0 else DEFAULT_SIGMA_OBS
    return Population(tuple(exps), sigma_obs=sigma_obs)
