"""No-U-Turn sampler with multinomial trajectory sampling.

Trajectories double in a random direction until the generalised U-turn
criterion fails (checked across the whole tree and across each pair of merged
subtrees), a divergence occurs, or ``max_tree_depth`` is hit. Warmup follows
the familiar windowed scheme: a fast initial buffer for the step size, slow
doubling windows that re-estimate a diagonal inverse metric, and a terminal
buffer that settles the step size with dual averaging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .base import Chain, LogDensityTarget, chain_seeds, resolve_inits, run_chains


@dataclass
class NUTSConfig:
    n_warmup: int = 1000
    n_samples: int = 1000
    n_chains: int = 4
    seed: int = 0
    step_size: float = 0.01
    adapt_delta: float = 0.99
    max_tree_depth: int = 14
    divergence_threshold: float = 1000.0
    init_buffer: int = 75
    term_buffer: int = 50
    base_window: int = 25
    adapt_metric: bool = True
    workers: int = 1


@dataclass
class _Point:
    q: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


def leapfrog(q, p, grad, step_size, inv_mass, value_and_grad):
    """One velocity-Verlet step; returns ``(q, p, logp, grad)``."""
    p_half = p + 0.5 * step_size * grad
    q_new = q + step_size * inv_mass * p_half
    logp, g = value_and_grad(q_new)
    p_new = p_half + 0.5 * step_size * g
    return q_new, p_new, logp, g


def hamiltonian(logp, p, inv_mass):
    return -logp + 0.5 * float(np.dot(p, inv_mass * p))


def _uturn_ok(p_sharp_minus, p_sharp_plus, rho):
    return float(np.dot(p_sharp_plus, rho)) > 0 and float(np.dot(p_sharp_minus, rho)) > 0


class _Sampler:
    def __init__(self, target: LogDensityTarget, config: NUTSConfig, rng):
        self.target = target
        self.config = config
        self.rng = rng
        self.inv_mass = np.ones(target.dimension)

    def _vg(self, q):
        try:
            lp, g = self.target.logp_and_grad(q)
        except (FloatingPointError, ValueError, OverflowError, np.linalg.LinAlgError):
            return -math.inf, np.full_like(q, np.nan)
        g = np.asarray(g, dtype=float)
        if not np.isfinite(lp) or not np.all(np.isfinite(g)):
            return -math.inf, g
        return float(lp), g

    def _step(self, pt: _Point, eps):
        q, p, lp, g = leapfrog(pt.q, pt.p, pt.grad, eps, self.inv_mass, self._vg)
        return _Point(q, p, lp, g)

    # -- tree building ------------------------------------------------------

    def _build(self, pt: _Point, depth, eps, H0, stats):
        """Build a subtree of ``2**depth`` leapfrog steps starting after ``pt``.

        Returns ``(valid, begin, end, proposal, log_w, rho)``; begin/end are the
        first and last states in build order.
        """
        if depth == 0:
            new = self._step(pt, eps)
            stats["n_leapfrog"] += 1
            if np.isfinite(new.logp) and np.all(np.isfinite(new.p)):
                H = hamiltonian(new.logp, new.p, self.inv_mass)
            else:
                H = math.inf
            if not np.isfinite(H):
                H = math.inf
            delta = H - H0
            if delta > self.config.divergence_threshold or not np.isfinite(delta):
                stats["divergent"] = True
                stats["sum_accept"] += 0.0 if not np.isfinite(delta) else min(1.0, math.exp(-delta))
                return False, new, new, new, -math.inf, new.p.copy()
            stats["sum_accept"] += min(1.0, math.exp(-delta)) if delta > 0 else 1.0
            return True, new, new, new, -delta, new.p.copy()

        ok, b1, e1, prop1, w1, rho1 = self._build(pt, depth - 1, eps, H0, stats)
        if not ok:
            return False, b1, e1, prop1, w1, rho1
        ok, b2, e2, prop2, w2, rho2 = self._build(e1, depth - 1, eps, H0, stats)
        if not ok:
            return False, b1, e2, prop1, w1, rho1
        w = np.logaddexp(w1, w2)
        prop = prop2 if math.log(self.rng.random()) < w2 - w else prop1
        rho = rho1 + rho2
        im = self.inv_mass
        ok = (
            _uturn_ok(im * b1.p, im * e2.p, rho)
            and _uturn_ok(im * b1.p, im * b2.p, rho1 + b2.p)
            and _uturn_ok(im * e1.p, im * e2.p, rho2 + e1.p)
        )
        return ok, b1, e2, prop, w, rho

    def transition(self, current: _Point, eps):
        cfg = self.config
        im = self.inv_mass
        p0 = self.rng.standard_normal(len(current.q)) / np.sqrt(im)
        start = _Point(current.q, p0, current.logp, current.grad)
        H0 = hamiltonian(start.logp, p0, im)

        left = right = start
        sample = start
        log_w = 0.0
        rho = p0.copy()
        stats = {"n_leapfrog": 0, "sum_accept": 0.0, "divergent": False}
        depth = 0
        while depth < cfg.max_tree_depth:
            forward = self.rng.random() < 0.5
            if forward:
                old_begin, old_end = left, right
                step = eps
            else:
                old_begin, old_end = right, left
                # integrate backward by flipping the step sign; momenta stay physical
                step = -eps
            ok, nb, ne, prop, w_sub, rho_sub = self._build(old_end, depth, step, H0, stats)
            if forward:
                right = ne
            else:
                left = ne
            if not ok:
                break
            depth += 1
            if w_sub > log_w or math.log(self.rng.random()) < w_sub - log_w:
                sample = prop
            log_w = np.logaddexp(log_w, w_sub)
            rho_old = rho
            rho = rho_old + rho_sub
            keep = (
                _uturn_ok(im * old_begin.p, im * ne.p, rho)
                and _uturn_ok(im * old_begin.p, im * nb.p, rho_old + nb.p)
                and _uturn_ok(im * old_end.p, im * ne.p, rho_sub + old_end.p)
            )
            if not keep:
                break
        n = max(stats["n_leapfrog"], 1)
        info = {
            "accept_stat": stats["sum_accept"] / n,
            "n_leapfrog": stats["n_leapfrog"],
            "tree_depth": depth,
            "divergent": stats["divergent"],
            "energy": hamiltonian(sample.logp, sample.p, im),
        }
        return _Point(sample.q, sample.p, sample.logp, sample.grad), info

    # -- step size heuristics ----------------------------------------------------

    def reasonable_step(self, pt: _Point, eps):
        """Double or halve ``eps`` until a single leapfrog step crosses acceptance 0.8."""
        im = self.inv_mass
        p = self.rng.standard_normal(len(pt.q)) / np.sqrt(im)
        H0 = hamiltonian(pt.logp, p, im)
        start = _Point(pt.q, p, pt.logp, pt.grad)

        def delta_h(e):
            new = self._step(start, e)
            if not np.isfinite(new.logp):
                return -math.inf
            return H0 - hamiltonian(new.logp, new.p, im)

        dh = delta_h(eps)
        direction = 1 if dh > math.log(0.8) else -1
        for _ in range(100):
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            dh = delta_h(eps)
            if direction == 1 and not dh > math.log(0.8):
                break
            if direction == -1 and dh > math.log(0.8):
                break
        return eps


class _DualAveraging:
    def __init__(self, eps, delta, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps):
        self.mu = math.log(10.0 * eps)
        self.h_bar = 0.0
        self.x_bar = 0.0
        self.counter = 0

    def update(self, accept_stat):
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        t = self.counter
        eta = 1.0 / (t + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.delta - accept_stat)
        x = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        x_eta = t ** (-self.kappa)
        self.x_bar = x_eta * x + (1 - x_eta) * self.x_bar
        return math.exp(x)

    @property
    def final(self):
        return math.exp(self.x_bar)


def warmup_windows(n_warmup, init_buffer=75, term_buffer=50, base_window=25):
    """End iterations (exclusive) of the slow metric-adaptation windows."""
    if n_warmup < 20:
        return [], n_warmup, n_warmup
    if init_buffer + base_window + term_buffer > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    ends = []
    start = init_buffer
    size = base_window
    last = n_warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start = end
        size *= 2
    return ends, init_buffer, last


def _run_chain(target, config: NUTSConfig, x0, seed):
    rng = np.random.default_rng(seed)
    s = _Sampler(target, config, rng)
    lp, g = s._vg(np.asarray(x0, dtype=float))
    if not np.isfinite(lp):
        raise ValueError("initial state has non-finite log density or gradient")
    current = _Point(np.asarray(x0, dtype=float), np.zeros_like(x0), lp, g)

    eps = s.reasonable_step(current, config.step_size)
    da = _DualAveraging(eps, config.adapt_delta)
    ends, init_buf, slow_end = warmup_windows(
        config.n_warmup, config.init_buffer, config.term_buffer, config.base_window)
    window_start = init_buf
    w_count, w_mean, w_m2 = 0, None, None
    metric_history = []
    warmup_divergent = 0

    d = target.dimension
    draws = np.empty((config.n_samples, d))
    stats = {k: np.empty(config.n_samples) for k in
             ("lp", "accept_stat", "step_size", "tree_depth", "n_leapfrog", "energy")}
    divergent = np.zeros(config.n_samples, dtype=bool)

    for it in range(config.n_warmup + config.n_samples):
        current, info = s.transition(current, eps)
        if it < config.n_warmup:
            warmup_divergent += info["divergent"]
            eps = da.update(info["accept_stat"])
            if config.adapt_metric and ends and window_start <= it < slow_end:
                q = current.q
                w_count += 1
                if w_mean is None:
                    w_mean, w_m2 = q.copy(), np.zeros(d)
                else:
                    delta = q - w_mean
                    w_mean += delta / w_count
                    w_m2 += delta * (q - w_mean)
                if it + 1 in ends:
                    var = w_m2 / max(w_count - 1, 1)
                    n = w_count
                    s.inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                    metric_history.append(s.inv_mass.copy())
                    w_count, w_mean, w_m2 = 0, None, None
                    window_start = it + 1
                    eps = s.reasonable_step(current, eps)
                    da.restart(eps)
            if it + 1 == config.n_warmup:
                eps = da.final
        else:
            j = it - config.n_warmup
            draws[j] = current.q
            divergent[j] = info["divergent"]
            stats["lp"][j] = current.logp
            stats["accept_stat"][j] = info["accept_stat"]
            stats["step_size"][j] = eps
            stats["tree_depth"][j] = info["tree_depth"]
            stats["n_leapfrog"][j] = info["n_leapfrog"]
            stats["energy"][j] = info["energy"]

    if config.n_warmup > 0 and warmup_divergent == config.n_warmup:
        raise RuntimeError("every warmup transition diverged; the target or initialisation is unusable")
    stats["divergent"] = divergent
    stats["warmup_divergences"] = warmup_divergent
    warnings = []
    if divergent.any():
        warnings.append(f"{int(divergent.sum())} divergent transitions after warmup")
    hit_cap = int(np.sum(stats["tree_depth"] >= config.max_tree_depth))
    if hit_cap:
        warnings.append(f"{hit_cap} transitions hit max_tree_depth")
    return Chain(
        draws=draws,
        acceptance_rate=float(np.mean(stats["accept_stat"])) if config.n_samples else 0.0,
        seed=seed,
        divergences=int(divergent.sum()),
        adaptation_record={
            "step_size": eps,
            "inv_metric": s.inv_mass.copy(),
            "metric_history": metric_history,
            "window_ends": ends,
        },
        sampler_stats=stats,
        warnings=warnings,
    )


def nuts(target: LogDensityTarget, config: NUTSConfig, init) -> list:
    """Run ``config.n_chains`` NUTS chains on a target with gradient."""
    if target.gradient is None and target.value_and_grad is None:
        raise ValueError("NUTS needs a gradient")
    if config.max_tree_depth < 1:
        raise ValueError("max_tree_depth must be >= 1")
    seeds = chain_seeds(config.seed, config.n_chains)
    inits = resolve_inits(init, config.n_chains, target.dimension, seeds)
    args = [(target, config, x0, s) for x0, s in zip(inits, seeds)]
    return run_chains(_run_chain, args, config.workers)
