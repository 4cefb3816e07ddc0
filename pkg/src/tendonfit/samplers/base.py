from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


@dataclass
class LogDensityTarget:
    """A log density on R^d with an optional gradient.

    ``log_density`` may return ``-inf`` outside the support. When ``value_and_grad``
    is supplied it is preferred by gradient-based samplers over separate calls.
    """

    dimension: int
    log_density: Callable[[np.ndarray], float]
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    value_and_grad: Optional[Callable[[np.ndarray], tuple]] = None

    def logp_and_grad(self, x):
        if self.value_and_grad is not None:
            return self.value_and_grad(x)
        if self.gradient is None:
            raise ValueError("target has no gradient")
        return self.log_density(x), self.gradient(x)


@dataclass
class Chain:
    """Retained draws of one Markov chain plus what is needed to audit it."""

    draws: np.ndarray
    acceptance_rate: float
    seed: int
    divergences: int = 0
    block_acceptance: list = field(default_factory=list)
    adaptation_record: dict = field(default_factory=dict)
    sampler_stats: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    transformed_mean: Optional[np.ndarray] = None

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]


def chain_seeds(seed: int, n_chains: int) -> list:
    """Independent per-chain integer seeds derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n_chains)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def stack_draws(chains) -> np.ndarray:
    """``(n_chains, n_draws, d)`` array from a list of :class:`Chain`."""
    n = min(c.n_draws for c in chains)
    return np.stack([c.draws[:n] for c in chains])


def run_chains(fn, args_list, workers: int = 1):
    """Map ``fn`` over per-chain argument tuples, optionally in processes.

    Results come back in input order, so output is independent of ``workers``.
    """
    if workers <= 1 or len(args_list) <= 1:
        return [fn(*args) for args in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for args in args_list]
        return [f.result() for f in futures]


def resolve_inits(init, n_chains: int, dimension: int, seeds) -> list:
    if init is None:
        raise ValueError("an initial state (array or callable) is required")
    if callable(init):
        return [np.asarray(init(np.random.default_rng(s ^ 0x5EED)), dtype=float) for s in seeds]
    init = np.asarray(init, dtype=float)
    if init.ndim == 1:
        init = np.tile(init, (n_chains, 1))
    if init.shape != (n_chains, dimension):
        raise ValueError(f"init has shape {init.shape}, expected {(n_chains, dimension)}")
    return [row.copy() for row in init]
