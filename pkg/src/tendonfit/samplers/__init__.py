"""MCMC machinery: adaptive Metropolis-within-Gibbs, NUTS, convergence diagnostics."""

from .base import Chain, LogDensityTarget, chain_seeds, stack_draws
from .diagnostics import effective_sample_size, split_rhat, summarize
from .nuts import NUTSConfig, hamiltonian, leapfrog, nuts
from .rwm import GibbsBlockSpec, RWMConfig, rwm_gibbs

__all__ = [
    "Chain",
    "LogDensityTarget",
    "chain_seeds",
    "stack_draws",
    "effective_sample_size",
    "split_rhat",
    "summarize",
    "NUTSConfig",
    "hamiltonian",
    "leapfrog",
    "nuts",
    "GibbsBlockSpec",
    "RWMConfig",
    "rwm_gibbs",
]
