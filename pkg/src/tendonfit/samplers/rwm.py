"""Adaptive random-walk Metropolis-within-Gibbs.

Each iteration sweeps the coordinate blocks in order and proposes a Gaussian
random-walk move ``x_b + s_b * L_b z`` for one block at a time, where
``L_b L_b^T`` is the block's proposal covariance.

During burn-in two things adapt:

* every block's log step scale follows a Robbins-Monro recursion driving the
  windowed acceptance rate to ``target_accept`` (0.234 by default);
* blocks flagged ``adapt_covariance`` replace their proposal covariance by the
  empirical covariance of past draws, shrunk toward a scaled identity with a
  weight that decays as draws accumulate. The identity is scaled by the mean
  variance of the initial proposal, not of the draws, so a chain that stalled
  early cannot collapse its own proposal.

Covariance adaptation stops halfway through burn-in. The final step scale is
the geometric mean of the scales visited over the last quarter of burn-in, and
the kernel is fixed from then on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .base import Chain, LogDensityTarget, chain_seeds, resolve_inits, run_chains

log = logging.getLogger(__name__)

ACCEPT_BAND = 0.05


@dataclass
class GibbsBlockSpec:
    """Partition of the state into proposal blocks.

    ``covariances[i]`` fixes the shape of block ``i``'s proposal (identity when
    ``None``); ``scales[i]`` is its initial multiplier.
    """

    blocks: Sequence[Sequence[int]]
    covariances: Optional[Sequence[Optional[np.ndarray]]] = None
    adapt_covariance: Optional[Sequence[bool]] = None
    scales: Optional[Sequence[float]] = None

    def validate(self, dimension: int):
        seen = np.concatenate([np.asarray(b, dtype=int) for b in self.blocks])
        if len(seen) != dimension or set(seen.tolist()) != set(range(dimension)):
            raise ValueError("blocks must be disjoint and cover every coordinate")
        n = len(self.blocks)
        covs = list(self.covariances) if self.covariances is not None else [None] * n
        adapt = list(self.adapt_covariance) if self.adapt_covariance is not None else [False] * n
        scales = list(self.scales) if self.scales is not None else [2.38 / math.sqrt(len(b)) for b in self.blocks]
        if not (len(covs) == len(adapt) == len(scales) == n):
            raise ValueError("per-block settings must match the number of blocks")
        for s in scales:
            if not (np.isfinite(s) and s > 0):
                raise ValueError(f"proposal scale must be positive, got {s}")
        return covs, adapt, scales


@dataclass
class RWMConfig:
    n_burnin: int = 10_000
    n_samples: int = 50_000
    n_chains: int = 3
    seed: int = 0
    target_accept: float = 0.234
    window: int = 50
    thin: int = 1
    cov_freeze_fraction: float = 0.5
    shrinkage_strength: float = 10.0
    workers: int = 1


@dataclass
class _Block:
    idx: np.ndarray
    chol: np.ndarray
    log_scale: float
    adapt_cov: bool
    cov0: Optional[np.ndarray] = None
    n_acc: int = 0
    n_prop: int = 0
    # running moments for covariance learning
    count: int = 0
    mean: Optional[np.ndarray] = None
    m2: Optional[np.ndarray] = None
    history: list = field(default_factory=list)

    def push(self, x):
        v = x[self.idx]
        self.count += 1
        if self.mean is None:
            self.mean = v.copy()
            self.m2 = np.zeros((len(v), len(v)))
            return
        delta = v - self.mean
        self.mean += delta / self.count
        self.m2 += np.outer(delta, v - self.mean)


def _chol(cov):
    cov = 0.5 * (cov + cov.T)
    jitter = 1e-12 * max(np.max(np.diag(cov)), 1e-300)
    return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))


def _run_chain(target, blocks_spec, config: RWMConfig, x0, seed, mean_transform):
    rng = np.random.default_rng(seed)
    covs, adapt, scales = blocks_spec.validate(target.dimension)
    blocks = []
    for b, cov, ad, s in zip(blocks_spec.blocks, covs, adapt, scales):
        idx = np.asarray(b, dtype=int)
        chol = np.eye(len(idx)) if cov is None else _chol(np.asarray(cov, dtype=float))
        blocks.append(_Block(idx=idx, chol=chol, log_scale=math.log(s), adapt_cov=ad, cov0=chol @ chol.T))

    x = np.array(x0, dtype=float)
    lp = target.log_density(x)
    if not np.isfinite(lp):
        raise ValueError("initial state has non-finite log density")

    n_burn, n_samp, W = config.n_burnin, config.n_samples, max(1, config.window)
    cov_start = n_burn // 10
    cov_stop = int(config.cov_freeze_fraction * n_burn)
    avg_start = (3 * n_burn) // 4
    window_iters, window_scales = [], []
    frozen = False
    k_window = 0

    n_keep = n_samp // config.thin
    draws = np.empty((n_keep, target.dimension))
    lps = np.empty(n_keep)
    sampling_scales = []
    tsum = None
    acc_post = np.zeros(len(blocks))

    def freeze():
        for blk in blocks:
            tail = [h for it, h in blk.history if it >= avg_start]
            if tail:
                blk.log_scale = float(np.mean(tail))

    for it in range(n_burn + n_samp):
        if it == n_burn:
            freeze()
            frozen = True
            for blk in blocks:
                blk.n_acc = blk.n_prop = 0

        for bi, blk in enumerate(blocks):
            step = math.exp(blk.log_scale) * (blk.chol @ rng.standard_normal(len(blk.idx)))
            prop = x.copy()
            prop[blk.idx] += step
            lp_prop = target.log_density(prop)
            blk.n_prop += 1
            if np.isfinite(lp_prop) and math.log(rng.random()) < lp_prop - lp:
                x, lp = prop, lp_prop
                blk.n_acc += 1
                if frozen:
                    acc_post[bi] += 1

        if not frozen:
            if it >= cov_start:
                for blk in blocks:
                    if blk.adapt_cov:
                        blk.push(x)
            if (it + 1) % W == 0:
                k_window += 1
                gain = min(1.0, 1.0 / math.sqrt(k_window))
                for blk in blocks:
                    rate = blk.n_acc / blk.n_prop
                    delta = gain * (rate - config.target_accept) * 3.0
                    blk.log_scale += float(np.clip(delta, -1.0, 1.0))
                    blk.n_acc = blk.n_prop = 0
                    blk.history.append((it, blk.log_scale))
                    if blk.adapt_cov and it < cov_stop and blk.count > 2 * len(blk.idx) + 2:
                        emp = blk.m2 / (blk.count - 1)
                        d = len(blk.idx)
                        w = config.shrinkage_strength * d / (config.shrinkage_strength * d + blk.count)
                        cov = (1 - w) * emp + w * (np.trace(blk.cov0) / d) * np.eye(d)
                        try:
                            blk.chol = _chol(cov)
                        except np.linalg.LinAlgError:
                            pass
                window_iters.append(it)
                window_scales.append([math.exp(b.log_scale) for b in blocks])
        else:
            j = it - n_burn
            if j % config.thin == 0 and j // config.thin < n_keep:
                draws[j // config.thin] = x
                lps[j // config.thin] = lp
            if mean_transform is not None:
                v = mean_transform(x)
                tsum = v.copy() if tsum is None else tsum + v
            if (j + 1) % W == 0:
                sampling_scales.append([math.exp(b.log_scale) for b in blocks])

    block_rates = (acc_post / max(n_samp, 1)).tolist()
    warnings = []
    for bi, r in enumerate(block_rates):
        if abs(r - config.target_accept) > ACCEPT_BAND:
            warnings.append(f"block {bi} acceptance {r:.3f} outside target band")
    record = {
        "window_iterations": np.asarray(window_iters),
        "window_scales": np.asarray(window_scales),
        "frozen_scales": [math.exp(b.log_scale) for b in blocks],
        "frozen_chols": [b.chol.copy() for b in blocks],
        "cov_freeze_iteration": cov_stop,
        "scale_freeze_iteration": n_burn,
        "sampling_scales": np.asarray(sampling_scales),
    }
    return Chain(
        draws=draws,
        acceptance_rate=float(np.mean(block_rates)) if block_rates else 0.0,
        seed=seed,
        block_acceptance=block_rates,
        adaptation_record=record,
        sampler_stats={"lp": lps},
        warnings=warnings,
        transformed_mean=None if tsum is None else tsum / n_samp,
    )


def rwm_gibbs(
    target: LogDensityTarget,
    blocks: GibbsBlockSpec,
    config: RWMConfig,
    init,
    mean_transform: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> list:
    """Run ``config.n_chains`` adaptive Metropolis-within-Gibbs chains.

    ``init`` is an ``(n_chains, d)`` array, a single state, or a callable taking
    a ``numpy.random.Generator``. ``mean_transform`` (optional) is averaged over
    every post-burn-in iteration, unthinned, and stored on each chain.
    """
    blocks.validate(target.dimension)
    if config.thin < 1 or config.n_samples < 1 or config.n_burnin < 0:
        raise ValueError("invalid chain lengths")
    seeds = chain_seeds(config.seed, config.n_chains)
    inits = resolve_inits(init, config.n_chains, target.dimension, seeds)
    args = [(target, blocks, config, x0, s, mean_transform) for x0, s in zip(inits, seeds)]
    chains = run_chains(_run_chain, args, config.workers)
    for i, ch in enumerate(chains):
        for w in ch.warnings:
            log.warning("chain %d: %s", i, w)
    return chains
