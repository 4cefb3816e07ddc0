"""Split R-hat and effective sample size.

Both default to the rank-normalised split-chain formulation: draws are pooled,
replaced by normal scores of their ranks, and every chain is cut in half before
computing between/within variances. R-hat reports the larger of the bulk
value and the value for draws folded about the median. Degenerate inputs
(no within-chain variance) yield ``nan``.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

SENTINEL = np.nan


def _as_3d(chains):
    if isinstance(chains, (list, tuple)) and chains and hasattr(chains[0], "draws"):
        n = min(c.draws.shape[0] for c in chains)
        chains = np.stack([c.draws[:n] for c in chains])
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :, None]
    elif x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError("chains must be (n_chains, n_draws[, dim])")
    if x.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    return x


def _split(x):
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, -n:]], axis=0)


def _rank_normalize(x):
    # x: (m, n) for one dimension
    flat = x.ravel()
    r = stats.rankdata(flat, method="average").reshape(x.shape)
    s = flat.size
    return stats.norm.ppf((r - 0.375) / (s + 0.25))


def _rhat_basic(x):
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    if not np.isfinite(w) or w <= 0:
        return SENTINEL
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def split_rhat(chains, method: str = "rank"):
    """Potential scale reduction per dimension.

    ``method="classic"`` gives the plain split-chain statistic; the default
    ``"rank"`` is the rank-normalised, folded maximum.
    """
    x = _split(_as_3d(chains))
    out = np.empty(x.shape[2])
    for k in range(x.shape[2]):
        xk = x[:, :, k]
        if np.all(xk.var(axis=1) == 0):
            out[k] = SENTINEL
            continue
        if method == "classic":
            out[k] = _rhat_basic(xk)
        elif method == "rank":
            bulk = _rhat_basic(_rank_normalize(xk))
            folded = np.abs(xk - np.median(xk))
            tail = _rhat_basic(_rank_normalize(folded))
            out[k] = np.nanmax([bulk, tail]) if np.isfinite([bulk, tail]).any() else SENTINEL
        else:
            raise ValueError(f"unknown method {method!r}")
    return out


def _autocov(x):
    # x: (n,) ; biased autocovariance via FFT
    n = len(x)
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean()
    f = np.fft.rfft(xc, size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n]
    return ac / n


def _ess_basic(x):
    m, n = x.shape
    acov = np.stack([_autocov(x[j]) for j in range(m)])
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    if not np.isfinite(mean_var) or mean_var <= 0:
        return SENTINEL
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    acov_t = acov.mean(axis=0)

    # Geyer's initial positive sequence over pairs of lags
    rho = np.zeros(n + 2)
    rho[0] = 1.0
    even, odd = 1.0, 1.0 - (mean_var - acov_t[1]) / var_plus
    rho[1] = odd
    t = 1
    while t < n - 3 and even + odd > 0:
        even = 1.0 - (mean_var - acov_t[t + 1]) / var_plus
        odd = 1.0 - (mean_var - acov_t[t + 2]) / var_plus
        if even + odd >= 0:
            rho[t + 1], rho[t + 2] = even, odd
        t += 2
    max_t = t
    if even > 0:
        rho[max_t + 1] = even
    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = 0.5 * (rho[t - 1] + rho[t])
        t += 2
    tau = -1.0 + 2.0 * np.sum(rho[: max_t + 1]) + rho[max_t + 1]
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def effective_sample_size(chains, method: str = "rank"):
    """Bulk effective sample size per dimension, capped at the number of draws."""
    x3 = _as_3d(chains)
    total = x3.shape[0] * x3.shape[1]
    x = _split(x3)
    out = np.empty(x.shape[2])
    for k in range(x.shape[2]):
        xk = x[:, :, k]
        if np.all(xk.var(axis=1) == 0):
            out[k] = SENTINEL
            continue
        if method == "rank":
            xk = _rank_normalize(xk)
        elif method != "classic":
            raise ValueError(f"unknown method {method!r}")
        out[k] = min(_ess_basic(xk), float(total))
    return out


def summarize(chains, names=None) -> dict:
    """Per-dimension R-hat/ESS plus sampler counters, JSON-ready."""
    x = _as_3d(chains)
    names = list(names) if names is not None else [f"x{i}" for i in range(x.shape[2])]
    rhat = split_rhat(x)
    ess = effective_sample_size(x)
    out = {
        "rhat": {n: (None if not np.isfinite(r) else float(r)) for n, r in zip(names, rhat)},
        "ess": {n: (None if not np.isfinite(e) else float(e)) for n, e in zip(names, ess)},
        "max_rhat": None if not np.isfinite(rhat).any() else float(np.nanmax(rhat)),
    }
    if isinstance(chains, (list, tuple)) and chains and hasattr(chains[0], "draws"):
        out["acceptance_rates"] = [float(c.acceptance_rate) for c in chains]
        out["divergences"] = [int(c.divergences) for c in chains]
    return out
