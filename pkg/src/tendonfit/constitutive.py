"""Microstructural tendon model under uniaxial incompressible stretch.

The tissue is a neo-Hookean matrix reinforced by Hookean collagen fibrils that
are recruited once the macroscopic stretch exceeds their critical stretch.
Critical stretches follow a symmetric triangular density on ``[a, b]`` with
mode ``c = (a + b) / 2``.

Writing ``k = 4 / (b - a)**2`` and integrating the per-fibril Cauchy stress
``E * (lam / x - 1)`` over the density gives the dimensionless recruitment
integral

    I(lam) = int_a^{min(lam, b)} (lam / x - 1) p(x) dx,

so that the engineering stress is

    N(lam) = ncm * (lam - lam**-2) + fib * I(lam) / lam.

``I`` is piecewise of the form ``A + B lam + C lam**2 + D lam log(lam)`` with
constants switching at ``a``, ``c`` and ``b``. The coefficients are exposed by
:func:`stress_coefficients`; evaluation itself goes through algebraically
equivalent forms that avoid catastrophic cancellation near ``a`` where the
stress grows like ``(lam - a)**3``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARAM_NAMES = ("nu", "eta", "tau", "rho")
THETA_NAMES = ("ncm_term", "fibril_term", "a", "b")


class DomainError(ValueError):
    """Raised when inputs fall outside the model's domain."""


@dataclass(frozen=True)
class ModelParams:
    """Constrained constitutive parameters ``[(1-phi) mu, phi E, a, b]`` (MPa, MPa, -, -)."""

    ncm_term: float
    fibril_term: float
    a: float
    b: float

    def __post_init__(self):
        vals = (self.ncm_term, self.fibril_term, self.a, self.b)
        if not all(np.isfinite(v) for v in vals):
            raise DomainError(f"non-finite parameters {vals}")
        if self.ncm_term < 0 or self.fibril_term < 0:
            raise DomainError("moduli must be non-negative")
        if not 1.0 < self.a < self.b:
            raise DomainError(f"need 1 < a < b, got a={self.a}, b={self.b}")

    @property
    def c(self) -> float:
        return 0.5 * (self.a + self.b)

    def as_array(self) -> np.ndarray:
        return np.array([self.ncm_term, self.fibril_term, self.a, self.b])

    @classmethod
    def from_array(cls, theta) -> "ModelParams":
        return cls(*(float(v) for v in theta))


@dataclass(frozen=True)
class UnconstrainedParams:
    """Log-scale parameters ``[ln ncm, ln fib, ln(a-1), ln(b-a)]``."""

    nu: float
    eta: float
    tau: float
    rho: float

    def as_array(self) -> np.ndarray:
        return np.array([self.nu, self.eta, self.tau, self.rho])

    @classmethod
    def from_array(cls, xi) -> "UnconstrainedParams":
        return cls(*(float(v) for v in xi))


def invariants(lam):
    """Return ``(I1, I3, I4)`` for uniaxial incompressible stretch."""
    lam = np.asarray(lam, dtype=float)
    return lam**2 + 2.0 / lam, np.ones_like(lam), lam**2


# --- series-backed helpers, all O(t**2) or smaller as t -> 0 -----------------

_SERIES_CUT = 0.01
_MAX_POWER = 13


def _coefficients(coef):
    return [float(coef(n)) for n in range(_MAX_POWER + 1)]


def _horner(t, coefs):
    # coefs[n] multiplies t**n; leading zeros are factored out as a power of t
    m = next(n for n, c in enumerate(coefs) if c)
    acc = coefs[-1]
    for c in coefs[-2:m - 1:-1]:
        acc = acc * t + c
    return acc * t**m


def _stable(direct, coefs, t):
    # power series for |t| < cut, closed form elsewhere
    if np.ndim(t) == 0:
        t = float(t)
        return np.asarray(_horner(t, coefs) if abs(t) < _SERIES_CUT else direct(t))
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < _SERIES_CUT
    out = np.empty_like(t)
    if small.any():
        out[small] = _horner(t[small], coefs)
        big = ~small
        out[big] = direct(t[big])
    else:
        out[...] = direct(t)
    return out


_C_TLOG = _coefficients(lambda n: 0.0 if n < 2 else (-1.0) ** n / n)
_C_XLOGX = _coefficients(lambda n: 0.0 if n < 2 else (-1.0) ** n / (n * (n - 1)))
_C_STRESS = _coefficients(lambda n: 0.0 if n < 3 else (-1.0) ** (n + 1) / (n * (n - 1)))
_C_ENERGY = _coefficients(lambda n: 0.0 if n < 4 else (-1.0) ** n * (n - 3) / (2 * n * (n - 1)))


def _t_minus_log1p(t):
    # t - log(1 + t)
    return _stable(lambda s: s - np.log1p(s), _C_TLOG, t)


def _xlogx_minus(t):
    # (1 + t) log(1 + t) - t
    return _stable(lambda s: (1 + s) * np.log1p(s) - s, _C_XLOGX, t)


def _stress_kernel(t):
    # u**2/2 - 1/2 - u log u with u = 1 + t; integral of (y-1)(u/y-1) over [1, u]
    return _stable(lambda s: s + 0.5 * s * s - (1 + s) * np.log1p(s), _C_STRESS, t)


def _energy_kernel(t):
    # integral of (y-1)(u/y - 1 - log(u/y)) over [1, u] with u = 1 + t
    return _stable(lambda s: 1.5 * s + 0.25 * s * s - (1.5 + s) * np.log1p(s), _C_ENERGY, t)


# --- triangular recruitment ---------------------------------------------------

def _check_ab(a, b):
    if not (np.isfinite(a) and np.isfinite(b)) or a >= b:
        raise DomainError(f"need a < b, got a={a}, b={b}")


def recruitment_pdf(lambda_c, a, b):
    """Density of the symmetric triangular distribution of critical stretch."""
    _check_ab(a, b)
    x = np.asarray(lambda_c, dtype=float)
    c = 0.5 * (a + b)
    k = 4.0 / (b - a) ** 2
    return np.where((x <= a) | (x >= b), 0.0,
                    np.where(x < c, k * (x - a), k * (b - x)))


def recruitment_cdf(lambda_c, a, b):
    """Fraction of fibrils with critical stretch below ``lambda_c``."""
    _check_ab(a, b)
    x = np.asarray(lambda_c, dtype=float)
    c = 0.5 * (a + b)
    k = 2.0 / (b - a) ** 2
    lower = k * (x - a) ** 2
    upper = 1.0 - k * (b - x) ** 2
    out = np.where(x <= a, 0.0, np.where(x < c, lower, np.where(x < b, upper, 1.0)))
    return out[()] if out.ndim == 0 else out


def inverse_stretch_mean(a, b):
    """``E[1 / lambda_C]`` under the triangular density."""
    c = 0.5 * (a + b)
    k = 4.0 / (b - a) ** 2
    return float(k * (a * _t_minus_log1p((c - a) / a) + b * _t_minus_log1p((c - b) / b)))


def _log_stretch_mean(a, b, einv):
    # E[log lambda_C], fixed so that the energy is continuous at the mode
    c = 0.5 * (a + b)
    k = 4.0 / (b - a) ** 2
    e = k * a * a * _energy_kernel((c - a) / a) + k * b * b * _energy_kernel((c - b) / b)
    return float(np.log(c) + e - (c * einv - 1.0))


def _regimes(lam, a, b):
    c = 0.5 * (a + b)
    # right-continuous: a boundary value belongs to the regime above it
    return np.searchsorted(np.array([a, c, b]), lam, side="right")


def fibril_integral(lam, a, b):
    """Dimensionless recruitment integral ``I(lam)``; fibril stress is ``fib * I / lam``."""
    _check_ab(a, b)
    lam = np.asarray(lam, dtype=float)
    x = np.atleast_1d(lam)
    k = 4.0 / (b - a) ** 2
    einv = inverse_stretch_mean(a, b)
    reg = _regimes(x, a, b)
    out = np.zeros_like(x)
    low, high, full = reg == 1, reg == 2, reg >= 2
    out[low] = k * a * a * _stress_kernel(x[low] / a - 1.0)
    out[full] = x[full] * einv - 1.0
    out[high] -= k * b * b * _stress_kernel(x[high] / b - 1.0)
    return out.reshape(lam.shape)


def fibril_energy_integral(lam, a, b):
    """Dimensionless fibril strain energy; its lam-derivative is ``I(lam) / lam``."""
    _check_ab(a, b)
    lam = np.asarray(lam, dtype=float)
    x = np.atleast_1d(lam)
    k = 4.0 / (b - a) ** 2
    einv = inverse_stretch_mean(a, b)
    elog = _log_stretch_mean(a, b, einv)
    reg = _regimes(x, a, b)
    out = np.zeros_like(x)
    low, high, full = reg == 1, reg == 2, reg >= 2
    out[low] = k * a * a * _energy_kernel(x[low] / a - 1.0)
    out[full] = x[full] * einv - 1.0 - np.log(x[full]) + elog
    out[high] -= k * b * b * _energy_kernel(x[high] / b - 1.0)
    return out.reshape(lam.shape)


def stress_coefficients(lam, a, b):
    """Piecewise constants ``(A, B, C, D, G)`` at each stretch.

    The fibril engineering stress per unit ``phi E`` is
    ``(A + B lam + C lam**2 + D lam log lam) / lam`` and the energy is
    ``A log lam + (B - D) lam + C lam**2 / 2 + D lam log lam + G``.
    These raw forms lose precision just above ``a``; they are provided for
    inspection and cross-checking, not for evaluation.
    """
    _check_ab(a, b)
    lam = np.asarray(lam, dtype=float)
    c = 0.5 * (a + b)
    k = 4.0 / (b - a) ** 2
    einv = inverse_stretch_mean(a, b)
    table = np.array([
        [0.0, 0.0, 0.0, 0.0],
        [-0.5 * k * a * a, k * a * np.log(a), 0.5 * k, -k * a],
        [k * (a * (c - a) - 0.5 * (c * c - a * a)) + k * (b * c - 0.5 * c * c),
         k * ((c - a) - a * np.log(c / a)) + k * (c - b - b * np.log(c)),
         -0.5 * k, k * b],
        [-1.0, einv, 0.0, 0.0],
    ])

    def energy_sans_g(coef, x):
        A, B, C, D = coef
        return A * np.log(x) + (B - D) * x + 0.5 * C * x * x + D * x * np.log(x)

    starts = [1.0, a, c, b]
    g = np.array([
        float(fibril_energy_integral(s, a, b)) - energy_sans_g(table[r], s)
        for r, s in enumerate(starts)
    ])
    reg = _regimes(lam, a, b)
    A, B, C, D = (table[reg, i] for i in range(4))
    return A, B, C, D, g[reg]


# --- public response functions -------------------------------------------------

def _check_stretch(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(~np.isfinite(lam)) or np.any(lam < 1.0):
        raise DomainError("stretch must be finite and >= 1 (tension only)")
    return lam


def _out(x):
    return x[()] if x.ndim == 0 else x


def engineering_stress(lam, params: ModelParams):
    """Engineering (nominal) stress in MPa at stretch ``lam``."""
    lam = _check_stretch(lam)
    ncm = params.ncm_term * (lam - lam**-2)
    fib = params.fibril_term * fibril_integral(lam, params.a, params.b) / lam
    return _out(ncm + fib)


def fibril_stress(lam, params: ModelParams):
    lam = _check_stretch(lam)
    return _out(params.fibril_term * fibril_integral(lam, params.a, params.b) / lam)


def strain_energy(lam, params: ModelParams):
    """Strain energy density W (MPa); zero in the reference state."""
    lam = _check_stretch(lam)
    ncm = 0.5 * params.ncm_term * (lam**2 + 2.0 / lam - 3.0)
    fib = params.fibril_term * fibril_energy_integral(lam, params.a, params.b)
    return _out(ncm + fib)


def linear_modulus(params: ModelParams, lambda_bar):
    """Tangent modulus ``phi E / lambda_bar**2`` in the fully recruited regime.

    The matrix contribution is neglected, as in the usual linear-region estimate.
    """
    lambda_bar = np.asarray(lambda_bar, dtype=float)
    if np.any(lambda_bar < params.b):
        raise DomainError("linear modulus only defined once all fibrils are recruited (lambda_bar >= b)")
    return _out(params.fibril_term / lambda_bar**2)


# --- parameter transform ---------------------------------------------------------

def to_unconstrained(params: ModelParams) -> UnconstrainedParams:
    if params.ncm_term <= 0 or params.fibril_term <= 0:
        raise DomainError("zero modulus has no log-scale image")
    return UnconstrainedParams(
        float(np.log(params.ncm_term)),
        float(np.log(params.fibril_term)),
        float(np.log(params.a - 1.0)),
        float(np.log(params.b - params.a)),
    )


def from_unconstrained(xi) -> ModelParams:
    xi = xi.as_array() if isinstance(xi, UnconstrainedParams) else np.asarray(xi, dtype=float)
    theta = xi_to_theta(xi)
    return ModelParams.from_array(theta)


def xi_to_theta(xi):
    """Vectorised inverse transform; accepts ``(..., 4)`` arrays."""
    xi = np.asarray(xi, dtype=float)
    e = np.exp(xi)
    a = 1.0 + e[..., 2]
    return np.stack([e[..., 0], e[..., 1], a, a + e[..., 3]], axis=-1)


def theta_to_xi(theta):
    theta = np.asarray(theta, dtype=float)
    with np.errstate(divide="ignore"):
        return np.stack([
            np.log(theta[..., 0]),
            np.log(theta[..., 1]),
            np.log(theta[..., 2] - 1.0),
            np.log(theta[..., 3] - theta[..., 2]),
        ], axis=-1)


def log_abs_det_jacobian(xi):
    """``log |d theta / d xi|`` for the log-scale transform (sum of the components)."""
    xi = xi.as_array() if isinstance(xi, UnconstrainedParams) else np.asarray(xi, dtype=float)
    return np.sum(xi, axis=-1)


# --- stress with gradient for samplers -----------------------------------------

def stress_and_gradient(lam, xi):
    """Stress at ``lam`` for log-scale parameters ``xi`` and ``dN/dxi`` (shape ``(n, 4)``).

    ``lam`` must already be validated; regime boundaries are measure-zero and
    take the right-continuous branch.
    """
    lam = np.asarray(lam, dtype=float)
    xi = np.asarray(xi, dtype=float)
    rows = np.broadcast_to(xi, np.atleast_1d(lam).shape + (4,))
    stress, grad = stress_and_gradient_rows(np.atleast_1d(lam), rows)
    return stress.reshape(lam.shape), grad.reshape(lam.shape + (4,))


def stress_and_gradient_rows(lam, xi_rows):
    """Elementwise version of :func:`stress_and_gradient`: observation ``j`` uses ``xi_rows[j]``.

    Lets many experiments be evaluated in one vectorised pass. Rows with
    invalid parameters give ``nan``.
    """
    lam = np.asarray(lam, dtype=float)
    theta = xi_to_theta(xi_rows)
    ncm, fib, a, b = (theta[:, i] for i in range(4))
    w = b - a
    with np.errstate(all="ignore"):
        bad = ~((w > 0) & (a > 1.0) & np.isfinite(b) & np.isfinite(fib) & np.isfinite(ncm))
    if bad.any():
        nan = np.full(lam.shape, np.nan)
        if bad.all():
            return nan, np.full(lam.shape + (4,), np.nan)
        stress, grad = stress_and_gradient_rows(lam[~bad], xi_rows[~bad])
        out_s, out_g = nan.copy(), np.full(lam.shape + (4,), np.nan)
        out_s[~bad], out_g[~bad] = stress, grad
        return out_s, out_g
    c = 0.5 * (a + b)
    k = 4.0 / w**2
    einv = k * (a * _t_minus_log1p((c - a) / a) + b * _t_minus_log1p((c - b) / b))
    reg = (lam >= a).astype(int) + (lam >= c) + (lam >= b)
    low, high, full, top = reg == 1, reg == 2, reg >= 2, reg == 3

    integ = np.zeros_like(lam)
    integ[low] = k[low] * a[low] ** 2 * _stress_kernel(lam[low] / a[low] - 1.0)
    integ[full] = lam[full] * einv[full] - 1.0
    integ[high] -= k[high] * b[high] ** 2 * _stress_kernel(lam[high] / b[high] - 1.0)

    # J_a = int_a^{min(lam,c)} (lam/x - 1) dx ; J_b = int_c^{min(lam,b)} (lam/x - 1) dx
    ja = np.zeros_like(lam)
    jb = np.zeros_like(lam)
    ja[low] = a[low] * _xlogx_minus(lam[low] / a[low] - 1.0)
    ja[full] = lam[full] * np.log(c[full] / a[full]) - (c[full] - a[full])
    jb[high] = c[high] * _xlogx_minus(lam[high] / c[high] - 1.0)
    jb[top] = lam[top] * np.log(b[top] / c[top]) - (b[top] - c[top])
    d_da = 2.0 * integ / w - 4.0 * ja / w**2
    d_db = -2.0 * integ / w + 4.0 * jb / w**2

    ncm_part = ncm * (lam - lam**-2)
    fib_part = fib * integ / lam
    grad = np.empty(lam.shape + (4,))
    grad[:, 0] = ncm_part
    grad[:, 1] = fib_part
    grad[:, 2] = fib / lam * (d_da + d_db) * (a - 1.0)
    grad[:, 3] = fib / lam * d_db * w
    return ncm_part + fib_part, grad


def model_stress_rows(lam, xi_rows):
    """Stress only, elementwise over ``xi_rows`` (see :func:`stress_and_gradient_rows`)."""
    return stress_and_gradient_rows(np.asarray(lam, dtype=float), xi_rows)[0]


def model_stress(lam, xi):
    """Stress for log-scale parameters without domain checks on the stretch."""
    lam = np.asarray(lam, dtype=float)
    ncm, fib, a, b = xi_to_theta(np.asarray(xi, dtype=float))
    if not (a > 1.0 and b > a and np.isfinite(b)):
        return np.full(lam.shape, np.nan)
    return ncm * (lam - lam**-2) + fib * fibril_integral(lam, a, b) / lam
