"""Prior densities shared by both inference stages."""

from __future__ import annotations

import math

import numpy as np
from scipy import special

# Normal priors on log-scale parameters (nu, eta, tau, rho); used on each
# tendon's parameters in the selection stage and on the population mean in the
# mixed-effects stage.
XI_PRIOR_MEAN = np.array([1.05309738, 6.83672018, -3.80045123, -3.59771868])
XI_PRIOR_SD = np.array([1.30927056, 0.47191773, 0.64387023, 0.7310165])

SCALE_PRIOR_DF = 3.0
SCALE_PRIOR_SCALE = 1.0
LKJ_SHAPE = 1.0

_LOG_2PI = math.log(2.0 * math.pi)


def normal_logpdf(x, mean, sd):
    z = (np.asarray(x) - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * _LOG_2PI


def xi_log_prior(xi, with_grad=False):
    xi = np.asarray(xi, dtype=float)
    val = float(np.sum(normal_logpdf(xi, XI_PRIOR_MEAN, XI_PRIOR_SD)))
    if not with_grad:
        return val
    return val, -(xi - XI_PRIOR_MEAN) / XI_PRIOR_SD**2


def half_student_t_logpdf(x, df=SCALE_PRIOR_DF, scale=SCALE_PRIOR_SCALE):
    """Half Student-t on ``x > 0`` (location 0); ``-inf`` for ``x <= 0``."""
    x = np.asarray(x, dtype=float)
    const = (math.log(2.0) + special.gammaln((df + 1) / 2) - special.gammaln(df / 2)
             - 0.5 * math.log(df * math.pi) - math.log(scale))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = x / scale
        val = const - 0.5 * (df + 1) * np.log1p(z * z / df)
    return np.where(x > 0, val, -np.inf)


def half_student_t_dlogpdf(x, df=SCALE_PRIOR_DF, scale=SCALE_PRIOR_SCALE):
    x = np.asarray(x, dtype=float)
    return -(df + 1) * x / (df * scale * scale + x * x)
