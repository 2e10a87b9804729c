"""Small numeric helpers used throughout the package."""

import numpy as np
from scipy.special import logsumexp, ndtri

__all__ = ["LOG_2PI", "normal_logpdf", "logsumexp", "ndtri"]

LOG_2PI = float(np.log(2.0 * np.pi))


def normal_logpdf(x, mean, var):
    """Gaussian log-density, elementwise with broadcasting.

    `var` must be positive; zero variance yields -inf off the mean and +inf
    on it (degenerate limits are handled explicitly by callers that need
    them).
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = np.asarray(x) - mean
        return -0.5 * (LOG_2PI + np.log(var) + diff * diff / var)


def logsumexp_rows(lw):
    """log(sum(exp(lw), axis=1)) for a 2-d array, fast path for filter loops.

    Rows that are entirely -inf return -inf without warnings.
    """
    m = np.max(lw, axis=1)
    ok = np.isfinite(m)
    safe = np.where(ok, m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.sum(np.exp(lw - safe[:, None]), axis=1)
        return np.where(ok, safe + np.log(s), -np.inf)
