"""Independent reference implementations used as test oracles.

These deliberately avoid the package's own code paths: the Kalman filter
works on the exact Gaussian transitions of the constant model, quadrature
oracles integrate densities directly, and the bootstrap filter below is a
from-scratch transcription used to pin the weight conventions.
"""

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def norm_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def kalman_loglik_constant(y, times, x0, beta, gamma, sigma):
    """Exact likelihood of the constant model (linear-Gaussian SSM).

    Transition N(x + beta dt, gamma^2 dt), observation N(x, sigma^2), and a
    point-mass initial state at x0 observed at the first time.
    """
    ll = float(norm_logpdf(y[0], x0, sigma ** 2))
    m, P = x0, 0.0
    for t in range(1, len(times)):
        dt = times[t] - times[t - 1]
        m += beta * dt
        P += gamma * gamma * dt
        S = P + sigma * sigma
        ll += float(norm_logpdf(y[t], m, S))
        K = P / S
        m += K * (y[t] - m)
        P *= (1.0 - K)
    return ll


def gh_marginal_loglik_constant(y, times, x0, gamma, sigma, mu_beta, sigma_beta,
                                order=200):
    """Marginal likelihood of one constant-model subject.

    Integrates the Kalman likelihood over log(beta) ~ N(mu_beta,
    sigma_beta^2) by Gauss-Hermite quadrature.
    """
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    z = mu_beta + np.sqrt(2.0) * sigma_beta * nodes
    lls = np.array([kalman_loglik_constant(y, times, x0, np.exp(b), gamma, sigma)
                    for b in z])
    logw = np.log(weights) - 0.5 * np.log(np.pi)
    m = np.max(lls + logw)
    return float(m + np.log(np.sum(np.exp(lls + logw - m))))


def simulate_constant_subject(rng, times, x0, beta, gamma, sigma):
    """Draw one subject from the constant model's exact transitions."""
    x = x0
    ys = [x + sigma * rng.standard_normal()]
    for t in range(1, len(times)):
        dt = times[t] - times[t - 1]
        x = x + beta * dt + gamma * np.sqrt(dt) * rng.standard_normal()
        ys.append(x + sigma * rng.standard_normal())
    return np.array(ys)


def bootstrap_pf_reference(y, times, x0, beta, gamma, sigma, N, D, normals,
                           uniforms, ess_threshold=None):
    """From-scratch bootstrap filter for the constant model.

    Consumes the same pre-generated random slices as the package filter
    (normals (T-1, D, N), uniforms (T-1, N), stratified resampling, the
    adaptive rule ESS < N/2) so agreement is expected to be bit-exact.
    """
    T = len(times)
    x = np.full(N, float(x0))
    loglik = float(norm_logpdf(y[0], x0, sigma ** 2))
    W = np.full(N, 1.0 / N)
    for t in range(1, T):
        ess = 1.0 / np.sum(W * W)
        if ess < (N / 2.0 if ess_threshold is None else ess_threshold):
            pos = (np.arange(N) + uniforms[t - 1]) / N
            parents = np.searchsorted(np.cumsum(W), pos).clip(0, N - 1)
            x = x[parents]
            logWhat = np.full(N, -np.log(N))
        else:
            logWhat = np.log(W)
        dtau = (times[t] - times[t - 1]) / D
        for k in range(D):
            x = x + beta * dtau + gamma * np.sqrt(dtau) * normals[t - 1, k]
        lw = logWhat + norm_logpdf(y[t], x, sigma ** 2)
        m = lw.max()
        step = m + np.log(np.sum(np.exp(lw - m)))
        loglik += step
        W = np.exp(lw - step)
    return loglik


def univariate_batch_means_ess(x):
    """Direct univariate batch-means ESS with batch size floor(sqrt(n))."""
    x = np.asarray(x, dtype=float)
    n = x.size
    b = int(np.floor(np.sqrt(n)))
    a = n // b
    bm = x[: a * b].reshape(a, b).mean(axis=1)
    lam = np.var(x, ddof=1)
    sig = b * np.var(bm, ddof=1)
    return n * lam / sig


def batch_means_mcse(x):
    x = np.asarray(x, dtype=float)
    n = x.size
    b = int(np.floor(np.sqrt(n)))
    a = n // b
    bm = x[: a * b].reshape(a, b).mean(axis=1)
    return bm.std(ddof=1) / np.sqrt(a)
