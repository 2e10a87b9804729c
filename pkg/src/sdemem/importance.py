"""Random-effect importance sampling for the IAPM likelihood estimator.

The per-subject likelihood P(y_m | theta) integrates the particle-filter
estimate over the random effects:

    (1/L) sum_l  P_hat(y_m | eta^(l), sigma, phi_X) P(eta^(l) | phi_eta)
                 / g(eta^(l) | theta),        eta^(l) ~ g(. | theta).

Three importance densities g are supported:

* ``prior``       -- the random-effect prior itself (ratio one);
* ``laplace_mdb`` -- Gaussian centred at the maximiser of
  log P(y_m | x_hat(eta), theta) + log P(eta | phi_eta) where x_hat is the
  one-step bridge mean recursion between observation times, with covariance
  the inverse negative Hessian at the mode;
* ``l_ode``       -- same mode search with x_hat the drift-ODE path, but
  with covariance fixed to half the diagonal prior variances (the free
  Laplace covariance collapses for this approximation).

Draws can optionally use randomised quasi-Monte Carlo uniforms.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .exceptions import ConfigurationError
from .filtering import _draw_block_randoms, _pf_batch
from .util import LOG_2PI, logsumexp, ndtri

__all__ = ["ImportanceDensity", "fit_importance", "fit_importance_all",
           "iapm_total_loglik", "rqmc_uniforms", "IMPORTANCE_KINDS"]

IMPORTANCE_KINDS = ("prior", "l_ode", "laplace_mdb")


@dataclass
class ImportanceDensity:
    """Gaussian (or prior) proposal over one subject's random effects."""

    kind: str
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(default=None)
    fallback: bool = False  # True when a Laplace fit fell back to the prior
    _phi_eta: np.ndarray = field(default=None)
    _model: object = field(default=None, repr=False)

    def sample(self, uniforms):
        if self.kind == "prior":
            return self._model.re_sample(self._phi_eta, uniforms)
        z = ndtri(np.clip(uniforms, 1e-15, 1.0 - 1e-15))
        return self.mean + z @ self.chol.T

    def logpdf(self, eta):
        if self.kind == "prior":
            return self._model.re_logprior(eta, self._phi_eta)
        diff = np.atleast_2d(eta) - self.mean
        sol = np.linalg.solve(self.chol, diff.T)
        quad = np.sum(sol * sol, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        out = -0.5 * (self.mean.size * LOG_2PI + logdet + quad)
        return out if np.asarray(eta).ndim > 1 else float(out[0])


def _prior_density(model, phi_eta):
    means, sds = model.re_prior_moments(phi_eta)
    return ImportanceDensity(kind="prior", mean=means.copy(), cov=np.diag(sds * sds),
                             _phi_eta=np.asarray(phi_eta, float), _model=model)


# ---------------------------------------------------------------------------
# Approximate state paths used by the Laplace objectives
# ---------------------------------------------------------------------------


def _mdb_mean_path(model, sigma, phi_X, eta_rows, times, y_rows):
    """Bridge mean recursion between observation times, one row per eta.

    x_{t+1} = x_t + (mu_t sigma^2 + v_t (y_{t+1} - x_t)) / (v_t dt + sigma^2) dt,
    stepping directly from one observation to the next; `y_rows` is (R, T).
    """
    R = eta_rows.shape[0]
    x = model.initial_state(phi_X, eta_rows).reshape(R, 1).astype(float).copy()
    path = np.empty((R, times.size))
    path[:, 0] = x[:, 0]
    sig2 = sigma * sigma
    with np.errstate(all="ignore"):
        for t in range(times.size - 1):
            dt = times[t + 1] - times[t]
            mu, v = model.drift_and_diffusion_sq(x, phi_X, eta_rows)
            x = x + (mu * sig2 + v * (y_rows[:, t + 1:t + 2] - x)) / (v * dt + sig2) * dt
            path[:, t + 1] = x[:, 0]
    return path


# ---------------------------------------------------------------------------
# Mode finding: damped Newton with finite-difference derivatives, batched
# over subjects. The stencil for a d-dimensional effect vector evaluates the
# objective at the centre, +-h along each axis and the four corners of each
# axis pair, giving central-difference gradients and Hessians in one
# vectorised sweep.
# ---------------------------------------------------------------------------


def _fd_stencil(d):
    pts = [np.zeros(d)]
    for i in range(d):
        for s in (+1.0, -1.0):
            e = np.zeros(d)
            e[i] = s
            pts.append(e)
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    for i, j in pairs:
        for si in (+1.0, -1.0):
            for sj in (+1.0, -1.0):
                e = np.zeros(d)
                e[i], e[j] = si, sj
                pts.append(e)
    return np.array(pts), pairs


def _fd_grad_hess(fvals, d, pairs, h):
    """Gradient and Hessian from stencil values, one subject per row."""
    B = fvals.shape[0]
    f0 = fvals[:, 0]
    grad = np.empty((B, d))
    hess = np.empty((B, d, d))
    for i in range(d):
        fp, fm = fvals[:, 1 + 2 * i], fvals[:, 2 + 2 * i]
        grad[:, i] = (fp - fm) / (2.0 * h[:, i])
        hess[:, i, i] = (fp - 2.0 * f0 + fm) / (h[:, i] * h[:, i])
    base = 1 + 2 * d
    for k, (i, j) in enumerate(pairs):
        fpp = fvals[:, base + 4 * k]
        fpm = fvals[:, base + 4 * k + 1]
        fmp = fvals[:, base + 4 * k + 2]
        fmm = fvals[:, base + 4 * k + 3]
        hess[:, i, j] = hess[:, j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[:, i] * h[:, j])
    return f0, grad, hess


def _laplace_fit_rows(objective, phi_eta, start, max_iter=200, tol=1e-7):
    """Maximise the objective per row by damped Newton with FD derivatives.

    Returns (modes, hessians at the final iterate, converged flags). A row
    converges once its Newton move falls below tol (relative to the iterate
    scale); rows that keep decreasing or go non-finite stay unconverged and
    the caller falls back to the prior.
    """
    x = np.array(start, dtype=float)
    B, d = x.shape
    stencil, pairs = _fd_stencil(d)
    K = stencil.shape[0]
    converged = np.zeros(B, dtype=bool)
    f_cur = objective(x, phi_eta)
    hess = np.zeros((B, d, d))
    for _ in range(max_iter):
        h = 1e-4 * (1.0 + np.abs(x))
        pts = (x[:, None, :] + stencil[None, :, :] * h[:, None, :]).reshape(B * K, d)
        fvals = objective(pts, phi_eta).reshape(B, K)
        f0, grad, hess = _fd_grad_hess(fvals, d, pairs, h)
        step = np.empty((B, d))
        for b in range(B):
            ok = np.all(np.isfinite(hess[b])) and np.all(np.isfinite(grad[b]))
            try:
                step[b] = np.linalg.solve(hess[b], -grad[b]) if ok else 0.0
            except np.linalg.LinAlgError:
                step[b] = grad[b]  # fall back to plain ascent
        step = np.where(np.isfinite(step), step, 0.0)
        # Limit pathological jumps, then backtrack rows whose Newton step
        # decreased the objective.
        norms = np.maximum(np.max(np.abs(step), axis=1, keepdims=True), 1e-300)
        step = np.where(norms > 50.0, step * (50.0 / norms), step)
        scale = np.ones(B)
        for _bt in range(25):
            x_new = x + scale[:, None] * step
            f_new = objective(x_new, phi_eta)
            worse = (f_new < f_cur - 1e-12) & ~converged
            if not np.any(worse):
                break
            scale[worse] *= 0.5
        move = np.max(np.abs(scale[:, None] * step), axis=1)
        improved = f_new >= f_cur
        take = improved & ~converged
        x = np.where(take[:, None], x_new, x)
        f_cur = np.where(take, f_new, f_cur)
        converged |= move < tol * (1.0 + np.max(np.abs(x), axis=1))
        if np.all(converged):
            break
    converged &= np.all(np.isfinite(x), axis=1) & np.isfinite(f_cur)
    return x, hess, converged


def fit_importance_all(kind, model, theta, dataset, D):
    """Fit one importance density per subject (batched over time groups)."""
    if kind not in IMPORTANCE_KINDS:
        raise ConfigurationError(f"unknown importance kind {kind!r}")
    M = dataset.M
    phi_eta = np.asarray(theta.phi_eta, dtype=float)
    if kind == "prior":
        return [_prior_density(model, phi_eta) for _ in range(M)]

    means, sds = model.re_prior_moments(phi_eta)
    out = [None] * M
    for times_arr, members in dataset.time_groups():
        B = len(members)
        start = np.tile(means, (B, 1))
        ys = np.stack([dataset.subjects[m].y for m in members])
        modes, hessians, conv = _laplace_fit_rows(
            _RowObjective(model, theta, times_arr, ys, kind, D), phi_eta, start)
        for i, m in enumerate(members):
            if not conv[i]:
                out[m] = _prior_density(model, phi_eta)
                out[m].fallback = True
                continue
            if kind == "l_ode":
                cov = np.diag(0.5 * sds * sds)
            else:
                neg_h = -0.5 * (hessians[i] + hessians[i].T)
                try:
                    cov = np.linalg.inv(neg_h)
                except np.linalg.LinAlgError:
                    out[m] = _prior_density(model, phi_eta)
                    out[m].fallback = True
                    continue
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                out[m] = _prior_density(model, phi_eta)
                out[m].fallback = True
                continue
            out[m] = ImportanceDensity(kind=kind, mean=modes[i], cov=cov, chol=chol,
                                       _phi_eta=phi_eta, _model=model)
    return out


class _RowObjective:
    """Batched objective: stencil rows are grouped per subject.

    Rows arrive as (B * K, d) with subject-major layout; each subject block
    is scored against its own observations, all in one vectorised sweep.
    """

    def __init__(self, model, theta, times, ys, kind, D):
        self.model = model
        self.theta = theta
        self.times = times
        self.ys = ys
        self.kind = kind
        self.D = D

    def __call__(self, eta_rows, phi_eta):
        from .models import solve_drift_ode

        B = self.ys.shape[0]
        R = eta_rows.shape[0]
        reps = R // B
        y_rows = np.repeat(self.ys, reps, axis=0)
        model, theta = self.model, self.theta
        if self.kind == "laplace_mdb":
            path = _mdb_mean_path(model, theta.sigma, theta.phi_X, eta_rows,
                                  self.times, y_rows)
        else:
            path = solve_drift_ode(model, theta.phi_X, eta_rows, self.times,
                                   substeps=self.D)
        with np.errstate(all="ignore"):
            obs = np.sum(model.obs_logdensity(y_rows, path, theta.sigma), axis=1)
            vals = obs + model.re_logprior(eta_rows, phi_eta)
        return np.where(np.isnan(vals), -np.inf, vals)


def fit_importance(kind, model, theta, data_m, D):
    """Importance density for a single subject (see `fit_importance_all`)."""
    from .models import Dataset

    ds = Dataset(subjects=[data_m], scaled=True)
    return fit_importance_all(kind, model, theta, ds, D)[0]


# ---------------------------------------------------------------------------
# Randomised quasi-Monte Carlo uniforms
# ---------------------------------------------------------------------------


def rqmc_uniforms(L, d, rng):
    """L randomised low-discrepancy points in [0, 1)^d.

    Dimension one uses the bit-reversal (radical-inverse, base 2) sequence
    with a random 53-bit digital shift; higher dimensions use a scrambled
    base-2 digital net.
    """
    if d == 1:
        shift = int(rng.integers(0, 1 << 53))
        pts = np.empty((L, 1))
        for i in range(L):
            r = int(format(i, "053b")[::-1], 2)
            pts[i, 0] = ((r ^ shift) & ((1 << 53) - 1)) / float(1 << 53)
        return pts
    sob = qmc.Sobol(d=d, scramble=True, seed=rng)
    m = max(1, math.ceil(math.log2(max(L, 2))))
    return sob.random_base2(m)[:L]


# ---------------------------------------------------------------------------
# IAPM likelihood
# ---------------------------------------------------------------------------


def iapm_total_loglik(model, theta, dataset, L, N, D, proposal="emd",
                      importance_kind="prior", store=None, qmc_draws=False,
                      scheme="stratified", adaptive=True, blocks=None,
                      prev_comps=None, densities=None):
    """IAPM estimate of log P(y_{1:M} | theta) and its per-subject parts.

    Per subject: draw L random-effect vectors from the importance density
    (subject's "re" stream lane), run one particle filter per draw
    (subject's "pf" lane, sub-stream per draw), and average the importance-
    corrected estimates with a log-sum-exp. With `blocks` given only those
    subjects are recomputed (`prev_comps` supplies the rest). Pre-fitted
    `densities` may be passed to avoid refitting at an unchanged theta.
    """
    if L < 1:
        raise ConfigurationError("L must be >= 1")
    if store is None:
        raise ConfigurationError("iapm_total_loglik requires an RngBlockStore")
    M = dataset.M
    comps = np.empty(M)
    todo = set(range(M)) if blocks is None else set(int(b) for b in blocks)
    if blocks is not None:
        if prev_comps is None:
            raise ConfigurationError("partial re-estimation needs prev_comps")
        comps[:] = prev_comps
    if densities is None:
        densities = fit_importance_all(importance_kind, model, theta, dataset, D)
    phi_eta = np.asarray(theta.phi_eta, dtype=float)

    for times_arr, members in dataset.time_groups():
        members = [m for m in members if m in todo]
        if not members:
            continue
        T = times_arr.size
        rows_eta, rows_logw = [], []
        row_subject = []
        for m in members:
            gen_re = store.generator(m, "re")
            if qmc_draws:
                U = rqmc_uniforms(L, model.re_dim, gen_re)
            else:
                U = gen_re.random((L, model.re_dim))
            etas = densities[m].sample(U)
            log_g = np.atleast_1d(densities[m].logpdf(etas))
            log_p = model.re_logprior(etas, phi_eta)
            rows_eta.append(etas)
            rows_logw.append(log_p - log_g)
            row_subject.extend([m] * L)
        eta_rows = np.vstack(rows_eta)
        B = eta_rows.shape[0]
        Y = np.empty((B, T))
        for i, m in enumerate(row_subject):
            Y[i] = dataset.subjects[m].y
        x0 = model.initial_state(theta.phi_X, eta_rows)
        normals = np.empty((B, max(T - 1, 0), D, N))
        uniforms = np.empty((B, max(T - 1, 0), N))
        for i, m in enumerate(row_subject):
            gen = store.generator(m, "pf", i % L)
            normals[i], uniforms[i] = _draw_block_randoms(gen, T, D, N)
        ll, _ = _pf_batch(model, theta.sigma, theta.phi_X, eta_rows, x0, times_arr, Y,
                          N, D, proposal, normals, uniforms, scheme=scheme,
                          adaptive=adaptive)
        ll = ll.reshape(len(members), L)
        logw = np.vstack(rows_logw)
        with np.errstate(invalid="ignore"):
            terms = ll + logw
        terms = np.where(np.isnan(terms), -np.inf, terms)
        comps[np.array(members)] = logsumexp(terms, axis=1) - np.log(L)
    return float(np.sum(comps)), comps
