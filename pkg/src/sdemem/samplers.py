"""The three MCMC methods and their proposal kernels.

* ``iapm`` -- pseudo-marginal Metropolis-Hastings on all static parameters,
  with the per-subject random effects integrated out by importance sampling
  inside the likelihood estimate.
* ``cwpm`` -- component-wise pseudo-marginal: random effects stay in the
  chain and are updated per subject with random-walk proposals, followed by
  a joint random-walk update of {sigma, phi_X} and a preconditioned MALA
  update of phi_eta on its exact conditional.
* ``mpm``  -- mixed particle method: random effects and phi_X move by
  pseudo-marginal MH, sigma by univariate slice sampling on its exact
  conditional given retained latent paths, phi_eta by MALA, and the
  retained paths refresh through a conditional particle filter with
  backward sampling.

All random-walk and MALA moves operate on the unconstrained scale (log for
positive parameters) with the transform Jacobian folded into the target.
Block-correlated variants refresh the random-number block of one subject
per iteration, cycling deterministically through subjects, which induces
correlation of roughly 1 - 1/M between successive likelihood estimates.
"""

import time
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, NumericError
from .filtering import (initial_invariant_paths, refresh_invariant_paths,
                        total_loglik)
from .importance import fit_importance_all, iapm_total_loglik
from .models import ParameterState
from .rng import RngBlockStore

__all__ = [
    "MethodConfig",
    "Trace",
    "mh_accept",
    "mala_propose",
    "phi_eta_conditional",
    "slice_sample_1d",
    "iapm_chain",
    "cwpm_chain",
    "mpm_chain",
    "cwpm_iteration",
    "mpm_iteration",
    "run_chain",
    "default_method_config",
    "ParticleBackend",
    "FrozenBackend",
]

METHODS = ("iapm", "cwpm", "mpm")


@dataclass
class MethodConfig:
    method: str
    iterations: int
    N: int = 10
    L: int = 1
    D: int = 10
    proposal: str = "mdb"
    importance_kind: str = "laplace_mdb"
    correlated: bool = True
    qmc: bool = False
    rw_cov: np.ndarray = None          # transformed-scale covariance of the RW block
    mala_step: float = 1.4
    mala_precond: np.ndarray = None    # preconditioner for the phi_eta MALA
    re_rw_scales: np.ndarray = None    # per-effect proposal SDs, shared across subjects
    seed: int = 0
    resample_scheme: str = "stratified"
    joint_eta_update: bool = False
    sigma_update: str = "slice"        # "slice" or "mh" (mpm only)
    slice_width: float = 1.0
    slice_max_steps: int = 50
    start_theta: np.ndarray = None     # natural scale, layout order
    start_eta: np.ndarray = None       # (M, re_dim)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.N < 1:
            raise ConfigurationError("N must be >= 1")
        if self.L < 1:
            raise ConfigurationError("L must be >= 1")


@dataclass
class Trace:
    """Per-iteration chain record."""

    method: str
    model: str
    param_names: tuple
    theta: np.ndarray            # (I, P) natural scale
    log_lik: np.ndarray          # (I,) current total estimate
    log_prior: np.ndarray        # (I,)
    comps: np.ndarray            # (I, M) per-subject log-likelihood components
    accepts: dict                # block name -> (I,) indicator/fraction
    eta: np.ndarray = None       # (I, M, re_dim) for cwpm/mpm
    duration_s: float = 0.0
    seed: int = 0
    final_epochs: np.ndarray = None

    @property
    def iterations(self):
        return self.theta.shape[0]

    def acceptance_rates(self):
        return {k: float(np.mean(v)) for k, v in self.accepts.items()}


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def mh_accept(log_target_new, log_target_old, log_q_forward, log_q_backward, u):
    """Metropolis-Hastings acceptance decision from log quantities."""
    if np.isneginf(log_target_new):
        return False
    if np.isneginf(log_target_old):
        return True  # recovery from a collapsed state
    log_ratio = (log_target_new - log_target_old) + (log_q_backward - log_q_forward)
    return np.log(u) < log_ratio


def phi_eta_conditional(model, phi_eta, eta):
    """Log-density and gradient of P(phi_eta | eta) on the transformed scale.

    The target is log P(eta | phi_eta) + log P(phi_eta) plus the Jacobian of
    the log transform applied to the scale entries of phi_eta. Gradients are
    analytic; `phi_eta` is on the natural scale.
    """
    layout = model.param_layout
    idx = layout.indices("phi_eta")
    is_log = layout.is_log[idx]
    phi_eta = np.asarray(phi_eta, dtype=float)
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    M = eta.shape[0]
    means, sds = model.re_prior_moments(phi_eta)
    if np.any(sds <= 0.0):
        return -np.inf, np.full(phi_eta.size, np.nan)

    logp = float(np.sum(model.re_logprior(eta, phi_eta)))
    grad = np.empty(phi_eta.size)
    for j in range(model.re_dim):
        mu_j, s_j = means[j], sds[j]
        diff = eta[:, j] - mu_j
        grad[2 * j] = np.sum(diff) / (s_j * s_j)
        # d/d log s of sum_m log N(eta; mu, s^2)
        grad[2 * j + 1] = np.sum(diff * diff) / (s_j * s_j) - M

    for k, i in enumerate(idx):
        prior = layout.params[i].prior
        val = phi_eta[k]
        logp += float(prior.logpdf(val))
        dp = float(prior.dlogpdf(val))
        if is_log[k]:
            grad[k] += dp * val + 1.0  # chain rule plus transform Jacobian
            logp += np.log(val)
        else:
            grad[k] += dp
    return logp, grad


def mala_propose(model, phi_eta, eta, precond, step, z):
    """One preconditioned Langevin proposal for phi_eta.

    Returns (proposal on the natural scale, forward log-density, backward
    log-density); returns None when the gradient is non-finite, which the
    caller treats as an outright rejection.
    """
    layout = model.param_layout
    idx = layout.indices("phi_eta")
    is_log = layout.is_log[idx]
    psi = np.where(is_log, np.log(np.where(is_log, phi_eta, 1.0)), phi_eta)
    _, grad = phi_eta_conditional(model, phi_eta, eta)
    if not np.all(np.isfinite(grad)):
        return None
    chol = np.linalg.cholesky(precond)
    drift = 0.5 * step * step * (precond @ grad)
    psi_new = psi + drift + step * (chol @ z)
    phi_new = np.where(is_log, np.exp(psi_new), psi_new)
    _, grad_new = phi_eta_conditional(model, phi_new, eta)
    if not np.all(np.isfinite(grad_new)):
        return None
    log_q_fwd = _mvn_logpdf(psi_new, psi + drift, chol * step)
    drift_back = 0.5 * step * step * (precond @ grad_new)
    log_q_bwd = _mvn_logpdf(psi, psi_new + drift_back, chol * step)
    return phi_new, float(log_q_fwd), float(log_q_bwd)


def _mvn_logpdf(x, mean, chol):
    diff = np.asarray(x) - mean
    sol = np.linalg.solve(chol, diff)
    logdet = 2.0 * np.sum(np.log(np.abs(np.diag(chol))))
    return -0.5 * (diff.size * np.log(2.0 * np.pi) + logdet + sol @ sol)


def slice_sample_1d(logf, x0, rng, width=1.0, max_steps=50):
    """Univariate slice sampler with stepping-out and shrinkage."""
    f0 = logf(x0)
    if not np.isfinite(f0):
        raise NumericError("slice sampler started at a zero-density point")
    log_y = f0 - rng.exponential()
    left = x0 - width * rng.random()
    right = left + width
    j = int(np.floor(max_steps * rng.random()))
    k = max_steps - 1 - j
    while j > 0 and logf(left) > log_y:
        left -= width
        j -= 1
    while k > 0 and logf(right) > log_y:
        right += width
        k -= 1
    for _ in range(1000):
        x1 = left + (right - left) * rng.random()
        if logf(x1) > log_y:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
    return x0


# ---------------------------------------------------------------------------
# Likelihood backends (the frozen variant supports prior-recovery tests)
# ---------------------------------------------------------------------------


class ParticleBackend:
    """Particle-filter likelihoods and path refreshes used by the chains."""

    def comps(self, model, theta, eta, dataset, cfg, store, blocks=None, prev=None):
        _, comps = total_loglik(model, theta, eta, dataset, cfg.N, cfg.D,
                                proposal=cfg.proposal, store=store,
                                scheme=cfg.resample_scheme,
                                blocks=blocks, prev_comps=prev)
        return comps

    def iapm_comps(self, model, theta, dataset, cfg, store, blocks=None, prev=None,
                   densities=None):
        _, comps = iapm_total_loglik(model, theta, dataset, cfg.L, cfg.N, cfg.D,
                                     proposal=cfg.proposal,
                                     importance_kind=cfg.importance_kind,
                                     store=store, qmc_draws=cfg.qmc,
                                     scheme=cfg.resample_scheme,
                                     blocks=blocks, prev_comps=prev,
                                     densities=densities)
        return comps

    def fit_densities(self, model, theta, dataset, cfg):
        return fit_importance_all(cfg.importance_kind, model, theta, dataset, cfg.D)

    def obs_loglik_given_paths(self, model, dataset, paths, sigma):
        total = 0.0
        for subj, path in zip(dataset.subjects, paths):
            total += float(np.sum(model.obs_logdensity(subj.y, path.obs_states(), sigma)))
        return total

    def refresh_paths(self, model, theta, eta, dataset, cfg, store, counter, paths):
        return refresh_invariant_paths(model, theta, eta, dataset, cfg.N, cfg.D,
                                       cfg.proposal, store, counter, paths,
                                       scheme=cfg.resample_scheme)

    def initial_paths(self, model, theta, eta, dataset, cfg, store):
        return initial_invariant_paths(model, theta, eta, dataset, cfg.D, store)


class FrozenBackend(ParticleBackend):
    """Constant likelihood: chains sample their priors. Test instrument."""

    def comps(self, model, theta, eta, dataset, cfg, store, blocks=None, prev=None):
        return np.zeros(dataset.M)

    def iapm_comps(self, *args, **kwargs):
        model, theta, dataset = args[0], args[1], args[2]
        return np.zeros(dataset.M)

    def fit_densities(self, model, theta, dataset, cfg):
        return None

    def obs_loglik_given_paths(self, model, dataset, paths, sigma):
        return 0.0

    def refresh_paths(self, model, theta, eta, dataset, cfg, store, counter, paths):
        return paths


# ---------------------------------------------------------------------------
# Chain state and shared update helpers
# ---------------------------------------------------------------------------


@dataclass
class _ChainState:
    theta: ParameterState
    comps: np.ndarray
    store: RngBlockStore
    paths: list = None
    densities: list = None  # cached importance fits at the current theta (iapm)


def _propose_store(store, correlated, iteration, M):
    if correlated:
        block = iteration % M
        return store.refreshed(block), [block]
    return store.refreshed_all(), None


def _init_state(model, dataset, cfg):
    layout = model.param_layout
    if cfg.start_theta is not None:
        theta_vec = np.asarray(cfg.start_theta, dtype=float)
    else:
        theta_vec = _default_start_theta(model)
    sigma, phi_X, phi_eta = layout.unpack(theta_vec)
    if cfg.start_eta is not None:
        eta = np.atleast_2d(np.asarray(cfg.start_eta, dtype=float))
    else:
        means, _ = model.re_prior_moments(phi_eta)
        eta = np.tile(means, (dataset.M, 1))
    state = ParameterState(sigma=sigma, phi_X=phi_X, phi_eta=phi_eta, eta=eta)
    state.validate(layout, n_subjects=dataset.M)
    return state


def _default_start_theta(model):
    layout = model.param_layout
    theta = np.empty(len(layout))
    for i, p in enumerate(layout.params):
        if p.transform == "log":
            theta[i] = 1.0 if p.name != "sigma" else 0.5
        else:
            theta[i] = getattr(p.prior, "mu", 0.0)
    return theta


def _chol_or_default(cov, dim, default_sd):
    if cov is None:
        cov = np.diag(np.asarray(default_sd, dtype=float) ** 2)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (dim, dim):
        raise ConfigurationError(f"proposal covariance must be {dim}x{dim}")
    return cov, np.linalg.cholesky(cov)


def _block_transform(layout, indices):
    is_log = layout.is_log[indices]

    def to_psi(vals):
        return np.where(is_log, np.log(np.where(is_log, vals, 1.0)), vals)

    def to_nat(psi):
        return np.where(is_log, np.exp(psi), psi)

    def jac(psi):
        return float(np.sum(psi[is_log]))

    return to_psi, to_nat, jac


def _theta_vector(model, state):
    return model.param_layout.pack(state.sigma, state.phi_X, state.phi_eta)


def _log_prior_block(layout, indices, values):
    total = 0.0
    for k, i in enumerate(indices):
        total += float(layout.params[i].prior.logpdf(values[k]))
    return total


# ---------------------------------------------------------------------------
# IAPM chain
# ---------------------------------------------------------------------------


def iapm_chain(model, dataset, cfg, backend=None):
    """Pseudo-marginal MH over all static parameters.

    The likelihood integrates the random effects out per subject; the
    correlated variant refreshes one subject's random-number block per
    iteration (cycling deterministically) and reuses the stored per-subject
    components in the acceptance ratio.
    """
    backend = backend or ParticleBackend()
    layout = model.param_layout
    M = dataset.M
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC4A1]))
    store = RngBlockStore.create(cfg.seed, M)

    theta0 = _init_state(model, dataset, cfg)
    all_idx = np.arange(len(layout))
    to_psi, to_nat, jac = _block_transform(layout, all_idx)
    _, chol = _chol_or_default(cfg.rw_cov, len(layout), _default_rw_sds(model, "iapm"))

    densities = backend.fit_densities(model, theta0, dataset, cfg)
    comps = backend.iapm_comps(model, theta0, dataset, cfg, store, densities=densities)
    if not np.all(np.isfinite(comps)):
        raise NumericError("initial IAPM likelihood estimate is not finite")
    psi = to_psi(_theta_vector(model, theta0))
    log_prior = layout.log_prior(to_nat(psi))
    target = float(np.sum(comps)) + log_prior + jac(psi)

    I, P = cfg.iterations, len(layout)
    theta_out = np.empty((I, P))
    ll_out = np.empty(I)
    lp_out = np.empty(I)
    comps_out = np.empty((I, M))
    acc = np.zeros(I)
    t_start = time.perf_counter()
    theta_cur = theta0

    for i in range(I):
        psi_star = psi + chol @ rng.standard_normal(P)
        theta_star_vec = to_nat(psi_star)
        theta_star = ParameterState.from_theta(layout, theta_star_vec, theta_cur.eta)
        store_star, _ = _propose_store(store, cfg.correlated, i, M)
        dens_star = backend.fit_densities(model, theta_star, dataset, cfg)
        comps_star = backend.iapm_comps(model, theta_star, dataset, cfg, store_star,
                                        densities=dens_star)
        lp_star = layout.log_prior(theta_star_vec)
        target_star = float(np.sum(comps_star)) + lp_star + jac(psi_star)
        if mh_accept(target_star, target, 0.0, 0.0, rng.random()):
            psi, comps, store, target = psi_star, comps_star, store_star, target_star
            theta_cur, log_prior = theta_star, lp_star
            acc[i] = 1.0
        theta_out[i] = to_nat(psi)
        ll_out[i] = float(np.sum(comps))
        lp_out[i] = log_prior
        comps_out[i] = comps

    return Trace(method="iapm", model=model.name, param_names=layout.names,
                 theta=theta_out, log_lik=ll_out, log_prior=lp_out,
                 comps=comps_out, accepts={"theta": acc},
                 duration_s=time.perf_counter() - t_start, seed=cfg.seed,
                 final_epochs=store.epochs.copy())


# ---------------------------------------------------------------------------
# CWPM
# ---------------------------------------------------------------------------


def _eta_update(model, dataset, cfg, backend, state, rng, iteration):
    """Per-subject MH on the random effects (jointly proposed).

    Each subject accepts or rejects with its own likelihood factor times its
    random-effect prior; this is valid because the likelihood factorises
    over subjects. A configuration flag switches to one joint accept.
    """
    M = dataset.M
    scales = (np.asarray(cfg.re_rw_scales, dtype=float)
              if cfg.re_rw_scales is not None else np.full(model.re_dim, 0.3))
    eta_star = state.theta.eta + scales * rng.standard_normal((M, model.re_dim))
    store_star, _ = _propose_store(state.store, cfg.correlated, iteration, M)
    theta = state.theta
    comps_star = backend.comps(model, theta, eta_star, dataset, cfg, store_star)
    lp_cur = model.re_logprior(theta.eta, theta.phi_eta)
    lp_star = model.re_logprior(eta_star, theta.phi_eta)
    if cfg.joint_eta_update:
        accept_all = mh_accept(float(np.sum(comps_star + lp_star)),
                               float(np.sum(state.comps + lp_cur)),
                               0.0, 0.0, rng.random())
        accepted = np.full(M, accept_all)
    else:
        u = rng.random(M)
        accepted = np.zeros(M, dtype=bool)
        for m in range(M):
            accepted[m] = mh_accept(comps_star[m] + lp_star[m],
                                    state.comps[m] + lp_cur[m], 0.0, 0.0, u[m])
    if np.any(accepted):
        eta_new = np.where(accepted[:, None], eta_star, theta.eta)
        comps_new = np.where(accepted, comps_star, state.comps)
        store_new = state.store.adopt_epochs(store_star, np.nonzero(accepted)[0])
        state.theta.eta = eta_new
        state.comps = comps_new
        state.store = store_new
    return float(np.mean(accepted))


def _theta_block_update(model, dataset, cfg, backend, state, rng, iteration, indices,
                        default_key):
    """Joint random-walk update of a static block with full re-estimation."""
    layout = model.param_layout
    to_psi, to_nat, jac = _block_transform(layout, indices)
    _, chol = _chol_or_default(cfg.rw_cov, len(indices), _default_rw_sds(model, default_key))
    theta = state.theta
    vec = _theta_vector(model, theta)
    psi = to_psi(vec[indices])
    psi_star = psi + chol @ rng.standard_normal(len(indices))
    vec_star = vec.copy()
    vec_star[indices] = to_nat(psi_star)
    theta_star = ParameterState.from_theta(layout, vec_star, theta.eta)
    store_star, _ = _propose_store(state.store, cfg.correlated, iteration, dataset.M)
    comps_star = backend.comps(model, theta_star, theta.eta, dataset, cfg, store_star)
    cur = float(np.sum(state.comps)) + _log_prior_block(layout, indices, vec[indices]) + jac(psi)
    new = (float(np.sum(comps_star)) + _log_prior_block(layout, indices, vec_star[indices])
           + jac(psi_star))
    if mh_accept(new, cur, 0.0, 0.0, rng.random()):
        state.theta = theta_star
        state.comps = comps_star
        state.store = store_star
        return 1.0
    return 0.0


def _phi_eta_update(model, cfg, state, rng):
    """Preconditioned MALA on P(phi_eta | eta); no particle filter involved."""
    layout = model.param_layout
    idx = layout.indices("phi_eta")
    precond = (np.atleast_2d(np.asarray(cfg.mala_precond, dtype=float))
               if cfg.mala_precond is not None
               else np.diag(_default_mala_precond(model)))
    theta = state.theta
    out = mala_propose(model, theta.phi_eta, theta.eta, precond, cfg.mala_step,
                       rng.standard_normal(idx.size))
    if out is None:
        return 0.0
    phi_star, lq_f, lq_b = out
    cur, _ = phi_eta_conditional(model, theta.phi_eta, theta.eta)
    new, _ = phi_eta_conditional(model, phi_star, theta.eta)
    if mh_accept(new, cur, lq_f, lq_b, rng.random()):
        state.theta.phi_eta = phi_star
        return 1.0
    return 0.0


def cwpm_iteration(state, model, dataset, cfg, rng, iteration, backend=None):
    """One CWPM sweep: eta block, {sigma, phi_X} block, phi_eta block."""
    backend = backend or ParticleBackend()
    layout = model.param_layout
    acc_eta = _eta_update(model, dataset, cfg, backend, state, rng, iteration)
    idx_thx = np.concatenate([layout.indices("sigma"), layout.indices("phi_X")])
    acc_thx = _theta_block_update(model, dataset, cfg, backend, state, rng, iteration,
                                  idx_thx, "theta_X")
    acc_phe = _phi_eta_update(model, cfg, state, rng)
    return {"eta": acc_eta, "theta_X": acc_thx, "phi_eta": acc_phe}


def cwpm_chain(model, dataset, cfg, backend=None):
    backend = backend or ParticleBackend()
    return _run_component_chain(model, dataset, cfg, backend, cwpm_iteration, "cwpm",
                                needs_paths=False)


# ---------------------------------------------------------------------------
# MPM
# ---------------------------------------------------------------------------


def _sigma_update(model, dataset, cfg, backend, state, rng):
    """Sigma from its exact conditional given the retained paths.

    Slice sampling on log sigma by default; a random-walk MH variant is
    available for fidelity runs. Afterwards the stored likelihood estimate
    is replayed with the unmodified random-number store at the new sigma.
    """
    layout = model.param_layout
    i_sigma = int(layout.indices("sigma")[0])
    prior = layout.params[i_sigma].prior
    paths = state.paths

    def logf(log_s):
        s = float(np.exp(log_s))
        lp = float(prior.logpdf(s))
        if not np.isfinite(lp):
            return -np.inf
        return (backend.obs_loglik_given_paths(model, dataset, paths, s)
                + lp + log_s)

    s_cur = np.log(state.theta.sigma)
    if cfg.sigma_update == "slice":
        s_new = slice_sample_1d(logf, s_cur, rng, width=cfg.slice_width,
                                max_steps=cfg.slice_max_steps)
        moved = s_new != s_cur
    else:
        s_prop = s_cur + cfg.slice_width * rng.standard_normal()
        moved = mh_accept(logf(s_prop), logf(s_cur), 0.0, 0.0, rng.random())
        s_new = s_prop if moved else s_cur
    if moved:
        state.theta.sigma = float(np.exp(s_new))
        # Replay: same auxiliary random numbers, new sigma.
        state.comps = backend.comps(model, state.theta, state.theta.eta, dataset,
                                    cfg, state.store)
    return 1.0 if moved else 0.0


def mpm_iteration(state, model, dataset, cfg, rng, iteration, backend=None):
    """One MPM sweep: eta (PM-MH), sigma (slice + replay), phi_X (PM-MH),
    phi_eta (MALA), retained paths (conditional filter + backward draw)."""
    backend = backend or ParticleBackend()
    layout = model.param_layout
    acc_eta = _eta_update(model, dataset, cfg, backend, state, rng, iteration)
    acc_sig = _sigma_update(model, dataset, cfg, backend, state, rng)
    acc_phx = _theta_block_update(model, dataset, cfg, backend, state, rng, iteration,
                                  layout.indices("phi_X"), "phi_X")
    acc_phe = _phi_eta_update(model, cfg, state, rng)
    state.paths = backend.refresh_paths(model, state.theta, state.theta.eta, dataset,
                                        cfg, state.store, iteration + 1, state.paths)
    return {"eta": acc_eta, "sigma": acc_sig, "phi_X": acc_phx, "phi_eta": acc_phe}


def mpm_chain(model, dataset, cfg, backend=None):
    backend = backend or ParticleBackend()
    return _run_component_chain(model, dataset, cfg, backend, mpm_iteration, "mpm",
                                needs_paths=True)


# ---------------------------------------------------------------------------
# Shared chain runner for cwpm/mpm
# ---------------------------------------------------------------------------


def _run_component_chain(model, dataset, cfg, backend, iteration_fn, method, needs_paths):
    layout = model.param_layout
    M = dataset.M
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC4A1]))
    store = RngBlockStore.create(cfg.seed, M)
    theta0 = _init_state(model, dataset, cfg)
    comps = backend.comps(model, theta0, theta0.eta, dataset, cfg, store)
    if not np.all(np.isfinite(comps)):
        raise NumericError("initial likelihood estimate is not finite")
    state = _ChainState(theta=theta0, comps=comps, store=store)
    if needs_paths:
        state.paths = backend.initial_paths(model, theta0, theta0.eta, dataset, cfg, store)

    I, P = cfg.iterations, len(layout)
    theta_out = np.empty((I, P))
    ll_out = np.empty(I)
    lp_out = np.empty(I)
    comps_out = np.empty((I, M))
    eta_out = np.empty((I, M, model.re_dim))
    accepts = None
    t_start = time.perf_counter()

    for i in range(I):
        acc = iteration_fn(state, model, dataset, cfg, rng, i, backend=backend)
        if accepts is None:
            accepts = {k: np.zeros(I) for k in acc}
        for k, v in acc.items():
            accepts[k][i] = v
        vec = _theta_vector(model, state.theta)
        theta_out[i] = vec
        ll_out[i] = float(np.sum(state.comps))
        lp_out[i] = layout.log_prior(vec)
        comps_out[i] = state.comps
        eta_out[i] = state.theta.eta

    return Trace(method=method, model=model.name, param_names=layout.names,
                 theta=theta_out, log_lik=ll_out, log_prior=lp_out,
                 comps=comps_out, accepts=accepts, eta=eta_out,
                 duration_s=time.perf_counter() - t_start, seed=cfg.seed,
                 final_epochs=state.store.epochs.copy())


def run_chain(model, dataset, cfg, backend=None):
    if cfg.method == "iapm":
        return iapm_chain(model, dataset, cfg, backend=backend)
    if cfg.method == "cwpm":
        return cwpm_chain(model, dataset, cfg, backend=backend)
    if cfg.method == "mpm":
        return mpm_chain(model, dataset, cfg, backend=backend)
    raise ConfigurationError(f"unknown method {cfg.method!r}")


# ---------------------------------------------------------------------------
# Calibrated proposal defaults (desk-scale pilot runs)
# ---------------------------------------------------------------------------


def _default_rw_sds(model, key):
    if model.name == "tumour":
        table = {
            "iapm": np.array([0.08, 0.06, 0.03, 0.06, 0.10, 0.10, 0.10]),
            "theta_X": np.array([0.10, 0.08, 0.04]),   # (sigma, gamma, rho)
            "phi_X": np.array([0.10, 0.05]),           # (gamma, rho)
        }
    else:
        table = {
            "iapm": np.array([0.10, 0.08, 0.08, 0.12, 0.15]),
            "theta_X": np.array([0.12, 0.10, 0.08]),   # (sigma, gamma, x0)
            "phi_X": np.array([0.12, 0.10]),           # (gamma, x0)
        }
    return table[key]


def _default_mala_precond(model):
    # Rough conditional scales of phi_eta given ~10 subjects.
    if model.name == "tumour":
        return np.array([0.1, 0.05, 0.1, 0.05])
    return np.array([0.1, 0.05])


def default_method_config(model, method, iterations, **overrides):
    """Desk-calibrated configuration for a built-in model and method."""
    base = dict(method=method, iterations=iterations, D=10, proposal="mdb",
                correlated=True, mala_step=1.4)
    if method == "iapm":
        base.update(N=8, L=8, importance_kind="laplace_mdb")
    elif method == "cwpm":
        base.update(N=10)
    else:
        base.update(N=10)
    base.update(overrides)
    return MethodConfig(**base)
