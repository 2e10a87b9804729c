"""Particle filtering for SDE mixed-effects models.

One filter processes one subject: N particles start at the subject's
(deterministic) initial state, receive the time-0 observation weight, and
then per observation interval are adaptively resampled, propagated along a
D-step sub-path proposal and re-weighted with

    log g(y_t | x_t, sigma) + log_f - log_q,

where log_f is the Euler-Maruyama density of the proposed sub-path and
log_q its proposal density. The running sum of log-sum-exp weight totals is
an unbiased estimator of the likelihood on the natural scale for fixed
parameters and random effects.

Filters for several subjects (or several importance-sampling draws) with a
shared observation grid run batched: every per-particle array carries a
leading batch axis and each row consumes its own pre-generated slice of
that subject's random-number block (N * D normals plus N uniforms per
observation step, drawn whether or not the adaptive rule resamples, so
block replays stay aligned).

The conditional filter holds one retained path fixed in particle slot 0,
resamples at every step, and draws a fresh invariant path by backward
sampling; the backward transition density is the product of Euler-Maruyama
sub-step densities along the stored sub-path.
"""

from dataclasses import dataclass

import numpy as np

from .bridges import PROPOSALS, propagate_interval
from .exceptions import ConfigurationError, NumericError, ParticleCollapseError
from .models import solve_drift_ode_grid
from .util import logsumexp_rows, normal_logpdf

__all__ = [
    "ParticleCloud",
    "InvariantPath",
    "resample",
    "run_pf",
    "total_loglik",
    "run_cpf",
    "refresh_invariant_paths",
    "initial_invariant_paths",
    "RESAMPLING_SCHEMES",
]

RESAMPLING_SCHEMES = ("stratified", "multinomial")


@dataclass
class ParticleCloud:
    """Filter output: final-time particles, weights, ancestry, likelihood."""

    states: np.ndarray        # (N,) particle states at the final observation time
    log_weights: np.ndarray   # (N,) unnormalised log-weights at the final time
    norm_weights: np.ndarray  # (N,)
    ancestry: np.ndarray      # (T, N) parent indices; row 0 is the identity
    log_lik: float
    states_history: np.ndarray  # (T, N) particle states at each observation time


@dataclass
class InvariantPath:
    """Retained discretised path for one subject.

    `steps[t-1]` holds the D sub-grid states of the interval ending at
    observation time t (its last entry is the state at that time); `x0` is
    the state at the first observation time. `lineage[t]` records which
    particle slot the path occupied at time t.
    """

    x0: float
    steps: np.ndarray   # (T-1, D)
    lineage: np.ndarray  # (T,)

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=float)
        self.lineage = np.asarray(self.lineage, dtype=int)
        if not (np.isfinite(self.x0) and np.all(np.isfinite(self.steps))):
            raise NumericError("invariant path contains non-finite states")

    def obs_states(self):
        """Path states at the observation times, length T."""
        if self.steps.size == 0:
            return np.array([self.x0])
        return np.concatenate([[self.x0], self.steps[:, -1]])


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _stratified_parents(norm_weights, uniforms):
    n = uniforms.shape[-1]
    positions = (np.arange(n) + uniforms) / n
    return np.searchsorted(np.cumsum(norm_weights), positions).clip(0, norm_weights.size - 1)


def _multinomial_parents(norm_weights, uniforms):
    return np.searchsorted(np.cumsum(norm_weights), uniforms).clip(0, norm_weights.size - 1)


def resample(norm_weights, n, scheme, uniforms):
    """Draw `n` parent indices from normalised weights.

    Stratified inverts one uniform per stratum (n - 1 + u_n)/n through the
    weight CDF; multinomial inverts raw uniforms.
    """
    w = np.asarray(norm_weights, dtype=float)
    u = np.asarray(uniforms, dtype=float)
    if not np.any(w > 0.0):
        raise ParticleCollapseError("all particle weights are zero")
    if scheme == "stratified":
        return _stratified_parents(w, u[:n])
    if scheme == "multinomial":
        return _multinomial_parents(w, u[:n])
    raise ConfigurationError(f"unknown resampling scheme {scheme!r}")


def _resample_rows(W, uniforms, rows, scheme, parents):
    for b in rows:
        if scheme == "stratified":
            parents[b] = _stratified_parents(W[b], uniforms[b])
        else:
            parents[b] = _multinomial_parents(W[b], uniforms[b])


# ---------------------------------------------------------------------------
# Batched filter kernel
# ---------------------------------------------------------------------------


def _pf_batch(model, sigma, phi_X, eta, x0, times, Y, N, D, proposal,
              normals, uniforms, scheme="stratified", adaptive=True,
              record=False):
    """Run B independent filters that share one observation grid.

    eta: (B, re_dim); x0: (B,); Y: (B, T); normals: (B, T-1, D, N);
    uniforms: (B, T-1, N). Returns (loglik (B,), info dict). With
    `record=True` the info dict additionally carries per-step sub-paths,
    observation-time states and unnormalised log-weights for path sampling.
    """
    if proposal not in PROPOSALS:
        raise ConfigurationError(f"unknown proposal {proposal!r}")
    B, T = Y.shape
    ode = None
    if proposal == "rb" and T > 1:
        ode = solve_drift_ode_grid(model, phi_X, eta, times, substeps=D)

    x = np.broadcast_to(np.asarray(x0, dtype=float)[:, None], (B, N)).copy()
    with np.errstate(all="ignore"):
        loglik = model.obs_logdensity(Y[:, 0], x0, sigma).astype(float).copy()
    loglik = np.where(np.isnan(loglik), -np.inf, loglik)
    dead = ~np.isfinite(loglik)
    W = np.full((B, N), 1.0 / N)
    ancestry = np.empty((B, T, N), dtype=np.int32)
    ancestry[:, 0] = np.arange(N)

    info = {"ancestry": ancestry}
    if record:
        info["subpaths"] = np.empty((B, T - 1, N, D))
        info["obs_states"] = np.empty((B, T, N))
        info["obs_states"][:, 0] = x
        info["log_w"] = np.empty((B, T, N))
        info["log_w"][:, 0] = (loglik - np.log(N))[:, None]

    identity = np.arange(N, dtype=np.int32)
    for t in range(1, T):
        ess = 1.0 / np.sum(W * W, axis=1)
        do_rows = np.nonzero((ess < N / 2.0) if adaptive else np.ones(B, dtype=bool))[0]
        parents = np.broadcast_to(identity, (B, N)).copy()
        _resample_rows(W, uniforms[:, t - 1], do_rows, scheme, parents)
        ancestry[:, t] = parents
        x = np.take_along_axis(x, parents, axis=1)
        with np.errstate(divide="ignore"):
            log_W_hat = np.log(W)
        log_W_hat[do_rows] = -np.log(N)

        states, log_q, log_f, _ = propagate_interval(
            model, phi_X, eta, x, times[t - 1], times[t], D, proposal,
            normals[:, t - 1], sigma=sigma, y_end=Y[:, t:t + 1], ode=None if ode is None else ode[:, t - 1],
            want_density=proposal != "emd")
        x = states[:, -1]
        with np.errstate(all="ignore"):
            lg = model.obs_logdensity(Y[:, t:t + 1], x, sigma)
            incr = lg if proposal == "emd" else lg + log_f - log_q
            lw = log_W_hat + incr
        lw = np.where(np.isnan(lw), -np.inf, lw)
        step_ll = logsumexp_rows(lw)
        newly_dead = ~np.isfinite(step_ll) & ~dead
        loglik = np.where(dead, loglik, loglik + np.where(np.isfinite(step_ll), step_ll, 0.0))
        loglik[newly_dead] = -np.inf
        dead |= newly_dead
        W = np.where(dead[:, None], 1.0 / N, np.exp(lw - np.where(dead, 0.0, step_ll)[:, None]))
        if record:
            info["subpaths"][:, t - 1] = np.swapaxes(states, 1, 2)
            info["obs_states"][:, t] = x
            info["log_w"][:, t] = np.where(dead[:, None], -np.inf, lw)

    info["final_states"] = x
    info["final_W"] = W
    info["dead"] = dead
    return loglik, info


def _draw_block_randoms(gen, T, D, N):
    """Fixed-size random slices for one filter run, in a documented order."""
    normals = gen.standard_normal((T - 1, D, N)) if T > 1 else np.empty((0, D, N))
    uniforms = gen.random((T - 1, N)) if T > 1 else np.empty((0, N))
    return normals, uniforms


def run_pf(model, theta, eta_m, data_m, N, D, proposal="emd", stream=None,
           scheme="stratified", adaptive=True):
    """Particle filter for one subject.

    `theta` is a ParameterState (its eta field is ignored); `eta_m` the
    subject's random effects; `data_m` a Subject; `stream` a numpy
    Generator supplying every random draw. Returns (log_lik, ParticleCloud).
    """
    if N < 1:
        raise ConfigurationError("particle count N must be >= 1")
    if stream is None:
        stream = np.random.default_rng()
    times, Y = data_m.times, data_m.y[None, :]
    T = times.size
    eta2 = np.atleast_2d(np.asarray(eta_m, dtype=float))
    x0 = model.initial_state(theta.phi_X, eta2)
    normals, uniforms = _draw_block_randoms(stream, T, D, N)
    loglik, info = _pf_batch(model, theta.sigma, theta.phi_X, eta2, x0, times, Y,
                             N, D, proposal, normals[None], uniforms[None],
                             scheme=scheme, adaptive=adaptive, record=True)
    with np.errstate(divide="ignore"):
        log_w = np.log(info["final_W"][0])
    cloud = ParticleCloud(
        states=info["final_states"][0],
        log_weights=log_w,
        norm_weights=info["final_W"][0],
        ancestry=info["ancestry"][0],
        log_lik=float(loglik[0]),
        states_history=info["obs_states"][0],
    )
    return float(loglik[0]), cloud


def total_loglik(model, theta, eta_all, dataset, N, D, proposal="emd", store=None,
                 scheme="stratified", adaptive=True, blocks=None, prev_comps=None):
    """Per-subject likelihood estimates from each subject's own random block.

    Returns (total, per_subject). With `blocks` given, only those subjects
    are re-estimated and the rest are copied from `prev_comps`; this is
    exact (not an approximation) because subjects consume disjoint streams.
    """
    if store is None:
        raise ConfigurationError("total_loglik requires an RngBlockStore")
    M = dataset.M
    if store.n_blocks < M:
        raise ConfigurationError("store has fewer blocks than subjects")
    eta_all = np.atleast_2d(np.asarray(eta_all, dtype=float))
    comps = np.empty(M)
    todo = set(range(M)) if blocks is None else set(int(b) for b in blocks)
    if blocks is not None:
        if prev_comps is None:
            raise ConfigurationError("partial re-estimation needs prev_comps")
        comps[:] = prev_comps

    for times_arr, members in dataset.time_groups():
        members = [m for m in members if m in todo]
        if not members:
            continue
        B = len(members)
        T = times_arr.size
        Y = np.stack([dataset.subjects[m].y for m in members])
        eta = eta_all[members]
        x0 = model.initial_state(theta.phi_X, eta)
        normals = np.empty((B, max(T - 1, 0), D, N))
        uniforms = np.empty((B, max(T - 1, 0), N))
        for i, m in enumerate(members):
            gen = store.generator(m, "pf")
            normals[i], uniforms[i] = _draw_block_randoms(gen, T, D, N)
        ll, _ = _pf_batch(model, theta.sigma, theta.phi_X, eta, x0, times_arr, Y,
                          N, D, proposal, normals, uniforms, scheme=scheme,
                          adaptive=adaptive)
        comps[members] = ll
    return float(np.sum(comps)), comps


# ---------------------------------------------------------------------------
# Conditional particle filter + backward sampling
# ---------------------------------------------------------------------------


def _cpf_forward(model, sigma, phi_X, eta, x0, times, Y, Ncpf, D, proposal,
                 inv_steps, normals, uniforms, scheme):
    """Forward pass of B conditional filters; slot 0 carries the retained path."""
    B, T = Y.shape
    ode = None
    if proposal == "rb" and T > 1:
        ode = solve_drift_ode_grid(model, phi_X, eta, times, substeps=D)
    x = np.broadcast_to(np.asarray(x0, dtype=float)[:, None], (B, Ncpf)).copy()
    lg0 = model.obs_logdensity(Y[:, 0], x0, sigma)
    log_w = np.empty((B, T, Ncpf))
    log_w[:, 0] = (lg0 - np.log(Ncpf))[:, None]
    W = np.full((B, Ncpf), 1.0 / Ncpf)
    subpaths = np.empty((B, T - 1, Ncpf, D))
    obs_states = np.empty((B, T, Ncpf))
    obs_states[:, 0] = x
    parents_hist = np.empty((B, T, Ncpf), dtype=np.int32)
    parents_hist[:, 0] = np.arange(Ncpf)

    for t in range(1, T):
        parents = np.empty((B, Ncpf), dtype=np.int32)
        _resample_rows(W, uniforms[:, t - 1], range(B), scheme, parents)
        parents[:, 0] = 0  # retained slot never moves
        parents_hist[:, t] = parents
        x = np.take_along_axis(x, parents, axis=1)

        bridged = proposal != "emd"
        states, log_q, log_f, _ = propagate_interval(
            model, phi_X, eta, x, times[t - 1], times[t], D, proposal,
            normals[:, t - 1], sigma=sigma, y_end=Y[:, t:t + 1],
            ode=None if ode is None else ode[:, t - 1],
            given_slot0=inv_steps[:, t - 1], want_density=bridged)
        x = states[:, -1]
        with np.errstate(all="ignore"):
            lg = model.obs_logdensity(Y[:, t:t + 1], x, sigma)
            if bridged:
                incr = lg + log_f - log_q
            else:
                incr = lg  # q = f cancels for every slot, the retained one included
            lw = incr - np.log(Ncpf)
        lw = np.where(np.isnan(lw), -np.inf, lw)
        log_w[:, t] = lw
        norm = logsumexp_rows(lw)
        if not np.all(np.isfinite(norm)):
            raise ParticleCollapseError("conditional filter lost all weight")
        W = np.exp(lw - norm[:, None])
        subpaths[:, t - 1] = np.swapaxes(states, 1, 2)
        obs_states[:, t] = x
    return {"log_w": log_w, "W": W, "subpaths": subpaths,
            "obs_states": obs_states, "parents": parents_hist}


def _categorical_rows(log_w, uniforms):
    """One categorical draw per row from unnormalised log-weights."""
    W = np.exp(log_w - logsumexp_rows(log_w)[:, None])
    cdf = np.cumsum(W, axis=1)
    idx = np.empty(W.shape[0], dtype=np.int32)
    for b in range(W.shape[0]):
        idx[b] = np.searchsorted(cdf[b], uniforms[b] * cdf[b, -1])
    return np.clip(idx, 0, W.shape[1] - 1)


def _backward_sample(model, phi_X, eta, times, D, fwd, uniforms):
    """Backward-sample one lineage per batch row.

    Backward weights at time t are w_t^(n) times the Euler-Maruyama density
    of the selected time-(t+1) sub-path started from particle n; sub-path
    factors beyond the first are shared by all n and cancel after
    normalisation, so only the first sub-step density is evaluated.
    """
    log_w = fwd["log_w"]
    subpaths = fwd["subpaths"]
    obs_states = fwd["obs_states"]
    B, T, Ncpf = log_w.shape
    lineage = np.empty((B, T), dtype=np.int32)
    lineage[:, T - 1] = _categorical_rows(log_w[:, T - 1], uniforms[:, T - 1])
    for t in range(T - 2, -1, -1):
        dtau = (times[t + 1] - times[t]) / D
        sel = subpaths[np.arange(B), t, lineage[:, t + 1], 0]  # first sub-step state
        x_t = obs_states[:, t]  # (B, Ncpf)
        mu, v = model.drift_and_diffusion_sq(x_t, phi_X, eta)
        lf1 = normal_logpdf(sel[:, None], x_t + mu * dtau, v * dtau)
        bw = log_w[:, t] + lf1
        lineage[:, t] = _categorical_rows(bw, uniforms[:, t])
    return lineage


def _assemble_paths(fwd, lineage, x0):
    B, T, _ = fwd["log_w"].shape
    paths = []
    for b in range(B):
        steps = np.stack([fwd["subpaths"][b, t - 1, lineage[b, t]] for t in range(1, T)]) \
            if T > 1 else np.empty((0, fwd["subpaths"].shape[-1]))
        paths.append(InvariantPath(x0=float(x0[b]), steps=steps, lineage=lineage[b]))
    return paths


def _cpf_batch(model, sigma, phi_X, eta, x0, times, Y, N, D, proposal,
               invariants, normals, uniforms, bw_uniforms, scheme):
    Ncpf = N if N > 1 else N + 1  # extra slot to host the retained path
    T = times.size
    if T == 1:
        return [InvariantPath(float(x0[b]), np.empty((0, D)), np.zeros(1, dtype=int))
                for b in range(len(invariants))], None
    inv_steps = np.stack([p.steps for p in invariants])
    fwd = _cpf_forward(model, sigma, phi_X, eta, x0, times, Y, Ncpf, D, proposal,
                       inv_steps, normals, uniforms, scheme)
    lineage = _backward_sample(model, phi_X, eta, times, D, fwd, bw_uniforms)
    # Patch the recorded ancestry so the sampled lineage is ancestral:
    # A_{t-1}^{B_t} = B_{t-1}.
    parents = fwd["parents"]
    B = parents.shape[0]
    for t in range(1, parents.shape[1]):
        parents[np.arange(B), t, lineage[:, t]] = lineage[:, t - 1]
    paths = _assemble_paths(fwd, lineage, x0)
    return paths, fwd


def run_cpf(model, theta, eta_m, data_m, N, D, invariant, stream,
            proposal="emd", scheme="stratified"):
    """Conditional particle filter plus backward sampling for one subject.

    Holds `invariant` fixed in slot 0, runs the remaining particles under
    the chosen proposal with resampling at every step, and returns a new
    invariant path drawn by backward sampling. With N == 1 an extra slot is
    added so the retained path always has competition.
    """
    times, Y = data_m.times, data_m.y[None, :]
    T = times.size
    eta2 = np.atleast_2d(np.asarray(eta_m, dtype=float))
    x0 = model.initial_state(theta.phi_X, eta2)
    Ncpf = N if N > 1 else N + 1
    normals = stream.standard_normal((1, max(T - 1, 0), D, Ncpf))
    uniforms = stream.random((1, max(T - 1, 0), Ncpf))
    bw_uniforms = stream.random((1, T))
    paths, _ = _cpf_batch(model, theta.sigma, theta.phi_X, eta2, x0, times, Y, N, D,
                          proposal, [invariant], normals, uniforms, bw_uniforms, scheme)
    return paths[0]


def refresh_invariant_paths(model, theta, eta_all, dataset, N, D, proposal, store,
                            counter, paths, scheme="stratified"):
    """Draw new invariant paths for all subjects (batched over time groups).

    `counter` keys the conditional-filter streams so successive refreshes
    use fresh randomness without disturbing the particle-filter lanes.
    """
    eta_all = np.atleast_2d(np.asarray(eta_all, dtype=float))
    out = list(paths)
    Ncpf = N if N > 1 else N + 1
    for times_arr, members in dataset.time_groups():
        B = len(members)
        T = times_arr.size
        Y = np.stack([dataset.subjects[m].y for m in members])
        eta = eta_all[members]
        x0 = model.initial_state(theta.phi_X, eta)
        normals = np.empty((B, max(T - 1, 0), D, Ncpf))
        uniforms = np.empty((B, max(T - 1, 0), Ncpf))
        bw_uniforms = np.empty((B, T))
        for i, m in enumerate(members):
            gen = store.generator(m, "cpf", counter)
            normals[i] = gen.standard_normal((max(T - 1, 0), D, Ncpf))
            uniforms[i] = gen.random((max(T - 1, 0), Ncpf))
            bw_uniforms[i] = gen.random(T)
        new_paths, _ = _cpf_batch(model, theta.sigma, theta.phi_X, eta, x0, times_arr,
                                  Y, N, D, proposal, [paths[m] for m in members],
                                  normals, uniforms, bw_uniforms, scheme)
        for i, m in enumerate(members):
            out[m] = new_paths[i]
    return out


def initial_invariant_paths(model, theta, eta_all, dataset, D, store):
    """Unconditional Euler-Maruyama paths used to start the path-refresh cycle."""
    eta_all = np.atleast_2d(np.asarray(eta_all, dtype=float))
    paths = []
    for m, subj in enumerate(dataset.subjects):
        gen = store.generator(m, "cpf", 0)
        T = subj.times.size
        eta2 = eta_all[m][None, :]
        x0 = model.initial_state(theta.phi_X, eta2)
        z = gen.standard_normal((1, max(T - 1, 0), D, 1))
        steps = np.empty((max(T - 1, 0), D))
        x = x0[:, None]
        for t in range(1, T):
            states, _, _, _ = propagate_interval(
                model, theta.phi_X, eta2, x, subj.times[t - 1], subj.times[t], D,
                "emd", z[:, t - 1], want_density=False)
            steps[t - 1] = states[0, :, 0]
            x = states[:, -1]
        paths.append(InvariantPath(x0=float(x0[0]), steps=steps,
                                   lineage=np.zeros(T, dtype=int)))
    return paths
