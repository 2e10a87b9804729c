"""Sub-path proposals between consecutive observation times.

Three mechanisms move particles across an observation interval, each
discretised on D sub-steps of length delta_tau:

* ``emd``  -- plain Euler-Maruyama: locally constant drift/diffusion, so
  x_{k+1} ~ N(x_k + mu_k dtau, v_k dtau).
* ``mdb``  -- modified diffusion bridge: each sub-step is conditioned on
  the noisy observation y at the end of the interval. With
  dlt_k = t1 - tau_k (time left to the observation),

      mean rate   m = (mu_k sigma^2 + v_k (y - x_k)) / (v_k dlt_k + sigma^2)
      variance    s2 = (v_k sigma^2 + v_k^2 (dlt_k - dtau)) / (v_k dlt_k + sigma^2)

  and x_{k+1} ~ N(x_k + m dtau, s2 dtau).
* ``rb``   -- residual bridge: the bridge is built on the residual around
  the deterministic drift-ODE path, which keeps the effective drift nearly
  constant when the model drift is state-dependent. With ODE values
  ode_k at the knots, ode_J at the interval end, residual r = x_k - ode_k
  and ODE slope d_k = (ode_{k+1} - ode_k)/dtau,

      m = mu_k + v_k (y - (ode_J + r + (mu_k - d_k) dlt_k)) / (v_k dlt_k + sigma^2)

  with the same variance as the MDB.

Every propagator reports the proposal log-density ``log_q`` and the
Euler-Maruyama target density ``log_f`` of the realised states; importance
weights use ``log_f - log_q`` (identically zero for ``emd``).

The noiseless final sub-step (sigma = 0, dlt_k = dtau) is a Dirac mass at
the observation: the state is set to y exactly and contributes zero to
``log_q``.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError
from .util import LOG_2PI

__all__ = ["TimeGrid", "SubPath", "euler_propagate", "mdb_propagate", "rb_propagate",
           "PROPOSALS", "propagate_interval"]

PROPOSALS = ("emd", "mdb", "rb")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform sub-grid of one observation interval [t0, t1] with D sub-steps."""

    t0: float
    t1: float
    D: int

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ConfigurationError("TimeGrid requires t1 > t0")
        if self.D < 1:
            raise ConfigurationError("TimeGrid requires D >= 1")

    @property
    def delta_tau(self):
        return (self.t1 - self.t0) / self.D

    @property
    def knots(self):
        return np.linspace(self.t0, self.t1, self.D + 1)


@dataclass
class SubPath:
    """States at the interior knots plus proposal/target log-densities."""

    states: np.ndarray
    log_q: np.ndarray
    log_f: np.ndarray


def _proposal_moments(proposal, x, mu, v, sigma, y_end, dlt_k, dtau, ode_k, ode_k1, ode_end):
    """Per-sub-step mean rate and variance rate of the chosen proposal."""
    if proposal == "emd":
        return mu, v
    sig2 = sigma * sigma
    denom = v * dlt_k + sig2
    s2 = (v * sig2 + v * v * (dlt_k - dtau)) / denom
    if proposal == "mdb":
        m = (mu * sig2 + v * (y_end - x)) / denom
        return m, s2
    if proposal == "rb":
        r = x - ode_k
        slope = (ode_k1 - ode_k) / dtau
        m = mu + v * (y_end - (ode_end + r + (mu - slope) * dlt_k)) / denom
        return m, s2
    raise ConfigurationError(f"unknown proposal {proposal!r}; expected one of {PROPOSALS}")


def propagate_interval(model, phi_X, eta, x, t0, t1, D, proposal, z,
                       sigma=None, y_end=None, ode=None, given=None,
                       given_slot0=None, want_density=True):
    """Batched sub-path propagation across one observation interval.

    Parameters
    ----------
    x : (B, N) start states; eta : (B, re_dim); z : (B, D, N) standard
    normals. For bridged proposals `sigma` and `y_end` (shape (B, 1)) are
    required; `rb` additionally needs `ode`, the drift-ODE values at the
    D + 1 knots, shape (B, D + 1). When `given` (B, D, N) is supplied those
    states are scored instead of sampled (used to re-weight a retained path
    and by density tests); `given_slot0` (B, D) pins particle slot 0 to a
    retained path while the other slots are sampled.

    Returns
    -------
    states : (B, D, N), log_q, log_f : (B, N), bad : (B, N) bool mask of
    particles that hit a non-finite value (their densities are -inf).
    """
    x = np.asarray(x, dtype=float)
    B, N = x.shape
    dtau = (t1 - t0) / D
    states = np.empty((B, D, N))
    log_q = np.zeros((B, N))
    log_f = np.zeros((B, N))
    bad = np.zeros((B, N), dtype=bool)
    bridged = proposal != "emd"
    dirac_last = bridged and sigma == 0.0
    half_log_2pi_dtau = 0.5 * (LOG_2PI + np.log(dtau))

    old_err = np.seterr(all="ignore")
    try:
        for k in range(D):
            dlt_k = t1 - (t0 + k * dtau)
            mu, v = model.drift_and_diffusion_sq(x, phi_X, eta)
            if bridged:
                ode_k = ode[:, k:k + 1] if ode is not None else None
                ode_k1 = ode[:, k + 1:k + 2] if ode is not None else None
                ode_end = ode[:, -1:] if ode is not None else None
                m, s2 = _proposal_moments(proposal, x, mu, v, sigma, y_end, dlt_k,
                                          dtau, ode_k, ode_k1, ode_end)
            else:
                m, s2 = mu, v
            dirac_step = dirac_last and k == D - 1
            if given is not None:
                x_new = np.array(given[:, k], dtype=float)
            elif dirac_step:
                x_new = np.broadcast_to(y_end, (B, N)).copy()
            else:
                x_new = x + m * dtau + np.sqrt(s2 * dtau) * z[:, k]
                if given_slot0 is not None:
                    x_new[:, 0] = given_slot0[:, k]
            if want_density:
                if bridged and not dirac_step:
                    dq = x_new - (x + m * dtau)
                    log_q += -half_log_2pi_dtau - 0.5 * np.log(s2) - dq * dq / (2.0 * s2 * dtau)
                df = x_new - (x + mu * dtau)
                log_f += -half_log_2pi_dtau - 0.5 * np.log(v) - df * df / (2.0 * v * dtau)
            step_bad = ~np.isfinite(x_new)
            if np.any(step_bad):
                bad |= step_bad
                x_new = np.where(step_bad, 0.0, x_new)
            states[:, k] = x_new
            x = x_new
    finally:
        np.seterr(**old_err)

    if want_density and not bridged:
        log_q = log_f.copy()
    if np.any(bad):
        log_q = np.where(bad, -np.inf, log_q)
        log_f = np.where(bad, -np.inf, log_f)
    return states, log_q, log_f, bad


def _normalise_inputs(x_start, z, eta, D):
    x = np.asarray(x_start, dtype=float)
    z = np.asarray(z, dtype=float)
    mode = x.ndim  # 0: scalar path, 1: N particles, 2: full batch
    if mode == 0:
        x = x.reshape(1, 1)
        z = z.reshape(1, D, 1)
    elif mode == 1:
        x = x[None, :]
        z = z.reshape(1, D, -1)
    eta2 = np.atleast_2d(np.asarray(eta, dtype=float))
    return x, z, eta2, mode


def _make_subpath(states, log_q, log_f, mode):
    if mode == 0:
        return SubPath(states[0, :, 0], float(log_q[0, 0]), float(log_f[0, 0]))
    if mode == 1:
        return SubPath(states[0], log_q[0], log_f[0])
    return SubPath(states, log_q, log_f)


def euler_propagate(model, phi_X, eta, x_start, grid, z, states=None):
    """Euler-Maruyama sub-path from `x_start`; log_q equals log_f exactly."""
    x, z2, eta2, mode = _normalise_inputs(x_start, z, eta, grid.D)
    given = None if states is None else np.asarray(states, dtype=float).reshape(x.shape[0], grid.D, -1)
    s, lq, lf, _ = propagate_interval(model, phi_X, eta2, x, grid.t0, grid.t1, grid.D,
                                      "emd", z2, given=given)
    return _make_subpath(s, lq, lf, mode)


def mdb_propagate(model, phi_X, eta, x_start, grid, y_end, sigma, z, states=None):
    """Bridge sub-path steered toward the observation at the interval end."""
    x, z2, eta2, mode = _normalise_inputs(x_start, z, eta, grid.D)
    y = np.broadcast_to(np.asarray(y_end, dtype=float), (x.shape[0],)).reshape(-1, 1)
    given = None if states is None else np.asarray(states, dtype=float).reshape(x.shape[0], grid.D, -1)
    s, lq, lf, _ = propagate_interval(model, phi_X, eta2, x, grid.t0, grid.t1, grid.D,
                                      "mdb", z2, sigma=float(sigma), y_end=y, given=given)
    return _make_subpath(s, lq, lf, mode)


def rb_propagate(model, phi_X, eta, x_start, grid, y_end, sigma, ode_path, z, states=None):
    """Residual bridge: MDB applied to the residual around the drift-ODE path.

    `ode_path` holds the ODE states at the D + 1 grid knots.
    """
    x, z2, eta2, mode = _normalise_inputs(x_start, z, eta, grid.D)
    y = np.broadcast_to(np.asarray(y_end, dtype=float), (x.shape[0],)).reshape(-1, 1)
    ode = np.asarray(ode_path, dtype=float).reshape(x.shape[0], grid.D + 1)
    given = None if states is None else np.asarray(states, dtype=float).reshape(x.shape[0], grid.D, -1)
    s, lq, lf, _ = propagate_interval(model, phi_X, eta2, x, grid.t0, grid.t1, grid.D,
                                      "rb", z2, sigma=float(sigma), y_end=y, ode=ode, given=given)
    return _make_subpath(s, lq, lf, mode)
