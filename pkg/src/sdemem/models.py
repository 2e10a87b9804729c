"""SDE mixed-effects model definitions.

A model couples a one-dimensional Ito diffusion per subject with
subject-level random effects and additive Gaussian measurement error:

    dX_t = mu(X_t, phi_X, eta_m) dt + sqrt(v(X_t, phi_X, eta_m)) dB_t
    y_t | x_t ~ Normal(x_t, sigma^2)
    eta_m ~ P(. | phi_eta)

Two built-in models are provided:

* ``constant`` -- drift beta_m, squared diffusion gamma^2, known initial
  state x0; the transition density is Gaussian and exactly known, which
  makes this model the analytic oracle for the particle machinery.
* ``tumour`` -- log-volume growth with drift
  beta_m + (gamma^2/2) (1 - exp(2 (rho - 1) x)) and squared diffusion
  gamma^2 exp(2 (rho - 1) x); intractable for rho != 1 and reducing to the
  constant model at rho = 1.

Array conventions: drift/diffusion functions take a state array ``x`` of
shape ``(B, N)`` (or anything the per-effect columns of ``eta`` broadcast
against), fixed parameters ``phi_X`` as a 1-d array shared across the
batch, and random effects ``eta`` of shape ``(B, re_dim)`` (or
``(re_dim,)``). Returned arrays broadcast against ``x``.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import ConfigurationError, NumericError
from .util import LOG_2PI, ndtri, normal_logpdf

__all__ = [
    "NormalPrior",
    "HalfNormalPrior",
    "ParamDef",
    "ParamLayout",
    "ModelSpec",
    "ParameterState",
    "Subject",
    "Dataset",
    "builtin_model",
    "exact_transition_constant",
    "solve_drift_ode",
    "solve_drift_ode_grid",
    "gaussian_obs_logdensity",
]

# Overflow guard for the state-dependent diffusion exponent.
_EXP_CLAMP = 700.0


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalPrior:
    mu: float
    sd: float

    def logpdf(self, x):
        return normal_logpdf(x, self.mu, self.sd * self.sd)

    def dlogpdf(self, x):
        return -(x - self.mu) / (self.sd * self.sd)

    def sample(self, rng):
        return self.mu + self.sd * rng.standard_normal()


@dataclass(frozen=True)
class HalfNormalPrior:
    """Half-normal with mean zero and scale ``s``: density 2 N(x; 0, s^2) on x >= 0."""

    scale: float

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        s2 = self.scale * self.scale
        out = np.log(2.0) - 0.5 * (LOG_2PI + np.log(s2)) - 0.5 * x * x / s2
        return np.where(x >= 0.0, out, -np.inf)

    def dlogpdf(self, x):
        return -x / (self.scale * self.scale)

    def sample(self, rng):
        return abs(self.scale * rng.standard_normal())


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

_BLOCKS = ("sigma", "phi_X", "phi_eta")
_TRANSFORMS = ("identity", "log")


@dataclass(frozen=True)
class ParamDef:
    name: str
    block: str
    transform: str
    prior: object

    def __post_init__(self):
        if self.block not in _BLOCKS:
            raise ConfigurationError(f"unknown parameter block {self.block!r}")
        if self.transform not in _TRANSFORMS:
            raise ConfigurationError(f"unknown transform {self.transform!r}")


class ParamLayout:
    """Ordered static-parameter metadata: names, blocks, transforms, priors.

    The canonical vector order is sigma first, then the phi_X entries, then
    the phi_eta entries; trace files use this order.
    """

    def __init__(self, params):
        self.params = tuple(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate parameter names in layout")
        self.names = tuple(names)
        self.is_log = np.array([p.transform == "log" for p in self.params])
        self._block_idx = {
            b: np.array([i for i, p in enumerate(self.params) if p.block == b], dtype=int)
            for b in _BLOCKS
        }
        if len(self._block_idx["sigma"]) != 1:
            raise ConfigurationError("layout must contain exactly one sigma parameter")

    def __len__(self):
        return len(self.params)

    def indices(self, block):
        return self._block_idx[block]

    def pack(self, sigma, phi_X, phi_eta):
        theta = np.empty(len(self.params))
        theta[self._block_idx["sigma"][0]] = sigma
        theta[self._block_idx["phi_X"]] = phi_X
        theta[self._block_idx["phi_eta"]] = phi_eta
        return theta

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (len(self.params),):
            raise ConfigurationError(
                f"theta has length {theta.shape}, layout expects {len(self.params)}"
            )
        sigma = float(theta[self._block_idx["sigma"][0]])
        phi_X = theta[self._block_idx["phi_X"]].copy()
        phi_eta = theta[self._block_idx["phi_eta"]].copy()
        return sigma, phi_X, phi_eta

    # transformed (unconstrained) scale -----------------------------------

    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        psi = theta.copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            psi[self.is_log] = np.log(theta[self.is_log])
        return psi

    def to_natural(self, psi):
        psi = np.asarray(psi, dtype=float)
        theta = psi.copy()
        theta[self.is_log] = np.exp(psi[self.is_log])
        return theta

    def log_jacobian(self, psi):
        """log |d theta / d psi| for the exp transform of log-tagged entries."""
        return float(np.sum(np.asarray(psi)[self.is_log]))

    # priors ---------------------------------------------------------------

    def log_prior(self, theta, indices=None):
        theta = np.asarray(theta, dtype=float)
        idx = range(len(self.params)) if indices is None else indices
        total = 0.0
        for i in idx:
            total += float(self.params[i].prior.logpdf(theta[i]))
        return total

    def sample_prior(self, rng):
        return np.array([p.prior.sample(rng) for p in self.params])


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """One SDE mixed-effects model: dynamics, observation law and priors.

    Random-effect priors of the built-in models are independent Gaussians
    per effect; ``phi_eta`` is laid out as interleaved (mean, sd) pairs in
    effect order, which `re_prior_moments` unpacks. Instances are immutable
    and safe to share between threads.
    """

    name: str
    re_dim: int
    drift: Callable
    diffusion_sq: Callable
    drift_and_diffusion_sq: Callable
    obs_logdensity: Callable
    re_logprior: Callable
    re_sample: Callable
    initial_state: Callable
    param_layout: ParamLayout
    re_names: tuple = ()

    def __post_init__(self):
        if self.re_dim < 1:
            raise ConfigurationError("re_dim must be >= 1")
        n_eta = len(self.param_layout.indices("phi_eta"))
        if n_eta != 2 * self.re_dim:
            raise ConfigurationError(
                "phi_eta must hold one (mean, sd) pair per random effect"
            )

    def re_prior_moments(self, phi_eta):
        """Per-effect prior means and standard deviations from phi_eta."""
        phi_eta = np.asarray(phi_eta, dtype=float)
        return phi_eta[0::2], phi_eta[1::2]


def gaussian_obs_logdensity(y, x, sigma):
    return normal_logpdf(y, x, sigma * sigma)


def _gaussian_re_logprior(eta, phi_eta):
    eta = np.asarray(eta, dtype=float)
    phi_eta = np.asarray(phi_eta, dtype=float)
    means, sds = phi_eta[0::2], phi_eta[1::2]
    if np.any(sds <= 0.0):
        return np.full(eta.shape[:-1], -np.inf)
    return np.sum(normal_logpdf(eta, means, sds * sds), axis=-1)


def _gaussian_re_sample(phi_eta, uniforms):
    phi_eta = np.asarray(phi_eta, dtype=float)
    u = np.clip(np.asarray(uniforms, dtype=float), 1e-15, 1.0 - 1e-15)
    means, sds = phi_eta[0::2], phi_eta[1::2]
    return means + sds * ndtri(u)


# --- constant drift / constant diffusion ----------------------------------


def _const_drift(x, phi_X, eta):
    return np.exp(np.asarray(eta)[..., 0:1])


def _const_diffusion_sq(x, phi_X, eta):
    g = phi_X[0]
    return g * g


def _const_both(x, phi_X, eta):
    return _const_drift(x, phi_X, eta), _const_diffusion_sq(x, phi_X, eta)


def _const_initial_state(phi_X, eta):
    eta = np.asarray(eta)
    return np.broadcast_to(np.asarray(phi_X)[1], eta.shape[:-1]).astype(float)


# --- tumour growth (log volume) --------------------------------------------


def _tumour_both(x, phi_X, eta):
    gamma, rho = phi_X[0], phi_X[1]
    eta = np.asarray(eta)
    beta = np.exp(eta[..., 1:2])
    expo = 2.0 * (rho - 1.0) * np.asarray(x, dtype=float)
    expo = np.maximum(np.minimum(expo, _EXP_CLAMP), -_EXP_CLAMP)
    e = np.exp(expo)
    mu = beta + 0.5 * gamma * gamma * (1.0 - e)
    v = gamma * gamma * e
    return mu, v


def _tumour_drift(x, phi_X, eta):
    return _tumour_both(x, phi_X, eta)[0]


def _tumour_diffusion_sq(x, phi_X, eta):
    return _tumour_both(x, phi_X, eta)[1]


def _tumour_initial_state(phi_X, eta):
    return np.asarray(eta, dtype=float)[..., 0]


def builtin_model(name):
    """Return one of the built-in models: ``constant`` or ``tumour``."""
    if name == "constant":
        layout = ParamLayout(
            [
                ParamDef("sigma", "sigma", "log", HalfNormalPrior(5.0)),
                ParamDef("gamma", "phi_X", "log", HalfNormalPrior(5.0)),
                ParamDef("x0", "phi_X", "identity", NormalPrior(3.0, 4.0)),
                ParamDef("mu_beta", "phi_eta", "identity", NormalPrior(0.0, 4.0)),
                ParamDef("sigma_beta", "phi_eta", "log", HalfNormalPrior(5.0)),
            ]
        )
        return ModelSpec(
            name="constant",
            re_dim=1,
            drift=_const_drift,
            diffusion_sq=_const_diffusion_sq,
            drift_and_diffusion_sq=_const_both,
            obs_logdensity=gaussian_obs_logdensity,
            re_logprior=_gaussian_re_logprior,
            re_sample=_gaussian_re_sample,
            initial_state=_const_initial_state,
            param_layout=layout,
            re_names=("log_beta",),
        )
    if name == "tumour":
        layout = ParamLayout(
            [
                ParamDef("sigma", "sigma", "log", HalfNormalPrior(5.0)),
                ParamDef("gamma", "phi_X", "log", HalfNormalPrior(5.0)),
                ParamDef("rho", "phi_X", "identity", NormalPrior(1.0, 0.5)),
                ParamDef("mu_X0", "phi_eta", "identity", NormalPrior(3.0, 4.0)),
                ParamDef("sigma_X0", "phi_eta", "log", HalfNormalPrior(5.0)),
                ParamDef("mu_beta", "phi_eta", "identity", NormalPrior(0.0, 4.0)),
                ParamDef("sigma_beta", "phi_eta", "log", HalfNormalPrior(5.0)),
            ]
        )
        return ModelSpec(
            name="tumour",
            re_dim=2,
            drift=_tumour_drift,
            diffusion_sq=_tumour_diffusion_sq,
            drift_and_diffusion_sq=_tumour_both,
            obs_logdensity=gaussian_obs_logdensity,
            re_logprior=_gaussian_re_logprior,
            re_sample=_gaussian_re_sample,
            initial_state=_tumour_initial_state,
            param_layout=layout,
            re_names=("x0", "log_beta"),
        )
    raise ConfigurationError(f"unknown model {name!r}; expected 'constant' or 'tumour'")


# ---------------------------------------------------------------------------
# Parameter state and data containers
# ---------------------------------------------------------------------------


@dataclass
class ParameterState:
    """Static parameters plus the per-subject random-effect matrix."""

    sigma: float
    phi_X: np.ndarray
    phi_eta: np.ndarray
    eta: np.ndarray  # (M, re_dim)

    def __post_init__(self):
        self.phi_X = np.asarray(self.phi_X, dtype=float)
        self.phi_eta = np.asarray(self.phi_eta, dtype=float)
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=float))

    def theta(self, layout):
        return layout.pack(self.sigma, self.phi_X, self.phi_eta)

    @classmethod
    def from_theta(cls, layout, theta, eta):
        sigma, phi_X, phi_eta = layout.unpack(theta)
        return cls(sigma=sigma, phi_X=phi_X, phi_eta=phi_eta, eta=eta)

    def validate(self, layout, n_subjects=None):
        theta = self.theta(layout)
        bad = np.asarray(theta)[layout.is_log] <= 0.0
        if np.any(bad):
            names = [n for n, b in zip(np.array(layout.names)[layout.is_log], bad) if b]
            raise ConfigurationError(f"log-scale parameters must be positive: {names}")
        if n_subjects is not None and self.eta.shape[0] != n_subjects:
            raise ConfigurationError(
                f"eta has {self.eta.shape[0]} rows for {n_subjects} subjects"
            )

    def copy(self):
        return ParameterState(self.sigma, self.phi_X.copy(), self.phi_eta.copy(), self.eta.copy())


@dataclass(frozen=True)
class Subject:
    subject_id: str
    times: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if self.times.ndim != 1 or self.times.shape != self.y.shape:
            raise ConfigurationError(
                f"subject {self.subject_id!r}: times and observations must be "
                "1-d sequences of equal length"
            )
        if self.times.size < 1:
            raise ConfigurationError(f"subject {self.subject_id!r}: needs >= 1 observation")
        if np.any(np.diff(self.times) <= 0.0):
            raise ConfigurationError(
                f"subject {self.subject_id!r}: times must be strictly increasing"
            )


@dataclass
class Dataset:
    subjects: list
    scaled: bool = False

    @property
    def M(self):
        return len(self.subjects)

    def __post_init__(self):
        if not self.subjects:
            raise ConfigurationError("dataset has no subjects")

    def max_time(self):
        return max(float(s.times[-1]) for s in self.subjects)

    def time_groups(self):
        """Group subject indices by identical observation-time vectors.

        Batched filtering requires a shared time grid; heterogeneous data is
        handled one group at a time.
        """
        groups = {}
        for m, s in enumerate(self.subjects):
            groups.setdefault(tuple(s.times), []).append(m)
        return [(np.array(k), idx) for k, idx in groups.items()]


def scale_times(dataset):
    """Divide all observation times by the global maximum time.

    Used before inference so that every dataset lives on a comparable time
    axis; a dataset already marked as scaled is returned unchanged.
    """
    if dataset.scaled:
        return dataset
    t_max = dataset.max_time()
    denom = t_max if t_max > 0.0 else 1.0
    subjects = [Subject(s.subject_id, s.times / denom, s.y.copy()) for s in dataset.subjects]
    return Dataset(subjects=subjects, scaled=True)


# ---------------------------------------------------------------------------
# Analytic transition (oracle) and the drift ODE
# ---------------------------------------------------------------------------


def exact_transition_constant(x, beta, gamma, dt):
    """Exact Gaussian transition of the constant model: used only as an oracle."""
    if gamma <= 0.0:
        raise ConfigurationError("gamma must be positive")
    if dt <= 0.0:
        raise ConfigurationError("dt must be positive")
    return x + beta * dt, gamma * gamma * dt


def _rk4_path(model, phi_X, eta2, x, t0, t1, substeps, record=None):
    """Advance the drift ODE from t0 to t1 with `substeps` RK4 steps.

    `x` is a (B, 1) column; `record`, when given, receives the state after
    each step.
    """
    h = (t1 - t0) / substeps
    with np.errstate(all="ignore"):
        for k in range(substeps):
            k1 = model.drift(x, phi_X, eta2)
            k2 = model.drift(x + 0.5 * h * k1, phi_X, eta2)
            k3 = model.drift(x + 0.5 * h * k2, phi_X, eta2)
            k4 = model.drift(x + h * k3, phi_X, eta2)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise NumericError("drift ODE diverged", time=t0 + (k + 1) * h)
            if record is not None:
                record[:, k] = x[:, 0]
    return x


def solve_drift_ode(model, phi_X, eta, times, substeps=10):
    """Deterministic drift path at the given times (RK4 on a sub-grid).

    `eta` may be a single effect vector or a (B, re_dim) batch; the result
    is (T,) or (B, T) accordingly. The initial state comes from the model
    (random effects for the tumour model, phi_X for the constant one).
    """
    times = np.asarray(times, dtype=float)
    eta_arr = np.asarray(eta, dtype=float)
    single = eta_arr.ndim == 1
    eta2 = np.atleast_2d(eta_arr)
    B = eta2.shape[0]
    x = model.initial_state(phi_X, eta2).reshape(B, 1).astype(float).copy()
    out = np.empty((B, times.size))
    out[:, 0] = x[:, 0]
    for i in range(times.size - 1):
        x = _rk4_path(model, phi_X, eta2, x, times[i], times[i + 1], substeps)
        out[:, i + 1] = x[:, 0]
    return out[0] if single else out


def solve_drift_ode_grid(model, phi_X, eta, times, substeps=10):
    """Drift path recorded at every sub-grid knot.

    Returns (B, T-1, substeps+1): entry [..., i, k] is the ODE state at
    knot k of interval i (knot 0 repeats the interval's starting state),
    as required by the residual-bridge proposal.
    """
    times = np.asarray(times, dtype=float)
    eta2 = np.atleast_2d(np.asarray(eta, dtype=float))
    B = eta2.shape[0]
    x = model.initial_state(phi_X, eta2).reshape(B, 1).astype(float).copy()
    out = np.empty((B, times.size - 1, substeps + 1))
    for i in range(times.size - 1):
        out[:, i, 0] = x[:, 0]
        x = _rk4_path(model, phi_X, eta2, x, times[i], times[i + 1], substeps,
                      record=out[:, i, 1:])
    return out
