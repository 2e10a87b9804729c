"""Synthetic-data generation.

Datasets mimic the benchmark design: M subjects observed every H hours for
a number of days (1 + floor(24 * days / H) observations each, starting at
time zero). Observation times are written in raw hours; the latent paths
are simulated on the max-scaled time axis (times divided by the final
hour), which is the axis inference runs on, so the generating parameters
and the inferential parameters coincide.
"""

import numpy as np

from .exceptions import ConfigurationError
from .filtering import propagate_interval
from .models import Dataset, Subject

__all__ = ["simulate_dataset", "observation_count"]


def observation_count(H, days):
    return 1 + int(np.floor(24.0 * days / H))


def simulate_dataset(model, theta_state, M, H, days, seed, D=10,
                     return_latent=False):
    """Simulate a dataset; returns (raw-time dataset, eta matrix used).

    Random effects are drawn from their priors under `theta_state`; latent
    paths use the Euler-Maruyama scheme with D sub-steps per observation
    interval; observations add Normal(0, sigma^2) noise. With
    `return_latent` the (M, T) latent matrix at the observation times is
    appended to the return tuple.
    """
    if days < 1:
        raise ConfigurationError("days must be >= 1")
    if M < 1:
        raise ConfigurationError("subject count must be >= 1")
    if theta_state.sigma < 0.0:
        raise ConfigurationError("sigma must be non-negative")
    gamma = float(theta_state.phi_X[0])
    if gamma <= 0.0:
        raise ConfigurationError("gamma must be positive")

    T = observation_count(H, days)
    hours = np.arange(T, dtype=float) * H
    scaled = hours / hours[-1] if hours[-1] > 0 else hours
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x51D]))

    eta = model.re_sample(theta_state.phi_eta, rng.random((M, model.re_dim)))
    x0 = model.initial_state(theta_state.phi_X, eta)
    x = x0[:, None].copy()
    latent = np.empty((M, T))
    latent[:, 0] = x[:, 0]
    for t in range(1, T):
        z = rng.standard_normal((M, D, 1))
        states, _, _, _ = propagate_interval(
            model, theta_state.phi_X, eta, x, scaled[t - 1], scaled[t], D,
            "emd", z, want_density=False)
        x = states[:, -1]
        latent[:, t] = x[:, 0]
    y = latent + theta_state.sigma * rng.standard_normal((M, T))

    width = max(3, len(str(M)))
    subjects = [Subject(f"m{m + 1:0{width}d}", hours.copy(), y[m]) for m in range(M)]
    ds = Dataset(subjects=subjects, scaled=False)
    if return_latent:
        return ds, eta, latent
    return ds, eta
