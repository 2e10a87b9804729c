import numpy as np
import pytest

from sdemem.models import (Dataset, ParameterState, Subject, builtin_model,
                           scale_times)
from sdemem.simulate import simulate_dataset

from _oracles import simulate_constant_subject

TUMOUR_TRUTH = {"mu_X0": 3.0, "sigma_X0": 1.0, "mu_beta": -1.0, "sigma_beta": 1.0,
                "gamma": 1.0, "sigma": 0.5, "rho": 1.0}


@pytest.fixture(scope="session")
def constant_model():
    return builtin_model("constant")


@pytest.fixture(scope="session")
def tumour_model():
    return builtin_model("tumour")


@pytest.fixture(scope="session")
def tumour_truth_vec(tumour_model):
    return np.array([TUMOUR_TRUTH[n] for n in tumour_model.param_layout.names])


def make_constant_dataset(M=3, T=10, beta=None, gamma=0.8, sigma=0.4, x0=0.5,
                          seed=7):
    """Constant-model data simulated from the exact transitions."""
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, 1.0, T)
    betas = np.full(M, 1.3) if beta is None else np.asarray(beta, dtype=float)
    subjects = [Subject(f"m{m + 1:03d}", times,
                        simulate_constant_subject(rng, times, x0, betas[m], gamma, sigma))
                for m in range(M)]
    return Dataset(subjects, scaled=True), betas


def constant_params(model, betas, gamma=0.8, sigma=0.4, x0=0.5,
                    mu_beta=0.0, sigma_beta=1.0):
    eta = np.log(np.asarray(betas, dtype=float))[:, None]
    return ParameterState(sigma=sigma, phi_X=[gamma, x0],
                          phi_eta=[mu_beta, sigma_beta], eta=eta)


@pytest.fixture(scope="session")
def tumour_desk(tumour_model, tumour_truth_vec):
    """sim(10, 24)-shaped synthetic tumour data plus the effects used."""
    state = ParameterState.from_theta(tumour_model.param_layout, tumour_truth_vec,
                                      np.zeros((1, 2)))
    raw, eta_true = simulate_dataset(tumour_model, state, M=10, H=24, days=19,
                                     seed=123)
    return scale_times(raw), eta_true
