"""Exact-approximation particle MCMC for SDE mixed-effects models."""

from .bridges import SubPath, TimeGrid, euler_propagate, mdb_propagate, rb_propagate
from .diagnostics import (CWPMEstimator, IAPMEstimator, multiess, run_report,
                          sigma_delta, tune_particles)
from .exceptions import (ConfigurationError, NumericError, ParticleCollapseError,
                         SdememError, TuningUnattainedError)
from .filtering import (InvariantPath, ParticleCloud, resample, run_cpf, run_pf,
                        total_loglik)
from .importance import (ImportanceDensity, fit_importance, iapm_total_loglik,
                         rqmc_uniforms)
from .models import (Dataset, ModelSpec, ParameterState, Subject, builtin_model,
                     exact_transition_constant, scale_times, solve_drift_ode)
from .rng import RngBlockStore
from .samplers import (MethodConfig, Trace, cwpm_chain, default_method_config,
                       iapm_chain, mala_propose, mh_accept, mpm_chain, run_chain,
                       slice_sample_1d)
from .simulate import simulate_dataset

__version__ = "0.1.0"
