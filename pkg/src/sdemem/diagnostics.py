"""Tuning and chain diagnostics.

Particle counts are tuned on the jump statistic of the likelihood
estimator: with estimates l_1, ..., l_R produced sequentially under the
method's stream-refresh rule, R_i = l_{i+1} - l_i and the tuning statistic
is the sample standard deviation of |R_i| (the SD of R itself is reported
alongside). The search doubles N until the target is met, then binary-
refines between the bracketing pair; the discretisation level stays fixed
at 10.

Chain quality is summarised by the multivariate effective sample size

    multiESS = n (det Lambda / det Sigma)^(1/p)

with Lambda the sample covariance and Sigma the batch-means estimate of
the asymptotic covariance (batch size floor(sqrt(n))), plus per-block
acceptance rates and the multiESS-per-minute score.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, NumericError, TuningUnattainedError
from .filtering import total_loglik
from .importance import fit_importance_all, iapm_total_loglik

__all__ = [
    "SigmaDeltaResult",
    "TuningCandidate",
    "TuningReport",
    "sigma_delta",
    "tune_particles",
    "multiess",
    "run_report",
    "CWPMEstimator",
    "IAPMEstimator",
]


# ---------------------------------------------------------------------------
# Likelihood estimators at fixed parameters
# ---------------------------------------------------------------------------


class CWPMEstimator:
    """Particle-filter likelihood at fixed (theta, eta), one block per subject."""

    def __init__(self, model, theta, dataset, N, D=10, proposal="mdb",
                 scheme="stratified"):
        self.model = model
        self.theta = theta
        self.dataset = dataset
        self.N = int(N)
        self.D = int(D)
        self.proposal = proposal
        self.scheme = scheme
        self.n_blocks = dataset.M

    def evaluate(self, store, changed_blocks=None, prev_comps=None):
        return total_loglik(self.model, self.theta, self.theta.eta, self.dataset,
                            self.N, self.D, proposal=self.proposal, store=store,
                            scheme=self.scheme, blocks=changed_blocks,
                            prev_comps=prev_comps)


class IAPMEstimator:
    """Importance-sampled likelihood at fixed theta (random effects integrated)."""

    def __init__(self, model, theta, dataset, L, N, D=10, proposal="mdb",
                 importance_kind="laplace_mdb", qmc=False, scheme="stratified"):
        self.model = model
        self.theta = theta
        self.dataset = dataset
        self.L = int(L)
        self.N = int(N)
        self.D = int(D)
        self.proposal = proposal
        self.importance_kind = importance_kind
        self.qmc = qmc
        self.scheme = scheme
        self.n_blocks = dataset.M
        self._densities = fit_importance_all(importance_kind, model, theta, dataset, D)

    def evaluate(self, store, changed_blocks=None, prev_comps=None):
        return iapm_total_loglik(self.model, self.theta, self.dataset, self.L,
                                 self.N, self.D, proposal=self.proposal,
                                 importance_kind=self.importance_kind, store=store,
                                 qmc_draws=self.qmc, scheme=self.scheme,
                                 blocks=changed_blocks, prev_comps=prev_comps,
                                 densities=self._densities)


# ---------------------------------------------------------------------------
# sigma_delta
# ---------------------------------------------------------------------------


@dataclass
class SigmaDeltaResult:
    sigma_delta: float
    sigma_R: float      # SD of the raw differences, reported for comparison
    mean_time_s: float
    reps: int
    n_excluded: int


def sigma_delta(estimator, store, refresh_rule="independent", reps=1000):
    """Noise of successive log-likelihood estimates at fixed parameters.

    `refresh_rule` controls the stream updates between estimates:
    "independent" refreshes every block, "block" refreshes one block per
    step (cycling). Estimates of -inf are excluded pairwise; more than 10%
    exclusions counts as a tuning failure.
    """
    if refresh_rule not in ("independent", "block"):
        raise ConfigurationError(f"unknown refresh rule {refresh_rule!r}")
    if reps < 2:
        raise ConfigurationError("need at least two estimates")
    vals = np.empty(reps)
    comps = None
    t0 = time.perf_counter()
    for i in range(reps):
        if i == 0:
            _, comps = estimator.evaluate(store)
        elif refresh_rule == "independent":
            store = store.refreshed_all()
            _, comps = estimator.evaluate(store)
        else:
            block = (i - 1) % estimator.n_blocks
            store = store.refreshed(block)
            _, comps = estimator.evaluate(store, changed_blocks=[block],
                                          prev_comps=comps)
        vals[i] = float(np.sum(comps))
    elapsed = time.perf_counter() - t0

    finite = np.isfinite(vals)
    n_excluded = int(np.sum(~finite))
    if n_excluded > 0.10 * reps:
        raise TuningUnattainedError(
            f"{n_excluded}/{reps} likelihood estimates were -inf")
    diffs = vals[1:] - vals[:-1]
    ok = np.isfinite(diffs)
    if np.sum(ok) < 2:
        raise TuningUnattainedError("too few finite difference pairs")
    d = diffs[ok]
    return SigmaDeltaResult(
        sigma_delta=float(np.std(np.abs(d), ddof=1)),
        sigma_R=float(np.std(d, ddof=1)),
        mean_time_s=elapsed / reps,
        reps=reps,
        n_excluded=n_excluded,
    )


# ---------------------------------------------------------------------------
# tune_particles
# ---------------------------------------------------------------------------


@dataclass
class TuningCandidate:
    N: int
    sigma_delta: float
    sigma_R: float
    mean_time_s: float
    reps: int
    attained: bool


@dataclass
class TuningReport:
    description: str
    target: float
    refresh_rule: str
    candidates: list = field(default_factory=list)
    selected_N: int = None
    attained: bool = False

    def to_mapping(self):
        out = {
            "description": self.description,
            "target": self.target,
            "refresh_rule": self.refresh_rule,
            "selected_N": self.selected_N if self.attained else "unattained",
            "attained": self.attained,
        }
        for c in self.candidates:
            key = f"candidate.N{c.N}"
            out[key] = {
                "sigma_delta": c.sigma_delta,
                "sigma_R": c.sigma_R,
                "mean_time_s": c.mean_time_s,
                "reps": c.reps,
                "attained": c.attained,
            }
        return out


def tune_particles(estimator_family, store_factory, target=1.05, reps=1000,
                   refresh_rule="independent", time_cap_s=900.0, n_cap=10 ** 6,
                   description=""):
    """Doubling-then-bisection search for the smallest N with sigma_delta <= target.

    `estimator_family(N)` builds the estimator under test; `store_factory()`
    builds a fresh stream store (same master seed each time, so the search
    is deterministic). A candidate whose single-estimate time exceeds
    `time_cap_s`, or N beyond `n_cap`, ends the search as unattained.
    """
    report = TuningReport(description=description, target=target,
                          refresh_rule=refresh_rule)
    evaluated = {}

    def measure(N):
        if N in evaluated:
            return evaluated[N]
        est = estimator_family(N)
        try:
            res = sigma_delta(est, store_factory(), refresh_rule=refresh_rule,
                              reps=reps)
            cand = TuningCandidate(N=N, sigma_delta=res.sigma_delta,
                                   sigma_R=res.sigma_R,
                                   mean_time_s=res.mean_time_s, reps=res.reps,
                                   attained=res.sigma_delta <= target)
        except TuningUnattainedError:
            cand = TuningCandidate(N=N, sigma_delta=float("inf"),
                                   sigma_R=float("inf"), mean_time_s=0.0,
                                   reps=reps, attained=False)
        evaluated[N] = cand
        report.candidates.append(cand)
        return cand

    # Doubling phase.
    N = 1
    first_pass, last_fail = None, None
    while True:
        cand = measure(N)
        if cand.mean_time_s > time_cap_s:
            return report
        if cand.attained:
            first_pass = N
            break
        last_fail = N
        N *= 2
        if N > n_cap:
            return report

    # Binary refinement in (last_fail, first_pass].
    lo = last_fail if last_fail is not None else 0
    hi = first_pass
    while hi - lo > 1:
        mid = (lo + hi) // 2
        cand = measure(mid)
        if cand.attained:
            hi = mid
        else:
            lo = mid
    report.selected_N = hi
    report.attained = True
    return report


# ---------------------------------------------------------------------------
# Multivariate effective sample size
# ---------------------------------------------------------------------------


def multiess(samples):
    """n (det Lambda / det Sigma)^(1/p) with batch-means Sigma, batches floor(sqrt(n))."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if p < 1:
        raise ConfigurationError("need at least one column")
    b = int(np.floor(np.sqrt(n)))
    if n < 4 * b or b < 1:
        raise ConfigurationError(f"chain too short for batch means (n={n})")
    var = np.var(X, axis=0)
    if np.any(var == 0.0):
        j = int(np.argmin(var))
        raise NumericError(f"column {j} has zero variance")
    a = n // b
    Xb = X[: a * b].reshape(a, b, p).mean(axis=1)
    lam = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    sig = b * np.atleast_2d(np.cov(Xb, rowvar=False, ddof=1))
    sign_l, logdet_l = np.linalg.slogdet(lam)
    sign_s, logdet_s = np.linalg.slogdet(sig)
    if sign_l <= 0:
        raise NumericError("sample covariance is singular")
    if sign_s <= 0:
        raise NumericError("batch-means covariance is singular")
    return float(n * np.exp((logdet_l - logdet_s) / p))


# ---------------------------------------------------------------------------
# Run reports
# ---------------------------------------------------------------------------


def _param_blocks(param_names):
    """Reporting blocks: {sigma + phi_X-like} first, then phi_eta pairs."""
    names = list(param_names)
    blocks = {}
    eta_like = [n for n in names if n.startswith(("mu_", "sigma_")) and n != "sigma"]
    head = [n for n in names if n not in eta_like]
    if head:
        blocks["(" + ",".join(head) + ")"] = head
    for i in range(0, len(eta_like) - 1, 2):
        pair = eta_like[i:i + 2]
        blocks["(" + ",".join(pair) + ")"] = pair
    return blocks


@dataclass
class RunReport:
    multiess_all: float
    multiess_blocks: dict
    acceptance: dict
    minutes: float
    score: float

    def to_mapping(self):
        return {
            "multiess.all": self.multiess_all,
            **{f"multiess.{k}": v for k, v in self.multiess_blocks.items()},
            **{f"acceptance.{k}": v for k, v in self.acceptance.items()},
            "minutes": self.minutes,
            "score_multiess_per_minute": self.score,
        }


def run_report(trace, duration_s=None):
    """multiESS (full vector and per block), acceptance rates, score."""
    if trace.iterations < 1:
        raise ConfigurationError("empty trace")
    names = list(trace.param_names)
    ess_all = multiess(trace.theta)
    blocks = {}
    for label, members in _param_blocks(names).items():
        idx = [names.index(m) for m in members]
        blocks[label] = multiess(trace.theta[:, idx])
    seconds = trace.duration_s if duration_s is None else duration_s
    minutes = max(seconds / 60.0, 1e-12)
    acceptance = trace.acceptance_rates()
    return RunReport(multiess_all=ess_all, multiess_blocks=blocks,
                     acceptance=acceptance, minutes=minutes,
                     score=ess_all / minutes)
