import numpy as np
import pytest
from scipy.signal import lfilter

from sdemem.diagnostics import (CWPMEstimator, IAPMEstimator, multiess,
                                run_report, sigma_delta, tune_particles)
from sdemem.exceptions import (ConfigurationError, NumericError,
                               TuningUnattainedError)
from sdemem.rng import RngBlockStore
from sdemem.samplers import MethodConfig, Trace, cwpm_chain

from _oracles import univariate_batch_means_ess
from conftest import constant_params, make_constant_dataset


class _GaussianEstimator:
    """Fake estimator: each evaluation is one Normal(mu, s^2) draw."""

    def __init__(self, mu=0.0, s=1.0):
        self.mu, self.s = mu, s
        self.n_blocks = 1

    def evaluate(self, store, changed_blocks=None, prev_comps=None):
        val = self.mu + self.s * store.generator(0, "pf").standard_normal()
        return val, np.array([val])


class _DeterministicFamily:
    """sigma_delta(N) = 2 / sqrt(N) exactly, via a pre-baked sequence."""

    def __init__(self, reps):
        base = np.random.default_rng(0).standard_normal(reps)
        d = np.diff(base)
        base /= np.std(np.abs(d), ddof=1)  # unit sigma_delta at scale 1
        self.base = base

    def __call__(self, N):
        seq = self.base * (2.0 / np.sqrt(N))
        outer = self

        class _Est:
            n_blocks = 1

            def __init__(self):
                self.i = -1

            def evaluate(self, store, changed_blocks=None, prev_comps=None):
                self.i += 1
                return seq[self.i], np.array([seq[self.i]])

        return _Est()


class TestSigmaDelta:
    def test_deterministic_estimator_gives_zero(self):
        est = _GaussianEstimator(mu=-3.0, s=0.0)
        res = sigma_delta(est, RngBlockStore.create(0, 1), "independent", reps=200)
        assert res.sigma_delta == 0.0

    def test_folded_normal_oracle(self):
        # iid Normal(mu, s^2) estimates: differences are N(0, 2 s^2), so
        # sigma_delta estimates SD(|N(0, 2 s^2)|) = s sqrt(2 (1 - 2/pi)).
        s = 0.8
        est = _GaussianEstimator(mu=5.0, s=s)
        res = sigma_delta(est, RngBlockStore.create(3, 1), "independent",
                          reps=4000)
        analytic = s * np.sqrt(2.0) * np.sqrt(1.0 - 2.0 / np.pi)
        # simulation oracle for the folded normal SD
        sim = np.abs(np.sqrt(2.0) * s
                     * np.random.default_rng(1).standard_normal(400_000))
        assert abs(analytic - sim.std(ddof=1)) < 0.01  # oracle self-check
        assert abs(res.sigma_delta - analytic) < 4.0 * analytic / np.sqrt(4000)
        assert abs(res.sigma_R - s * np.sqrt(2.0)) < 0.1

    def test_block_refresh_smaller_than_independent(self, constant_model):
        ds, betas = make_constant_dataset(M=10, T=6, seed=19)
        theta = constant_params(constant_model, betas)
        est = CWPMEstimator(constant_model, theta, ds, N=8, D=3, proposal="emd")
        res_block = sigma_delta(est, RngBlockStore.create(7, 10), "block",
                                reps=1000)
        res_indep = sigma_delta(est, RngBlockStore.create(7, 10), "independent",
                                reps=1000)
        assert res_block.sigma_delta < res_indep.sigma_delta

    def test_exclusion_failure(self):
        class _DeadEstimator:
            n_blocks = 1

            def evaluate(self, store, changed_blocks=None, prev_comps=None):
                return -np.inf, np.array([-np.inf])

        with pytest.raises(TuningUnattainedError):
            sigma_delta(_DeadEstimator(), RngBlockStore.create(0, 1),
                        "independent", reps=100)

    def test_unknown_refresh_rule(self):
        with pytest.raises(ConfigurationError):
            sigma_delta(_GaussianEstimator(), RngBlockStore.create(0, 1),
                        "alternating", reps=10)


class TestTuneParticles:
    def test_monotone_family_selects_four(self):
        reps = 500
        family = _DeterministicFamily(reps)
        report = tune_particles(family, lambda: RngBlockStore.create(0, 1),
                                target=1.05, reps=reps)
        assert report.attained and report.selected_N == 4
        tested = [c.N for c in report.candidates]
        assert tested[:3] == [1, 2, 4] and 3 in tested

    def test_target_met_at_one(self):
        reps = 300
        family = _DeterministicFamily(reps)
        report = tune_particles(lambda N: family(max(N, 16)),
                                lambda: RngBlockStore.create(0, 1),
                                target=1.05, reps=reps)
        assert report.attained and report.selected_N == 1

    def test_never_attained_sets_flag(self):
        reps = 200
        family = _DeterministicFamily(reps)
        report = tune_particles(lambda N: family(1),  # always sigma_delta = 2
                                lambda: RngBlockStore.create(0, 1),
                                target=1.05, reps=reps, n_cap=64)
        assert not report.attained and report.selected_N is None

    def test_deterministic_given_master_seed(self, constant_model):
        ds, betas = make_constant_dataset(M=4, T=5, seed=23)
        theta = constant_params(constant_model, betas)

        def run():
            return tune_particles(
                lambda N: CWPMEstimator(constant_model, theta, ds, N=N, D=3,
                                        proposal="mdb"),
                lambda: RngBlockStore.create(55, 4), target=1.05, reps=300,
                refresh_rule="block")

        r1, r2 = run(), run()
        assert r1.selected_N == r2.selected_N
        assert [c.sigma_delta for c in r1.candidates] == \
               [c.sigma_delta for c in r2.candidates]


class TestMultiess:
    def test_iid_gaussian_calibration(self):
        rng = np.random.default_rng(0)
        n = 10_000
        X = rng.standard_normal((n, 3))
        ess = multiess(X)
        assert abs(ess - n) < 0.15 * n

    def test_ar1_far_below_n(self):
        rng = np.random.default_rng(1)
        n, rho = 100_000, 0.99
        e = rng.standard_normal(n)
        x = lfilter([1.0], [1.0, -rho], e)
        ess = multiess(x[:, None])
        assert ess < 0.05 * n

    def test_p1_reduces_to_univariate_batch_means(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(5000).cumsum() * 0.01 + rng.standard_normal(5000)
        ours = multiess(x[:, None])
        ref = univariate_batch_means_ess(x)
        assert abs(ours - ref) < 1e-10 * abs(ref)

    def test_affine_invariance(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((4000, 3)) @ np.diag([1.0, 2.0, 0.5])
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        A = q @ np.diag([0.5, 1.4, 2.2])
        base = multiess(X)
        mapped = multiess(X @ A.T + np.array([1.0, -2.0, 3.0]))
        assert abs(mapped - base) / base < 1e-8

    def test_zero_variance_column_named(self):
        X = np.random.default_rng(4).standard_normal((400, 2))
        X[:, 1] = 7.0
        with pytest.raises(NumericError) as err:
            multiess(X)
        assert "column 1" in str(err.value)

    def test_short_chain_rejected(self):
        # n = 10 gives 4 * floor(sqrt(10)) = 12 > n.
        with pytest.raises(ConfigurationError):
            multiess(np.random.default_rng(5).standard_normal((10, 2)))


def _fake_trace(theta, accepts=None, names=None, duration_s=60.0):
    n, p = theta.shape
    names = tuple(names or [f"p{j}" for j in range(p)])
    return Trace(method="cwpm", model="tumour", param_names=names, theta=theta,
                 log_lik=np.zeros(n), log_prior=np.zeros(n),
                 comps=np.zeros((n, 1)),
                 accepts=accepts or {"theta": np.ones(n)},
                 duration_s=duration_s, seed=0)


class TestRunReport:
    def test_identical_traces_identical_reports(self):
        rng = np.random.default_rng(6)
        theta = rng.standard_normal((2000, 3))
        r1 = run_report(_fake_trace(theta.copy()))
        r2 = run_report(_fake_trace(theta.copy()))
        assert r1.to_mapping() == r2.to_mapping()

    def test_iid_trace_blocks_near_n(self):
        rng = np.random.default_rng(0)
        n = 10_000
        names = ["sigma", "gamma", "rho", "mu_X0", "sigma_X0", "mu_beta",
                 "sigma_beta"]
        theta = rng.standard_normal((n, 7))
        rep = run_report(_fake_trace(theta, names=names))
        assert abs(rep.multiess_all - n) < 0.15 * n
        assert set(rep.multiess_blocks) == {"(sigma,gamma,rho)",
                                            "(mu_X0,sigma_X0)",
                                            "(mu_beta,sigma_beta)"}
        for v in rep.multiess_blocks.values():
            assert abs(v - n) < 0.15 * n

    def test_acceptance_rate_is_mean_indicator(self):
        rng = np.random.default_rng(8)
        flags = (rng.random(500) < 0.3).astype(float)
        tr = _fake_trace(rng.standard_normal((500, 2)),
                         accepts={"theta": flags})
        rep = run_report(tr)
        assert rep.acceptance["theta"] == pytest.approx(flags.mean())

    def test_score_uses_minutes(self):
        rng = np.random.default_rng(9)
        tr = _fake_trace(rng.standard_normal((2000, 2)), duration_s=120.0)
        rep = run_report(tr)
        assert rep.minutes == pytest.approx(2.0)
        assert rep.score == pytest.approx(rep.multiess_all / 2.0)


class TestEstimatorWrappers:
    def test_iapm_estimator_block_cache_matches_full(self, constant_model):
        ds, betas = make_constant_dataset(M=3, T=4, seed=31)
        theta = constant_params(constant_model, betas)
        est = IAPMEstimator(constant_model, theta, ds, L=4, N=8, D=3,
                            proposal="emd", importance_kind="prior")
        store = RngBlockStore.create(13, 3)
        _, comps = est.evaluate(store)
        bumped = store.refreshed(2)
        _, full = est.evaluate(bumped)
        _, partial = est.evaluate(bumped, changed_blocks=[2], prev_comps=comps)
        assert np.array_equal(full, partial)
