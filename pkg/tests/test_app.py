import os
import subprocess
import sys

import numpy as np
import pytest

from sdemem import dataio
from sdemem.cli import main
from sdemem.exceptions import ConfigurationError
from sdemem.models import ParameterState, builtin_model, scale_times
from sdemem.simulate import observation_count, simulate_dataset


TUMOUR_THETA = "3,1,-1,1,1,0.5,1"  # (mu_X0, sigma_X0, mu_beta, sigma_beta, gamma, sigma, rho)


def _run_cli(args):
    return main(list(args))


class TestSimulate:
    def test_observation_counts(self):
        assert observation_count(24, 19) == 20
        assert observation_count(12, 19) == 39
        assert observation_count(1, 19) == 457

    def test_row_counts_m10_h24(self, tmp_path, tumour_model, tumour_truth_vec):
        state = ParameterState.from_theta(tumour_model.param_layout,
                                          tumour_truth_vec, np.zeros((1, 2)))
        ds, _ = simulate_dataset(tumour_model, state, M=10, H=24, days=19, seed=0)
        assert ds.M == 10
        assert sum(s.times.size for s in ds.subjects) == 200

    def test_noiseless_observations_equal_latent(self, tumour_model):
        layout = tumour_model.param_layout

        def sim(sigma):
            theta = layout.pack(sigma, np.array([1.0, 1.0]),
                                np.array([3.0, 1.0, -1.0, 1.0]))
            state = ParameterState.from_theta(layout, theta, np.zeros((1, 2)))
            ds, _, latent = simulate_dataset(tumour_model, state, M=3, H=24,
                                             days=2, seed=5, return_latent=True)
            return np.stack([s.y for s in ds.subjects]), latent

        y0, latent0 = sim(0.0)
        assert np.array_equal(y0, latent0)  # sigma = 0: bit-exact
        y5, latent5 = sim(0.5)
        assert np.array_equal(latent5, latent0)  # same draws, same path
        assert not np.array_equal(y5, latent5)

    def test_fixed_seed_byte_identical_files(self, tmp_path):
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (out1, out2):
            code = _run_cli(["simulate", "--model", "tumour", "--theta",
                             TUMOUR_THETA, "--synthetic-subjects", "5",
                             "--synthetic-hours", "24", "--synthetic-days", "3",
                             "--seed", "9", "--dataset", str(out)])
            assert code == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_unusual_spacing_warns_but_runs(self, tmp_path, capsys):
        code = _run_cli(["simulate", "--model", "tumour", "--theta", TUMOUR_THETA,
                         "--synthetic-subjects", "2", "--synthetic-hours", "7",
                         "--synthetic-days", "2", "--seed", "1",
                         "--dataset", str(tmp_path / "w.csv")])
        assert code == 0
        assert "warning" in capsys.readouterr().err

    def test_negative_gamma_is_config_error(self, tmp_path):
        code = _run_cli(["simulate", "--model", "tumour", "--theta",
                         "3,1,-1,1,-1,0.5,1", "--synthetic-subjects", "2",
                         "--synthetic-days", "2",
                         "--dataset", str(tmp_path / "x.csv")])
        assert code == 2


class TestLoadDataset:
    def test_scaling_by_max_time(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("subject,time,y\na,0.0,1.0\na,16.0,2.0\na,32.0,3.0\n")
        ds = dataio.load_dataset(str(p))
        assert ds.scaled
        assert np.allclose(ds.subjects[0].times, [0.0, 0.5, 1.0])

    def test_round_trip_lossless(self, tmp_path, tumour_model, tumour_truth_vec):
        state = ParameterState.from_theta(tumour_model.param_layout,
                                          tumour_truth_vec, np.zeros((1, 2)))
        ds, _ = simulate_dataset(tumour_model, state, M=4, H=24, days=3, seed=3)
        p1, p2 = tmp_path / "one.csv", tmp_path / "two.csv"
        dataio.write_dataset_csv(str(p1), ds)
        loaded = dataio.load_dataset(str(p1), scale=False)
        dataio.write_dataset_csv(str(p2), loaded)
        assert p1.read_bytes() == p2.read_bytes()
        for a, b in zip(ds.subjects, loaded.subjects):
            assert np.array_equal(a.y, b.y) and np.array_equal(a.times, b.times)

    def test_seventeen_digit_round_trip(self, tmp_path):
        vals = [0.1 + 0.2, 1.0 / 3.0, np.pi, 1e-17, 123456.789012345678]
        p = tmp_path / "d.csv"
        rows = "".join(f"a,{float(i)!r},{v!r}\n" for i, v in enumerate(vals))
        p.write_text("subject,time,y\n" + rows)
        ds = dataio.load_dataset(str(p), scale=False)
        assert np.array_equal(ds.subjects[0].y, np.array(vals))

    def test_real_data_shape_parses(self, tmp_path):
        # 7 subjects, 34 observations, 2-14 per subject.
        rng = np.random.default_rng(0)
        counts = [2, 3, 4, 5, 6, 7, 7]
        rows = []
        for m, c in enumerate(counts):
            for t in range(c):
                rows.append(f"mouse{m},{float(t)!r},{rng.normal()!r}")
        p = tmp_path / "real.csv"
        p.write_text("subject,time,y\n" + "\n".join(rows) + "\n")
        ds = dataio.load_dataset(str(p))
        assert ds.M == 7
        assert sum(s.times.size for s in ds.subjects) == 34

    def test_duplicate_rows_error(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("subject,time,y\na,0.0,1.0\na,0.0,2.0\n")
        with pytest.raises(ConfigurationError):
            dataio.load_dataset(str(p))

    def test_malformed_row_reports_line(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("subject,time,y\na,0.0,1.0\na,zzz,2.0\n")
        with pytest.raises(ConfigurationError) as err:
            dataio.load_dataset(str(p))
        assert ":3:" in str(err.value)

    def test_empty_subject_error(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("subject,time,y\n,0.0,1.0\n")
        with pytest.raises(ConfigurationError):
            dataio.load_dataset(str(p))

    def test_unsorted_rows_are_sorted(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("subject,time,y\nb,1.0,4.0\na,2.0,2.0\na,0.0,1.0\nb,0.0,3.0\n")
        ds = dataio.load_dataset(str(p), scale=False)
        assert [s.subject_id for s in ds.subjects] == ["a", "b"]
        assert np.array_equal(ds.subjects[0].times, [0.0, 2.0])


class TestConfigFile:
    def test_parse_and_override(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# a comment\nmethod = mpm\nn_particles = 17 # trailing\n")
        cfg = dataio.parse_config_file(str(p))
        assert cfg == {"method": "mpm", "n_particles": "17"}

    def test_bad_line_raises(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("just words\n")
        with pytest.raises(ConfigurationError):
            dataio.parse_config_file(str(p))


class TestRunAndDiagnose:
    def _run_args(self, tmp_path, iters="12", extra=()):
        return ["run", "--model", "tumour", "--method", "cwpm",
                "--synthetic-subjects", "4", "--synthetic-hours", "24",
                "--synthetic-days", "3", "--theta", TUMOUR_THETA,
                "--iterations", iters, "--n-particles", "4",
                "--seed", "5", "--out", str(tmp_path)] + list(extra)

    def test_trace_row_count(self, tmp_path):
        assert _run_cli(self._run_args(tmp_path)) == 0
        names, theta, ll, accepts = dataio.read_trace_csv(str(tmp_path / "trace.csv"))
        assert theta.shape == (12, 7)
        assert os.path.exists(tmp_path / "report.txt")

    def test_byte_identical_traces(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            args = self._run_args(out)
            assert _run_cli(args) == 0
        assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()

    def test_exactly_one_data_source(self, tmp_path):
        code = _run_cli(["run", "--model", "tumour", "--method", "cwpm",
                         "--iterations", "5", "--theta", TUMOUR_THETA,
                         "--out", str(tmp_path)])
        assert code == 2

    def test_naive_method_end_to_end(self, tmp_path):
        # Uncorrelated IAPM with prior importance and plain Euler proposals.
        code = _run_cli(["run", "--model", "tumour", "--method", "iapm",
                         "--synthetic-subjects", "10", "--synthetic-hours", "24",
                         "--synthetic-days", "19", "--theta", TUMOUR_THETA,
                         "--iterations", "10", "--n-particles", "16",
                         "--n-draws", "16", "--proposal", "emd",
                         "--importance", "prior", "--correlated", "false",
                         "--seed", "2", "--out", str(tmp_path)])
        assert code == 0

    def test_config_file_with_cli_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("model = tumour\nmethod = cwpm\n"
                       f"theta = {TUMOUR_THETA}\nsynthetic_subjects = 3\n"
                       "synthetic_hours = 24\nsynthetic_days = 3\n"
                       "iterations = 40\nn_particles = 4\nseed = 5\n")
        out = tmp_path / "o"
        code = _run_cli(["run", "--config", str(cfg), "--iterations", "6",
                         "--out", str(out)])
        assert code == 0
        _, theta, _, _ = dataio.read_trace_csv(str(out / "trace.csv"))
        assert theta.shape[0] == 6  # CLI override wins

    def test_diagnose_iid_trace(self, tmp_path):
        # Hand-written trace of iid draws: multiESS within 15% of n.
        n = 10_000
        rng = np.random.default_rng(0)
        path = tmp_path / "trace.csv"
        cols = ["iteration", "a", "b", "log_lik", "log_prior", "accept_theta"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(n):
                fh.write(f"{i},{rng.normal()!r},{rng.normal()!r},0.0,0.0,1.0\n")
        out = tmp_path / "diag"
        code = _run_cli(["diagnose", str(path), "--out", str(out)])
        assert code == 0
        report = (out / "diagnostics.txt").read_text()
        ess = float([l for l in report.splitlines()
                     if l.startswith("multiess.all")][0].split("=")[1])
        assert abs(ess - n) < 0.15 * n
        dens = (out / "density_a.csv").read_text().splitlines()
        assert dens[0] == "value,density"
        assert len(dens) == 513

    def test_cli_entry_point_installed(self):
        proc = subprocess.run([sys.executable, "-m", "sdemem.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "simulate" in proc.stdout


class TestExitCodes:
    def test_config_error_exit_2(self, tmp_path, capsys):
        code = _run_cli(["run", "--model", "nope", "--theta", "1",
                         "--synthetic-subjects", "2", "--out", str(tmp_path)])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("ERROR config:") and err.count("\n") == 1

    def test_missing_file_exit_2(self, tmp_path, capsys):
        code = _run_cli(["run", "--model", "tumour", "--method", "cwpm",
                         "--dataset", str(tmp_path / "absent.csv"),
                         "--out", str(tmp_path)])
        assert code == 2
        assert capsys.readouterr().err.startswith("ERROR ")

    def test_tuning_unattained_exit_4_with_report(self, tmp_path, capsys):
        code = _run_cli(["tune", "--model", "tumour", "--method", "cwpm",
                         "--synthetic-subjects", "3", "--synthetic-hours", "24",
                         "--synthetic-days", "3", "--theta", TUMOUR_THETA,
                         "--tune-reps", "60", "--tune-target", "0.000001",
                         "--particle-cap", "4", "--seed", "1",
                         "--out", str(tmp_path)])
        assert code == 4
        err_lines = capsys.readouterr().err.strip().splitlines()
        assert err_lines[-1].startswith("ERROR tuning:")  # machine-parsable
        assert (tmp_path / "tuning.txt").exists()  # report still written

    def test_numeric_error_exit_3(self, tmp_path, capsys):
        # A start point whose likelihood underflows to zero aborts numerically.
        code = _run_cli(["run", "--model", "tumour", "--method", "cwpm",
                         "--synthetic-subjects", "2", "--synthetic-hours", "24",
                         "--synthetic-days", "3", "--theta", TUMOUR_THETA,
                         "--init-theta", "1e-280,1e-6,1.0,50.0,1.0,0.0,1.0",
                         "--iterations", "5", "--out", str(tmp_path)])
        assert code == 3
        assert capsys.readouterr().err.startswith("ERROR numeric:")


class TestTuneCommand:
    def test_tune_selects_and_writes_report(self, tmp_path):
        code = _run_cli(["tune", "--model", "tumour", "--method", "cwpm",
                         "--synthetic-subjects", "5", "--synthetic-hours", "24",
                         "--synthetic-days", "3", "--theta", TUMOUR_THETA,
                         "--proposal", "mdb", "--correlated", "true",
                         "--tune-reps", "200", "--seed", "4",
                         "--out", str(tmp_path)])
        assert code == 0
        text = (tmp_path / "tuning.txt").read_text()
        assert "selected_N" in text and "attained = True" in text
