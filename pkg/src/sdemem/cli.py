"""Command-line interface.

Subcommands: ``simulate`` (write a synthetic dataset), ``run`` (one MCMC
run, writing a trace CSV plus a summary report), ``tune`` (particle-count
search, writing a tuning report) and ``diagnose`` (recompute diagnostics
and density grids from a trace file). Global flags ``--seed``, ``--config``,
``--out`` and ``--threads`` apply to every subcommand; values from
``--config`` files (flat ``key = value`` lines, ``#`` comments) are
overridden by explicit flags.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 tuning
target unattained.
"""

import argparse
import os
import sys

import numpy as np

from . import dataio
from .diagnostics import (CWPMEstimator, IAPMEstimator, multiess, run_report,
                          tune_particles)
from .exceptions import (ConfigurationError, NumericError, SdememError,
                         TuningUnattainedError)
from .models import ParameterState, builtin_model, scale_times
from .rng import RngBlockStore
from .samplers import MethodConfig, Trace, run_chain
from .simulate import simulate_dataset

__all__ = ["main"]

# CLI theta orders. The tumour order follows the common reporting
# convention (mu_X0, sigma_X0, mu_beta, sigma_beta, gamma, sigma, rho);
# the constant model uses its trace-column order.
_CLI_THETA_ORDER = {
    "tumour": ("mu_X0", "sigma_X0", "mu_beta", "sigma_beta", "gamma", "sigma", "rho"),
    "constant": ("sigma", "gamma", "x0", "mu_beta", "sigma_beta"),
}


def _theta_from_cli(model, values):
    order = _CLI_THETA_ORDER[model.name]
    if len(values) != len(order):
        raise ConfigurationError(
            f"model {model.name!r} expects {len(order)} theta values "
            f"({', '.join(order)}), got {len(values)}")
    by_name = dict(zip(order, values))
    layout = model.param_layout
    return np.array([by_name[n] for n in layout.names])


def _parse_bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {s!r}")


def _parse_floats(s):
    try:
        return np.array([float(v) for v in str(s).split(",") if v.strip() != ""])
    except ValueError:
        raise ConfigurationError(f"expected a comma-separated number list, got {s!r}")


_DEFAULTS = {
    "model": "tumour",
    "method": "cwpm",
    "iterations": "1000",
    "n_particles": "10",
    "n_draws": "8",
    "discretization": "10",
    "proposal": "mdb",
    "importance": "laplace_mdb",
    "correlated": "true",
    "qmc": "false",
    "mala_step": "0.6",
    "resample": "stratified",
    "joint_eta": "false",
    "sigma_update": "slice",
    "slice_width": "1.0",
    "seed": "0",
    "out": ".",
    "threads": "1",
    "tune_target": "1.05",
    "tune_reps": "1000",
    "time_cap_s": "900",
    "particle_cap": "1000000",
    "write_density_grids": "true",
    "synthetic_days": "19",
}


def _gather_config(args):
    cfg = dict(_DEFAULTS)
    if args.config:
        cfg.update(dataio.parse_config_file(args.config))
    for key in ("seed", "out", "threads"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = str(val)
    for key, val in (getattr(args, "overrides", None) or {}).items():
        if val is not None:
            cfg[key] = str(val)
    return cfg


def _build_method_config(cfg, model, start_theta, start_eta):
    kwargs = dict(
        method=cfg["method"],
        iterations=int(cfg["iterations"]),
        N=int(cfg["n_particles"]),
        L=int(cfg["n_draws"]),
        D=int(cfg["discretization"]),
        proposal=cfg["proposal"],
        importance_kind=cfg["importance"],
        correlated=_parse_bool(cfg["correlated"]),
        qmc=_parse_bool(cfg["qmc"]),
        mala_step=float(cfg["mala_step"]),
        resample_scheme=cfg["resample"],
        joint_eta_update=_parse_bool(cfg["joint_eta"]),
        sigma_update=cfg["sigma_update"],
        slice_width=float(cfg["slice_width"]),
        seed=int(cfg["seed"]),
        start_theta=start_theta,
        start_eta=start_eta,
    )
    if "rw_scales" in cfg:
        kwargs["rw_cov"] = np.diag(_parse_floats(cfg["rw_scales"]) ** 2)
    if "mala_precond" in cfg:
        kwargs["mala_precond"] = np.diag(_parse_floats(cfg["mala_precond"]))
    if "re_rw_scales" in cfg:
        kwargs["re_rw_scales"] = _parse_floats(cfg["re_rw_scales"])
    return MethodConfig(**kwargs)


def _resolve_data(cfg, model):
    """Dataset (scaled), plus start values when simulating synthetically."""
    has_path = "dataset" in cfg and cfg["dataset"]
    has_synth = "synthetic_subjects" in cfg and cfg["synthetic_subjects"]
    if has_path == bool(has_synth):
        raise ConfigurationError(
            "exactly one of 'dataset' or 'synthetic_subjects' must be given")
    if has_path:
        ds = dataio.load_dataset(cfg["dataset"])
        start_theta = (_theta_from_cli(model, _parse_floats(cfg["theta"]))
                       if "theta" in cfg else None)
        return ds, start_theta, None
    if "theta" not in cfg:
        raise ConfigurationError("synthetic data needs 'theta'")
    theta_vec = _theta_from_cli(model, _parse_floats(cfg["theta"]))
    state = ParameterState.from_theta(model.param_layout, theta_vec,
                                      np.zeros((1, model.re_dim)))
    M = int(cfg["synthetic_subjects"])
    H = float(cfg.get("synthetic_hours", "24"))
    days = int(cfg["synthetic_days"])
    if H not in (1.0, 12.0, 24.0):
        print(f"warning: unusual observation spacing H={H}", file=sys.stderr)
    raw, eta_true = simulate_dataset(model, state, M, H, days, int(cfg["seed"]),
                                     D=int(cfg["discretization"]))
    return scale_times(raw), theta_vec, eta_true


def _fixed_point(cfg, model, dataset, start_theta, eta_true):
    """theta/eta at which tuning measures the estimator noise."""
    if "init_theta" in cfg:
        theta_vec = _parse_floats(cfg["init_theta"])
    elif start_theta is not None:
        theta_vec = start_theta
    else:
        raise ConfigurationError("tuning needs 'theta' or 'init_theta'")
    if eta_true is not None:
        eta = eta_true
    else:
        sigma, phi_X, phi_eta = model.param_layout.unpack(theta_vec)
        means, _ = model.re_prior_moments(phi_eta)
        eta = np.tile(means, (dataset.M, 1))
    return ParameterState.from_theta(model.param_layout, theta_vec, eta)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_simulate(args):
    cfg = _gather_config(args)
    model = builtin_model(cfg["model"])
    if "theta" not in cfg:
        raise ConfigurationError("simulate needs 'theta'")
    theta_vec = _theta_from_cli(model, _parse_floats(cfg["theta"]))
    state = ParameterState.from_theta(model.param_layout, theta_vec,
                                      np.zeros((1, model.re_dim)))
    M = int(cfg.get("synthetic_subjects", "10"))
    H = float(cfg.get("synthetic_hours", "24"))
    days = int(cfg["synthetic_days"])
    if H not in (1.0, 12.0, 24.0):
        print(f"warning: unusual observation spacing H={H}", file=sys.stderr)
    ds, _ = simulate_dataset(model, state, M, H, days, int(cfg["seed"]),
                             D=int(cfg["discretization"]))
    out = cfg.get("dataset") or os.path.join(cfg["out"], "dataset.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    dataio.write_dataset_csv(out, ds)
    print(f"wrote {out}: {ds.M} subjects, "
          f"{sum(s.times.size for s in ds.subjects)} rows")
    return 0


def _cmd_run(args):
    cfg = _gather_config(args)
    model = builtin_model(cfg["model"])
    dataset, start_theta, eta_true = _resolve_data(cfg, model)
    if "init_theta" in cfg:
        start_theta = _parse_floats(cfg["init_theta"])
    mc = _build_method_config(cfg, model, start_theta, None)
    trace = run_chain(model, dataset, mc)
    os.makedirs(cfg["out"], exist_ok=True)
    trace_path = os.path.join(cfg["out"], "trace.csv")
    dataio.write_trace_csv(trace_path, trace)
    mapping = {
        "method": trace.method,
        "model": trace.model,
        "iterations": trace.iterations,
        "seed": trace.seed,
        "final_epochs": ",".join(str(int(e)) for e in trace.final_epochs),
    }
    try:
        rep = run_report(trace)
        mapping.update(rep.to_mapping())
        summary = f"multiESS {rep.multiess_all:.1f}, {rep.minutes:.2f} min"
    except (ConfigurationError, NumericError) as exc:
        # Too short or degenerate for batch means; keep the basic summary.
        mapping["multiess.all"] = "unavailable"
        mapping["multiess.reason"] = str(exc)
        mapping.update({f"acceptance.{k}": v
                        for k, v in trace.acceptance_rates().items()})
        summary = f"{trace.duration_s / 60.0:.2f} min (multiESS unavailable)"
    report_path = os.path.join(cfg["out"], "report.txt")
    dataio.write_report(report_path, mapping)
    print(f"wrote {trace_path} and {report_path} ({summary})")
    return 0


def _cmd_tune(args):
    cfg = _gather_config(args)
    model = builtin_model(cfg["model"])
    dataset, start_theta, eta_true = _resolve_data(cfg, model)
    point = _fixed_point(cfg, model, dataset, start_theta, eta_true)
    method = cfg["method"]
    correlated = _parse_bool(cfg["correlated"])
    refresh = cfg.get("tune_refresh", "block" if correlated else "independent")
    D = int(cfg["discretization"])
    proposal = cfg["proposal"]
    scheme = cfg["resample"]
    seed = int(cfg["seed"])

    if int(cfg["tune_reps"]) < 1000:
        print("warning: tuning measurements below the 1000-replicate floor",
              file=sys.stderr)

    if method == "iapm":
        def family(N):
            return IAPMEstimator(model, point, dataset, L=N, N=N, D=D,
                                 proposal=proposal,
                                 importance_kind=cfg["importance"],
                                 qmc=_parse_bool(cfg["qmc"]), scheme=scheme)
    else:
        def family(N):
            return CWPMEstimator(model, point, dataset, N=N, D=D,
                                 proposal=proposal, scheme=scheme)

    report = tune_particles(
        family, lambda: RngBlockStore.create(seed, dataset.M),
        target=float(cfg["tune_target"]), reps=int(cfg["tune_reps"]),
        refresh_rule=refresh, time_cap_s=float(cfg["time_cap_s"]),
        n_cap=int(cfg["particle_cap"]),
        description=f"{method} {proposal} correlated={correlated}")
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "tuning.txt")
    dataio.write_report(path, report.to_mapping())
    if not report.attained:
        raise TuningUnattainedError(f"no N met the target; report at {path}")
    print(f"wrote {path}: selected N={report.selected_N}")
    return 0


def _cmd_diagnose(args):
    cfg = _gather_config(args)
    param_names, theta, log_lik, accepts = dataio.read_trace_csv(args.trace)
    trace = Trace(method="unknown", model=cfg["model"],
                  param_names=tuple(param_names), theta=theta,
                  log_lik=log_lik, log_prior=np.zeros_like(log_lik),
                  comps=np.zeros((theta.shape[0], 1)), accepts=accepts,
                  duration_s=float(cfg.get("minutes", "0")) * 60.0)
    rep = run_report(trace)
    mapping = rep.to_mapping()
    if "minutes" not in cfg:
        mapping.pop("minutes")
        mapping.pop("score_multiess_per_minute")
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "diagnostics.txt")
    dataio.write_report(path, mapping)
    written = [path]
    if _parse_bool(cfg["write_density_grids"]):
        from scipy.stats import gaussian_kde

        for j, name in enumerate(param_names):
            col = theta[:, j]
            if np.var(col) == 0.0:
                continue
            kde = gaussian_kde(col)
            pad = 3.0 * col.std()
            grid = np.linspace(col.min() - pad, col.max() + pad, 512)
            dens = kde(grid)
            gpath = os.path.join(cfg["out"], f"density_{name}.csv")
            with open(gpath, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("value,density\n")
                for g, d in zip(grid, dens):
                    fh.write(f"{g!r},{d!r}\n")
            written.append(gpath)
    print(f"wrote {', '.join(written)}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (the current engine is vectorised "
                             "single-threaded; recorded for forward compatibility)")


def _add_override(parser, *names):
    for name in names:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="sdemem",
                                     description="Particle MCMC for SDE mixed-effects models")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="write a synthetic dataset CSV")
    _add_common(p_sim)
    _add_override(p_sim, "model", "theta", "synthetic_subjects", "synthetic_hours",
                  "synthetic_days", "discretization", "dataset")
    p_sim.set_defaults(func=_cmd_simulate)

    p_run = sub.add_parser("run", help="run one MCMC chain")
    _add_common(p_run)
    _add_override(p_run, "model", "method", "dataset", "theta", "init_theta",
                  "iterations", "n_particles", "n_draws", "discretization",
                  "proposal", "importance", "correlated", "qmc", "rw_scales",
                  "mala_step", "mala_precond", "re_rw_scales", "resample",
                  "joint_eta", "sigma_update", "slice_width",
                  "synthetic_subjects", "synthetic_hours", "synthetic_days")
    p_run.set_defaults(func=_cmd_run)

    p_tune = sub.add_parser("tune", help="search for the smallest adequate N")
    _add_common(p_tune)
    _add_override(p_tune, "model", "method", "dataset", "theta", "init_theta",
                  "n_draws", "discretization", "proposal", "importance",
                  "correlated", "qmc", "resample", "tune_target", "tune_reps",
                  "tune_refresh", "time_cap_s", "particle_cap",
                  "synthetic_subjects", "synthetic_hours", "synthetic_days")
    p_tune.set_defaults(func=_cmd_tune)

    p_diag = sub.add_parser("diagnose", help="recompute diagnostics from a trace")
    _add_common(p_diag)
    p_diag.add_argument("trace", help="trace CSV written by `run`")
    _add_override(p_diag, "model", "minutes", "write_density_grids")
    p_diag.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    for key, val in vars(args).items():
        if key in ("command", "func", "seed", "config", "out", "threads", "trace"):
            continue
        overrides[key] = val
    args.overrides = overrides
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"ERROR config: {exc}", file=sys.stderr)
        return 2
    except TuningUnattainedError as exc:
        print(f"ERROR tuning: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"ERROR numeric: {exc}", file=sys.stderr)
        return 3
    except SdememError as exc:
        print(f"ERROR internal: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"ERROR io: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
