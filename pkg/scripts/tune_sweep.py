#!/usr/bin/env python3
"""Particle-count sweep over proposal functions and correlation settings.

Reproduces the tuning-table layout at desk scale: for each proposal in
{emd, mdb, rb} and each correlation setting, search for the smallest N with
sigma_delta <= 1.05 and report it with the per-estimate time.

Example:
    python scripts/tune_sweep.py --subjects 10 --hours 24 --reps 1000
"""

import argparse

import numpy as np

from sdemem.diagnostics import CWPMEstimator, IAPMEstimator, tune_particles
from sdemem.models import ParameterState, builtin_model, scale_times
from sdemem.rng import RngBlockStore
from sdemem.simulate import simulate_dataset

TRUTH = {"mu_X0": 3.0, "sigma_X0": 1.0, "mu_beta": -1.0, "sigma_beta": 1.0,
         "gamma": 1.0, "sigma": 0.5, "rho": 1.0}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--subjects", type=int, default=10)
    ap.add_argument("--hours", type=float, default=24)
    ap.add_argument("--days", type=int, default=19)
    ap.add_argument("--reps", type=int, default=1000)
    ap.add_argument("--sigma", type=float, default=0.5,
                    help="observation noise used to simulate the data")
    ap.add_argument("--method", choices=("cwpm", "iapm"), default="cwpm")
    ap.add_argument("--seed", type=int, default=123)
    args = ap.parse_args()

    model = builtin_model("tumour")
    layout = model.param_layout
    truth = dict(TRUTH, sigma=args.sigma)
    tv = np.array([truth[n] for n in layout.names])
    state = ParameterState.from_theta(layout, tv, np.zeros((1, 2)))
    raw, eta_true = simulate_dataset(model, state, args.subjects, args.hours,
                                     args.days, args.seed)
    ds = scale_times(raw)
    point = ParameterState.from_theta(layout, tv, eta_true)

    print(f"{'proposal':>8} {'corr':>5} {'N':>6} {'sigma_d':>8} {'ms/est':>8}")
    for proposal in ("emd", "mdb", "rb"):
        for correlated in (False, True):
            if args.method == "cwpm":
                fam = lambda N, p=proposal: CWPMEstimator(
                    model, point, ds, N=N, D=10, proposal=p)
            else:
                fam = lambda N, p=proposal: IAPMEstimator(
                    model, point, ds, L=N, N=N, D=10, proposal=p,
                    importance_kind="laplace_mdb")
            rep = tune_particles(
                fam, lambda: RngBlockStore.create(args.seed, ds.M),
                target=1.05, reps=args.reps,
                refresh_rule="block" if correlated else "independent")
            sel = next((c for c in rep.candidates if c.N == rep.selected_N), None)
            if rep.attained and sel is not None:
                print(f"{proposal:>8} {str(correlated):>5} {rep.selected_N:>6} "
                      f"{sel.sigma_delta:>8.3f} {sel.mean_time_s * 1e3:>8.2f}")
            else:
                print(f"{proposal:>8} {str(correlated):>5} {'--':>6}")


if __name__ == "__main__":
    main()
