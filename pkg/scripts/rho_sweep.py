"""Peak position variance of the joint system over a grid of automation effort weights."""

import argparse

import numpy as np
import pandas as pd

from lqs_hvroc.hvroc import automation_gains
from lqs_hvroc.lqs import ClosedLoopSpec, propagate_moments, solve_lqs
from lqs_hvroc.model import reference_config
from lqs_hvroc.simulate import compute_metrics


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--log10-min", type=float, default=-8.0)
    ap.add_argument("--log10-max", type=float, default=8.0)
    ap.add_argument("--points", type=int, default=33)
    ap.add_argument("--out", default="rho_sweep.csv")
    args = ap.parse_args()

    cfg = reference_config()
    model, noise, cost, task = cfg.system(), cfg.noise_model(), cfg.cost_matrices(), cfg.task()
    human = solve_lqs(model, noise, cost, task)
    base = compute_metrics(propagate_moments(ClosedLoopSpec(model, noise, cost, human, task)), task)

    rows = []
    for rho in np.logspace(args.log10_min, args.log10_max, args.points):
        LA = automation_gains(model, human, cost, rho)
        met = compute_metrics(propagate_moments(ClosedLoopSpec(model, noise, cost, human, task, LA)), task)
        rows.append({
            "rho": rho,
            "peak_var_p_m2": met.peak_position_variance_m2,
            "ratio_to_human": met.peak_position_variance_m2 / base.peak_position_variance_m2,
            "time_to_reach_s": met.time_to_reach_s,
        })
    df = pd.DataFrame(rows)
    df.to_csv(args.out, index=False)
    print(df.to_string(index=False, float_format=lambda v: f"{v:.4g}"))


if __name__ == "__main__":
    main()
