"""Simulate trials at the reference parameters, identify, and compare with the generator."""

import argparse
import logging
import time

import numpy as np

from lqs_hvroc.isoc import IdentificationConfig, identified_config, identify
from lqs_hvroc.lqs import ClosedLoopSpec, propagate_moments, solve_lqs
from lqs_hvroc.model import reference_config
from lqs_hvroc.simulate import rollout_ensemble


def moments(cfg):
    model, noise, cost, task = cfg.system(), cfg.noise_model(), cfg.cost_matrices(), cfg.task()
    human = solve_lqs(model, noise, cost, task)
    return ClosedLoopSpec(model, noise, cost, human, task)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-trials", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=4)
    ap.add_argument("--outer-iterations", type=int, default=8)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    truth_cfg = reference_config()
    spec = moments(truth_cfg)
    truth = propagate_moments(spec)
    ens = rollout_ensemble(spec, args.n_trials, args.seed, store_observations=False)

    t0 = time.perf_counter()
    res = identify(ens, truth_cfg, IdentificationConfig(outer_iterations=args.outer_iterations))
    fit = propagate_moments(moments(identified_config(truth_cfg, res)))
    print(f"identification took {time.perf_counter() - t0:.0f} s, converged={res.converged}")
    print("cost  ", res.s_hat)
    print("sigma ", np.array2string(np.array(res.sigma_hat.sigma), precision=3))
    print(f"mean RMSE vs generator: {1e3 * np.sqrt(np.mean((fit.mean_p - truth.mean_p) ** 2)):.3f} mm")
    print(f"peak variance ratio:    {np.max(fit.var_p) / np.max(truth.var_p):.4f}")
    print(f"flat directions:        {res.flat_parameters}")


if __name__ == "__main__":
    main()
