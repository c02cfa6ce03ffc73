"""Command-line front end: simulate, identify, synthesize, evaluate, demo-paper.

Every subcommand writes into ``--out`` and records a ``manifest.json`` with
the config hash, package versions, seed and output file digests. Outputs
depend only on inputs and flags, so re-running a command reproduces them
byte for byte. Errors print one line to stderr and exit with status 1; a
failed claim in ``evaluate``/``demo-paper`` exits with status 3.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .hvroc import (
    AutomationPolicy,
    SynthesisOptions,
    VarianceTarget,
    evaluate_joint,
    load_policy,
    save_policy,
    synthesize,
)
from .isoc import (
    DataSummary,
    IdentificationConfig,
    identified_config,
    identify,
    load_result,
    load_trials,
    save_result,
    segment_and_align,
)
from .lqs import ClosedLoopSpec, SolverOptions, propagate_moments, save_gains, solve_lqs
from .model import N_SIGMA, ModelConfig, NoiseParams, load_config, reference_config, save_config
from .simulate import (
    compute_metrics,
    rollout_ensemble,
    write_ensemble_csv,
    write_metrics_json,
    write_moments_csv,
)

EXIT_ERROR = 1
EXIT_CLAIMS = 3

log = logging.getLogger("lqs_hvroc")


class CliError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# shared helpers


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, subcommand: str, cfg: ModelConfig | None, files: list[str], **extra) -> None:
    doc = {
        "subcommand": subcommand,
        "config_hash": None if cfg is None else config_hash(cfg),
        "versions": {
            "lqs_hvroc": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "files": {name: _file_digest(out / name) for name in sorted(files)},
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {p}")
    return p


def resolve_config(args) -> ModelConfig:
    """Model config from ``--config`` (default: reference values), overridden by ``--params``."""
    cfg = load_config(_require_file(args.config)) if getattr(args, "config", None) else reference_config()
    params = getattr(args, "params", None)
    if params:
        cost, sigma, _ = load_result(_require_file(params))
        cfg = cfg.replace(cost=cost, noise=sigma)
    if getattr(args, "sigma_zero", False):
        cfg = cfg.replace(noise=NoiseParams((0.0,) * N_SIGMA))
    return cfg


def solve_human(cfg: ModelConfig):
    model = cfg.system()
    noise = cfg.noise_model(model)
    cost = cfg.cost_matrices()
    task = cfg.task()
    human = solve_lqs(model, noise, cost, task, SolverOptions())
    if not human.converged:
        raise CliError(f"human policy did not converge (residual {human.residual:.3g})")
    return model, noise, cost, task, human


def parse_index_set(text: str | None) -> tuple[int, ...]:
    """``"1-7"`` or ``"1,3,8"`` -> sorted 1-based indices."""
    if not text:
        return ()
    out = set()
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.update(range(int(a), int(b) + 1))
        elif part:
            out.add(int(part))
    bad = [i for i in out if not 1 <= i <= N_SIGMA]
    if bad:
        raise CliError(f"noise indices must be in 1..{N_SIGMA}, got {sorted(bad)}")
    return tuple(sorted(out))


# --------------------------------------------------------------------------- #
# evaluation report


@dataclass
class EvaluationReport:
    conditions: dict = field(default_factory=dict)  # name -> TaskMetrics dict
    ratios: dict = field(default_factory=dict)
    claims: dict = field(default_factory=dict)  # name -> bool
    notes: dict = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [k for k, ok in self.claims.items() if not ok]

    def to_dict(self) -> dict:
        return {**asdict(self), "failed": self.failed}


def evaluate_conditions(cfg: ModelConfig, match: AutomationPolicy, reduce: AutomationPolicy, out: Path,
                        reach_tol_m: float = 0.01) -> EvaluationReport:
    """Moments and metrics for human-only, match and reduce; checks the ordering claims."""
    model, noise, cost, task, human = solve_human(cfg)
    rep = EvaluationReport()
    moments = {}
    for name, pol in (("human_only", None), ("match", match), ("reduce", reduce)):
        mom, met = evaluate_joint(model, noise, human, pol, task, cost, reach_tol_m)
        write_moments_csv(mom, out / f"moments_{name}.csv")
        moments[name] = mom
        rep.conditions[name] = met.to_dict()
    c = rep.conditions
    peak = {k: v["peak_position_variance_m2"] for k, v in c.items()}
    reach = {k: v["time_to_reach_s"] for k, v in c.items()}
    endv = {k: v["endpoint_variance_m2"] for k, v in c.items()}

    def faster(k):
        return reach[k] is not None and (reach["human_only"] is None or reach[k] < reach["human_only"])

    rep.ratios = {
        "reduce_over_match_peak": peak["reduce"] / peak["match"],
        "match_over_human_peak": peak["match"] / peak["human_only"],
        "reduce_over_human_peak": peak["reduce"] / peak["human_only"],
        "match_over_human_endpoint": endv["match"] / endv["human_only"],
        "reduce_over_human_endpoint": endv["reduce"] / endv["human_only"],
    }
    rep.claims = {
        "reduce_peak_below_match": peak["reduce"] < peak["match"],
        "match_peak_not_above_human": peak["match"] <= peak["human_only"],
        "match_reaches_faster": faster("match"),
        "reduce_reaches_faster": faster("reduce"),
        "match_endpoint_similar": 0.5 <= rep.ratios["match_over_human_endpoint"] <= 2.0,
        "reduce_endpoint_similar": 0.5 <= rep.ratios["reduce_over_human_endpoint"] <= 2.0,
        "variance_gap_plausible": 0.0 < rep.ratios["reduce_over_match_peak"] <= 0.95,
    }
    rep.notes = {
        "variance_gap_reference": "reported reduction of roughly 20 percent; informational only",
        "variance_gap_observed_percent": 100.0 * (1.0 - rep.ratios["reduce_over_match_peak"]),
    }
    return rep


# --------------------------------------------------------------------------- #
# subcommands


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(args)
    model, noise, cost, task, human = solve_human(cfg)
    automation = load_policy(_require_file(args.automation)).gains if args.automation else None
    spec = ClosedLoopSpec(model, noise, cost, human, task, automation)
    mom = propagate_moments(spec)
    files = ["moments.csv", "metrics.json"]
    write_moments_csv(mom, out / "moments.csv")
    write_metrics_json(compute_metrics(mom, task, args.reach_tol), out / "metrics.json")
    if args.n_trials > 0:
        ens = rollout_ensemble(spec, args.n_trials, args.seed, workers=args.workers, store_observations=False)
        write_ensemble_csv(ens, out / "ensemble.csv")
        files.append("ensemble.csv")
    save_gains(out / "human_gains.json", human.gains, human.filter, human.converged, human.residual)
    save_config(cfg, out / "config.json")
    files += ["human_gains.json", "config.json"]
    write_manifest(out, "simulate", cfg, files, seed=args.seed, n_trials=args.n_trials,
                   condition="joint" if automation is not None else "human_only")
    print(f"simulate: wrote {len(files)} files to {out}")
    return 0


def _identification_config(args) -> IdentificationConfig:
    frozen = set(parse_index_set(args.freeze_sigma))
    kw = {"free_sigma": tuple(i for i in range(1, N_SIGMA + 1) if i not in frozen)}
    if args.freeze_cost:
        kw["free_cost"] = ()
    if args.outer_iterations is not None:
        kw["outer_iterations"] = args.outer_iterations
    return IdentificationConfig(**kw)


def run_identify(trials_path, template: ModelConfig, icfg: IdentificationConfig, out: Path, segment=None, resample=False):
    ens = load_trials(trials_path, dt=template.discretization.dt_s,
                      N=None if segment else template.discretization.horizon_steps, resample=resample)
    if segment is not None:
        start, goal = segment
        ens = segment_and_align(ens, start, goal, template.discretization.horizon_steps, template.p_start_m)
    data = DataSummary.from_ensemble(ens)
    res = identify(data, template, icfg)
    save_result(res, out / "identification.json")
    cfg = identified_config(template, res)
    model = cfg.system()
    noise = cfg.noise_model(model)
    human = solve_lqs(model, noise, cfg.cost_matrices(), cfg.task())
    mom = propagate_moments(ClosedLoopSpec(model, noise, cfg.cost_matrices(), human, cfg.task()))
    overlay = pd.DataFrame({
        "t_index": np.arange(mom.N + 1),
        "time_s": mom.times,
        "data_mean_p_m": data.mean_p,
        "model_mean_p_m": mom.mean_p,
        "data_var_p_m2": data.var_p,
        "model_var_p_m2": mom.var_p,
        "data_mean_v": data.mean_v,
        "model_mean_v": mom.mean_v,
        "data_var_v": data.var_v,
        "model_var_v": mom.var_v,
    })
    overlay.to_csv(out / "fit_overlay.csv", index=False, float_format="%.12g")
    return res, cfg, len(ens)


def cmd_identify(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    template = resolve_config(args)
    trials = _require_file(args.trials)
    res, cfg, n = run_identify(trials, template, _identification_config(args), out,
                               tuple(args.segment) if args.segment else None, args.resample)
    save_config(cfg, out / "identified_config.json")
    files = ["identification.json", "fit_overlay.csv", "identified_config.json"]
    write_manifest(out, "identify", template, files, trials_sha256=_file_digest(trials), n_trials=n)
    print(f"identify: {n} trials, mean RMSE {res.mean_fit_rmse_m * 1e3:.3f} mm, "
          f"var RMSE {res.var_fit_rmse_m2:.3g} m^2, converged={res.converged}")
    return 0


def _target(args) -> VarianceTarget:
    if args.target == "match":
        return VarianceTarget.match()
    return VarianceTarget.reduce(args.kappa)


def cmd_synthesize(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(args)
    model, noise, cost, task, human = solve_human(cfg)
    opts = SynthesisOptions(rho_fixed=args.rho)
    policy, report = synthesize(model, noise, human, cost, task, _target(args), opts)
    save_policy(policy, out / "automation.json")
    report.frame().to_csv(out / "synthesis.csv", index=False, float_format="%.12g")
    files = ["automation.json", "synthesis.csv"]
    write_manifest(out, "synthesize", cfg, files, target=policy.target.mode, kappa=policy.target.kappa,
                   bracket_status=report.bracket_status, monotone=report.monotone)
    print(f"synthesize: {policy.target.mode} rho={policy.rho:.4g} peak var ratio "
          f"{policy.achieved_peak_variance_m2 / policy.baseline_peak_variance_m2:.4f} ({report.bracket_status})")
    return 0


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(args)
    match = load_policy(_require_file(args.match))
    reduce = load_policy(_require_file(args.reduce))
    rep = evaluate_conditions(cfg, match, reduce, out)
    (out / "evaluation.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    files = ["evaluation.json"] + [f"moments_{k}.csv" for k in rep.conditions]
    write_manifest(out, "evaluate", cfg, files)
    return _report_claims("evaluate", rep)


def _report_claims(name: str, rep: EvaluationReport) -> int:
    for claim, ok in rep.claims.items():
        print(f"{name}: {'PASS' if ok else 'FAIL'} {claim}")
    print(f"{name}: reduce/match peak variance ratio {rep.ratios['reduce_over_match_peak']:.3f}")
    if rep.failed:
        print(f"{name}: failed claims: {', '.join(rep.failed)}", file=sys.stderr)
        return EXIT_CLAIMS
    return 0


def cmd_demo_paper(args) -> int:
    """Synthetic data from the reference values -> identify -> synthesize -> evaluate."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = resolve_config(args)
    model, noise, cost, task, human = solve_human(truth)
    spec = ClosedLoopSpec(model, noise, cost, human, task)
    ens = rollout_ensemble(spec, args.n_trials, args.seed, store_observations=False)
    write_ensemble_csv(ens, out / "synthetic_trials.csv")
    save_config(truth, out / "generating_config.json")

    icfg = _identification_config(args)
    res, cfg, _ = run_identify(out / "synthetic_trials.csv", truth, icfg, out)
    save_config(cfg, out / "identified_config.json")

    model, noise, cost, task, human = solve_human(cfg)
    policies = {}
    for name, target in (("match", VarianceTarget.match()), ("reduce", VarianceTarget.reduce(args.kappa))):
        pol, report = synthesize(model, noise, human, cost, task, target)
        save_policy(pol, out / f"automation_{name}.json")
        report.frame().to_csv(out / f"synthesis_{name}.csv", index=False, float_format="%.12g")
        policies[name] = pol
    rep = evaluate_conditions(cfg, policies["match"], policies["reduce"], out)
    rep.notes["identification"] = {
        "mean_fit_rmse_m": res.mean_fit_rmse_m,
        "var_fit_rmse_m2": res.var_fit_rmse_m2,
        "converged": res.converged,
    }
    (out / "evaluation.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    files = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    write_manifest(out, "demo-paper", truth, files, seed=args.seed, n_trials=args.n_trials, kappa=args.kappa)
    return _report_claims("demo-paper", rep)


# --------------------------------------------------------------------------- #
# argument parsing


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _kappa(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError("kappa must lie in (0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lqs-hvroc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, trials_default=0):
        sp.add_argument("--config", help="model config JSON (default: reference values)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=_u64, default=0)
        sp.add_argument("--n-trials", type=int, default=trials_default)

    def ident_flags(sp):
        sp.add_argument("--freeze-sigma", help="noise indices held at their config values, e.g. 1-7")
        sp.add_argument("--freeze-cost", action="store_true", help="hold the cost weights fixed")
        sp.add_argument("--outer-iterations", type=int)

    sp = sub.add_parser("simulate", help="moments, rollouts and metrics for one condition")
    common(sp, 1000)
    sp.add_argument("--params", help="identification result JSON overriding cost and noise")
    sp.add_argument("--automation", help="automation policy JSON for a joint run")
    sp.add_argument("--sigma-zero", action="store_true", help="switch all noise off")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--reach-tol", type=float, default=0.01)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("identify", help="fit cost and noise parameters to a trials CSV")
    common(sp)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--segment", nargs=2, type=float, metavar=("START_M", "GOAL_M"),
                    help="segment raw trials moving from START to GOAL before fitting")
    sp.add_argument("--resample", action="store_true")
    ident_flags(sp)
    sp.set_defaults(func=cmd_identify)

    sp = sub.add_parser("synthesize", help="automation gains for a variance target")
    common(sp)
    sp.add_argument("--params", help="identification result JSON")
    sp.add_argument("--target", choices=("match", "reduce"), default="match")
    sp.add_argument("--kappa", type=_kappa, default=0.5)
    sp.add_argument("--rho", type=float, help="fix the effort weight instead of searching")
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("evaluate", help="compare human-only, match and reduce conditions")
    common(sp)
    sp.add_argument("--params", help="identification result JSON")
    sp.add_argument("--match", required=True, help="match-mode automation JSON")
    sp.add_argument("--reduce", required=True, help="reduce-mode automation JSON")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("demo-paper", help="self-contained numerical example end to end")
    common(sp, 10000)
    sp.add_argument("--kappa", type=_kappa, default=0.5)
    ident_flags(sp)
    sp.set_defaults(func=cmd_demo_paper, params=None, sigma_zero=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "n_trials", 0) < 0:
        parser.error("--n-trials must be >= 0")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic contract
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"lqs-hvroc {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
