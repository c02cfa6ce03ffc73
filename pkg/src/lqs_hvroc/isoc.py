"""Inverse stochastic optimal control: recover cost weights and noise scales.

Two levels alternate. The cost level moves the terminal weights and effort
weight with the noise scales held fixed; the noise level moves the nine noise
scales with the cost held fixed. Both minimize the same joint objective, a
mean-trajectory term (position/velocity errors in units of ``mean_scale_m``)
plus a variance term (position/velocity variance errors relative to the data
peaks). The mean term carries the cost information and the variance term the
noise information, but each level sees both: the effort noise shifts the mean
through the gains, and the cost weights shift the variance. Human gains are
re-solved inside every evaluation.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter1d
from scipy.optimize import minimize

from .lqs import ClosedLoopSpec, HumanPolicy, SolverOptions, propagate_moments, solve_lqs
from .model import N_SIGMA, N_STATE, PREF, CostParams, ModelConfig, NoiseParams
from .simulate import TrajectoryEnsemble, empirical_moments

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("trial_id", "time_s", "p_x_m")
COST_NAMES = ("s_v", "s_f", "s_g", "s_ref", "r")


class TrialFormatError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# bounded derivative-free minimization


@dataclass
class DFOptions:
    xatol: float = 1e-6
    max_evals: int = 2000
    initial_step: float = 0.5


def minimize_derivative_free(objective, x0, bounds, opts: DFOptions | None = None):
    """Bounded Nelder-Mead; returns ``(x_best, f_best, evaluations)``.

    Non-finite objective values act as an infinite barrier. Termination is on
    simplex size only (``xatol``) or on the evaluation budget.
    """
    opts = opts or DFOptions()
    x0 = np.asarray(x0, dtype=float)
    lb = np.array([b[0] for b in bounds], dtype=float)
    ub = np.array([b[1] for b in bounds], dtype=float)
    if np.any(lb > ub):
        raise ValueError("inconsistent bounds")
    x0 = np.clip(x0, lb, ub)

    def f(x):
        val = objective(np.clip(x, lb, ub))
        return float(val) if np.isfinite(val) else np.inf

    if not np.isfinite(f(x0)):
        raise ValueError("objective is not finite at the starting point")

    d = len(x0)
    simplex = np.tile(x0, (d + 1, 1))
    for i in range(d):
        step = opts.initial_step
        if x0[i] + step > ub[i]:
            step = -step
        simplex[i + 1, i] = np.clip(x0[i] + step, lb[i], ub[i])
        if simplex[i + 1, i] == x0[i]:
            simplex[i + 1, i] = x0[i] + 1e-3 * (ub[i] - lb[i] or 1.0)
    res = minimize(
        f,
        x0,
        method="Nelder-Mead",
        bounds=list(zip(lb, ub)),
        options={
            "initial_simplex": simplex,
            "xatol": opts.xatol,
            "fatol": np.inf,
            "maxfev": opts.max_evals,
            "adaptive": d > 3,
        },
    )
    return np.clip(res.x, lb, ub), float(res.fun), int(res.nfev)


# --------------------------------------------------------------------------- #
# loading and preprocessing


def _smoothed_velocity(p: np.ndarray, dt: float) -> np.ndarray:
    v = np.gradient(p, dt)
    return uniform_filter1d(v, size=5, mode="nearest")


def load_trials(path, dt: float | None = None, N: int | None = None, resample: bool = False) -> TrajectoryEnsemble:
    """Read an ensemble or reduced measured CSV into a uniform ensemble.

    Velocity is differentiated (with 5-sample smoothing) when absent. When
    ``dt`` is given the sampling interval must equal it unless ``resample``.
    With ``N`` given, trials are cropped (or held at their last sample) to
    ``N + 1`` samples; otherwise all trials must have equal length.
    """
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise TrialFormatError(f"{path}: empty trials file") from exc
    for col in REQUIRED_COLUMNS:
        if col not in df.columns:
            raise TrialFormatError(f"{path}: missing required column '{col}'")
    if df.empty:
        raise TrialFormatError(f"{path}: no data rows")
    numeric = [c for c in ("trial_id", "time_s", "p_x_m", "v_x_mps", "f_x_N", "g_x", "p_ref_m") if c in df.columns]
    for col in numeric:
        vals = pd.to_numeric(df[col], errors="coerce")
        must_be_finite = col in REQUIRED_COLUMNS
        bad = vals.isna() & (df[col].notna() | must_be_finite)
        bad |= ~np.isfinite(vals.fillna(0.0))
        if bad.any():
            rows = (np.nonzero(bad.to_numpy())[0] + 2).tolist()[:10]
            raise TrialFormatError(f"{path}: non-numeric or non-finite '{col}' at rows {rows}")
        df[col] = vals

    trials = []
    for tid, g in df.groupby("trial_id", sort=True):
        g = g.sort_values("time_s")
        t = g["time_s"].to_numpy()
        if len(t) < 2:
            raise TrialFormatError(f"{path}: trial {tid} has fewer than 2 samples")
        steps = np.diff(t)
        h = float(np.median(steps))
        uniform = h > 0 and np.allclose(steps, h, rtol=1e-6, atol=1e-9)
        if not uniform and not resample:
            raise TrialFormatError(f"{path}: trial {tid} is not uniformly sampled")
        target_dt = dt if dt is not None else h
        cols = {c: g[c].to_numpy() for c in g.columns}
        if (not uniform or not np.isclose(h, target_dt, rtol=1e-6)) and not resample:
            raise TrialFormatError(
                f"{path}: trial {tid} sampled at {h:g} s but the model step is {target_dt:g} s (enable resampling)"
            )
        if resample:
            t_new = t[0] + target_dt * np.arange(int(np.floor((t[-1] - t[0]) / target_dt + 1e-9)) + 1)
            cols = {c: np.interp(t_new, t, v) if c in numeric else v[: len(t_new)] for c, v in cols.items()}
        p = cols["p_x_m"]
        v = cols["v_x_mps"] if "v_x_mps" in cols else _smoothed_velocity(p, target_dt)
        X = np.full((len(p), N_STATE), np.nan)
        X[:, 0], X[:, 1] = p, v
        if "f_x_N" in cols:
            X[:, 2] = cols["f_x_N"]
        if "g_x" in cols:
            X[:, 3] = cols["g_x"]
        if "p_ref_m" in cols:
            X[:, PREF] = cols["p_ref_m"]
        uH = cols.get("u_H", np.full(len(p), np.nan))
        uA = cols.get("u_A", np.full(len(p), np.nan))
        trials.append((X, np.asarray(uH, float), np.asarray(uA, float), target_dt))

    dts = {round(tr[3], 12) for tr in trials}
    if len(dts) > 1:
        raise TrialFormatError(f"{path}: trials use different sampling intervals {sorted(dts)}")
    step = trials[0][3]
    if N is None:
        lengths = {len(tr[0]) for tr in trials}
        if len(lengths) > 1:
            raise TrialFormatError(f"{path}: trials have unequal lengths {sorted(lengths)}; pass N to crop")
        N = lengths.pop() - 1
    states = np.stack([_fit_length(tr[0], N + 1) for tr in trials])
    uH = np.stack([_fit_length(tr[1][:, None], N + 1)[:-1, 0] for tr in trials])
    uA = np.stack([_fit_length(tr[2][:, None], N + 1)[:-1, 0] for tr in trials])
    return TrajectoryEnsemble(states, uH, uA, None, step, None, {"source": str(path)})


def _fit_length(X: np.ndarray, length: int) -> np.ndarray:
    if len(X) >= length:
        return X[:length].copy()
    pad = np.repeat(X[-1:], length - len(X), axis=0)
    if X.shape[1] == N_STATE:
        pad[:, 1] = 0.0
    return np.vstack([X, pad])


@dataclass
class SegmentOptions:
    onset_fraction: float = 0.1  # of the trial's peak speed along the movement
    rest_tol_p_m: float = 1e-6
    rest_tol_v_mps: float = 1e-4
    min_travel_fraction: float = 0.5


def segment_and_align(
    ensemble: TrajectoryEnsemble,
    start_m: float,
    goal_m: float,
    N: int,
    task_start_m: float = 0.0,
    opts: SegmentOptions | None = None,
) -> TrajectoryEnsemble:
    """Keep start->goal movements, crop each from onset, shift into the task frame.

    A trial needs its speed along the movement direction to cross
    ``onset_fraction`` of its peak. The onset is the last sample before the
    state first leaves its initial resting values (within the rest
    tolerances), capped at the threshold crossing. Positions are shifted by
    ``task_start_m - start_m`` and the reference channel is set to the goal
    in the task frame.
    """
    opts = opts or SegmentOptions()
    direction = np.sign(goal_m - start_m)
    if direction == 0:
        raise ValueError("start and goal coincide")
    distance = abs(goal_m - start_m)
    keep, onsets = [], []
    dropped = other = 0
    for i in range(len(ensemble)):
        X = ensemble.states[i]
        p, v = X[:, 0], X[:, 1]
        if not np.max(np.abs(v)) > opts.rest_tol_v_mps:
            dropped += 1  # never leaves rest
            continue
        if (p[-1] - p[0]) * direction < opts.min_travel_fraction * distance:
            other += 1  # other direction or incomplete movement
            continue
        vd = v * direction
        crossing = np.nonzero(vd >= opts.onset_fraction * np.max(vd))[0]
        k_cross = int(crossing[0])
        moved = (np.abs(p - p[0]) > opts.rest_tol_p_m) | (np.abs(v - v[0]) > opts.rest_tol_v_mps)
        k_move = int(np.argmax(moved)) if moved.any() else k_cross
        onset = max(0, min(k_move - 1, k_cross))
        keep.append(i)
        onsets.append(onset)
    if dropped:
        warnings.warn(f"{dropped} trial(s) without detectable onset dropped", RuntimeWarning)
    if not keep:
        raise ValueError("no trial matches the requested direction")

    shift = task_start_m - start_m
    goal_task = goal_m + shift
    states, uH, uA = [], [], []
    for i, k in zip(keep, onsets):
        X = _fit_length(ensemble.states[i, k:], N + 1)
        X[:, 0] += shift
        X[:, PREF] = goal_task
        states.append(X)
        uH.append(_fit_length(ensemble.u_H[i, k:, None], N)[:, 0])
        uA.append(_fit_length(ensemble.u_A[i, k:, None], N)[:, 0])
    meta = dict(ensemble.metadata, onsets=onsets, kept=keep, dropped_no_onset=dropped, other_direction=other)
    return TrajectoryEnsemble(np.stack(states), np.stack(uH), np.stack(uA), None, ensemble.dt, ensemble.seed, meta)


# --------------------------------------------------------------------------- #
# identification


@dataclass
class IdentificationConfig:
    """Free parameters, bounds, start point and effort budget.

    Cost parameters and noise scales are searched in log10 units; a lower
    bound stands in for zero. The position-error terminal weight is pinned
    to 1 to fix the scale gauge.
    """

    free_cost: tuple = ("s_v", "s_f", "r")
    cost_log10_bounds: dict = field(
        default_factory=lambda: {"s_v": (-6.0, 4.0), "s_f": (-6.0, 4.0), "s_g": (-6.0, 4.0), "s_ref": (-6.0, 4.0), "r": (-14.0, -2.0)}
    )
    free_sigma: tuple = tuple(range(1, N_SIGMA + 1))  # 1-based noise indices
    sigma_log10_bounds: tuple = (-8.0, 1.0)
    cost_start: CostParams = field(default_factory=lambda: CostParams((1.0, 1.0, 1.0, 0.0, 0.0), r_effort=1e-8))
    sigma_start: tuple = (1e-3,) * 7 + (0.5, 1e-3)
    outer_iterations: int = 8
    outer_tol: float = 0.01
    w_p: float = 1.0  # 1/m^2
    w_v: float = 0.1  # s^2/m^2
    w_var_v: float = 0.1
    mean_scale_m: float = 1e-3
    var_floor: float = 1e-12  # smallest variance normalizer, m^2 or (m/s)^2
    cost_level: DFOptions = field(default_factory=lambda: DFOptions(xatol=1e-3, max_evals=300, initial_step=0.5))
    noise_level: DFOptions = field(default_factory=lambda: DFOptions(xatol=1e-3, max_evals=900, initial_step=0.5))
    solver_tol: float = 1e-6
    sensitivity_step: float = 0.1
    flat_tol: float = 1e-4
    prune_tol: float = 1e-6  # relative joint increase allowed when moving a flat parameter to its lower bound

    def __post_init__(self):
        if self.outer_iterations < 1:
            raise ValueError("outer_iterations must be >= 1")
        bad = [n for n in self.free_cost if n not in COST_NAMES]
        if bad:
            raise ValueError(f"unknown cost parameters {bad}")
        if any(not 1 <= i <= N_SIGMA for i in self.free_sigma):
            raise ValueError("free_sigma entries must be in 1..9")
        lo, hi = self.sigma_log10_bounds
        if lo > hi or any(b[0] > b[1] for b in self.cost_log10_bounds.values()):
            raise ValueError("inconsistent bounds")


@dataclass
class IdentificationResult:
    s_hat: CostParams
    sigma_hat: NoiseParams
    mean_fit_rmse_m: float
    var_fit_rmse_m2: float
    converged: bool
    objective: float
    traces: list = field(default_factory=list)
    sensitivity: dict = field(default_factory=dict)
    flat_parameters: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "s_terminal": list(self.s_hat.s_terminal),
            "s_running": list(self.s_hat.s_running),
            "r_effort": self.s_hat.r_effort,
            "sigma": list(self.sigma_hat.sigma),
            "mean_fit_rmse_m": self.mean_fit_rmse_m,
            "var_fit_rmse_m2": self.var_fit_rmse_m2,
            "converged": self.converged,
            "objective": self.objective,
            "flat_parameters": self.flat_parameters,
            "sensitivity": self.sensitivity,
            "traces": self.traces,
        }


@dataclass(frozen=True, eq=False)
class DataSummary:
    mean_p: np.ndarray
    mean_v: np.ndarray
    var_p: np.ndarray
    var_v: np.ndarray

    @classmethod
    def from_ensemble(cls, ensemble: TrajectoryEnsemble) -> "DataSummary":
        mom = empirical_moments(ensemble)
        return cls(mom.mean_p, mom.mean_v, mom.var_p, mom.var_v)


def _cost_from_vector(base: CostParams, names, x) -> CostParams:
    s = list(base.s_terminal)
    r = base.r_effort
    for name, val in zip(names, x):
        if name == "r":
            r = 10.0**val
        else:
            s[1 + COST_NAMES.index(name)] = 10.0**val
    s[0] = 1.0
    return CostParams(tuple(s), base.s_running, r)


def _cost_vector(cost: CostParams, names, bounds) -> np.ndarray:
    out = []
    for name in names:
        val = cost.r_effort if name == "r" else cost.s_terminal[1 + COST_NAMES.index(name)]
        lo, hi = bounds[name]
        out.append(np.clip(np.log10(val) if val > 0 else lo, lo, hi))
    return np.array(out)


def _sigma_from_vector(base: NoiseParams, idx, x) -> NoiseParams:
    s = list(base.sigma)
    for i, val in zip(idx, x):
        s[i - 1] = 10.0**val
    return NoiseParams(tuple(s))


def _sigma_vector(sigma: NoiseParams, idx, bounds) -> np.ndarray:
    lo, hi = bounds
    return np.array([np.clip(np.log10(sigma.sigma[i - 1]) if sigma.sigma[i - 1] > 0 else lo, lo, hi) for i in idx])


def start_point(template: ModelConfig, cfg: IdentificationConfig) -> tuple[CostParams, NoiseParams]:
    """Free parameters from the configured start guess, frozen ones from the template."""
    s = list(template.cost.s_terminal)
    r = template.cost.r_effort
    for name in cfg.free_cost:
        if name == "r":
            r = cfg.cost_start.r_effort
        else:
            k = 1 + COST_NAMES.index(name)
            s[k] = cfg.cost_start.s_terminal[k]
    s[0] = 1.0
    sigma = list(template.noise.sigma)
    for i in cfg.free_sigma:
        sigma[i - 1] = cfg.sigma_start[i - 1]
    return CostParams(tuple(s), template.cost.s_running, r), NoiseParams(tuple(sigma))


class _ModelEvaluator:
    """Solve + propagate for candidate parameters, warm-starting the solver."""

    def __init__(self, template: ModelConfig, solver_tol: float):
        self.template = template
        self.model = template.system()
        self.task = template.task()
        self.opts = SolverOptions(tol=solver_tol, max_iter=200)
        self._warm: HumanPolicy | None = None

    def moments(self, cost: CostParams, sigma: NoiseParams, warm=True):
        cfg = self.template.replace(cost=cost, noise=sigma)
        noise = cfg.noise_model(self.model)
        cm = cfg.cost_matrices()
        pol = solve_lqs(self.model, noise, cm, self.task, self.opts, self._warm if warm else None)
        if not (np.all(np.isfinite(pol.L)) and np.all(np.isfinite(pol.K))):
            return None
        if pol.converged:
            self._warm = pol
        return propagate_moments(ClosedLoopSpec(self.model, noise, cm, pol, self.task))


def _mean_objective(mom, data: DataSummary, cfg: IdentificationConfig) -> float:
    if mom is None:
        return np.inf
    ep = mom.mean_p - data.mean_p
    ev = mom.mean_v - data.mean_v
    return float(np.mean(cfg.w_p * ep**2 + cfg.w_v * ev**2)) / cfg.mean_scale_m**2


def _var_objective(mom, data: DataSummary, cfg: IdentificationConfig) -> float:
    if mom is None:
        return np.inf
    sp = max(float(np.max(data.var_p)), cfg.var_floor)
    sv = max(float(np.max(data.var_v)), cfg.var_floor)
    ep = (mom.var_p - data.var_p) / sp
    ev = (mom.var_v - data.var_v) / sv
    return float(np.mean(ep**2 + cfg.w_var_v * ev**2))


def _joint_objective(mom, data: DataSummary, cfg: IdentificationConfig) -> float:
    return _mean_objective(mom, data, cfg) + _var_objective(mom, data, cfg)


def fit_errors(mom, data: DataSummary) -> tuple[float, float]:
    """Mean-position RMSE (m) and position-variance RMSE (m^2)."""
    return (
        float(np.sqrt(np.mean((mom.mean_p - data.mean_p) ** 2))),
        float(np.sqrt(np.mean((mom.var_p - data.var_p) ** 2))),
    )


def identify(
    ensemble: TrajectoryEnsemble | DataSummary,
    template: ModelConfig,
    config: IdentificationConfig | None = None,
) -> IdentificationResult:
    """Alternate cost-level and noise-level fits; see the module docstring.

    A level's result is accepted only if it does not increase the joint
    objective (mean term + variance term), so the outer loop is monotone.
    Data with identically zero variance sets every free noise scale to zero
    (the limit of its lower bound) and fits the cost alone. A final pass moves parameters that
    have no measurable effect to their lower bound.
    """
    cfg = config or IdentificationConfig()
    if isinstance(ensemble, TrajectoryEnsemble):
        if len(ensemble) < 2:
            raise ValueError("identification needs at least 2 trials")
        data = DataSummary.from_ensemble(ensemble)
    else:
        data = ensemble
    if len(data.mean_p) != template.discretization.horizon_steps + 1:
        raise ValueError(
            f"data has {len(data.mean_p) - 1} steps but the model horizon is {template.discretization.horizon_steps}"
        )
    ev = _ModelEvaluator(template, cfg.solver_tol)
    cost, sigma = start_point(template, cfg)
    sig_idx = tuple(cfg.free_sigma)
    if max(float(np.max(data.var_p)), float(np.max(data.var_v))) <= 1e-30:
        # deterministic data: the only consistent noise model is none at all
        log.info("data variance is zero; free noise scales set to zero")
        sigma = NoiseParams(tuple(0.0 if i + 1 in sig_idx else v for i, v in enumerate(sigma.sigma)))
        sig_idx = ()
    sig_bounds = [cfg.sigma_log10_bounds] * len(sig_idx)
    cost_bounds = [cfg.cost_log10_bounds[n] for n in cfg.free_cost]

    def joint(c, s):
        return _joint_objective(ev.moments(c, s), data, cfg)

    J = joint(cost, sigma)
    traces = [{"outer": 0, "level": "start", "joint": J, "evaluations": 1}]
    converged = False
    for outer in range(1, cfg.outer_iterations + 1):
        J_prev = J
        if cfg.free_cost:
            fa = lambda x: joint(_cost_from_vector(cost, cfg.free_cost, x), sigma)  # noqa: E731
            x, fbest, nfev = minimize_derivative_free(
                fa, _cost_vector(cost, cfg.free_cost, cfg.cost_log10_bounds), cost_bounds, cfg.cost_level
            )
            cand = _cost_from_vector(cost, cfg.free_cost, x)
            Jc = joint(cand, sigma)
            accepted = Jc <= J
            if accepted:
                cost, J = cand, Jc
            traces.append({"outer": outer, "level": "cost", "level_objective": fbest, "joint": J,
                           "evaluations": nfev, "accepted": bool(accepted)})
            log.info("outer %d cost level: f=%.4g joint=%.4g (%d evals)", outer, fbest, J, nfev)
        if sig_idx:
            fb = lambda x: joint(cost, _sigma_from_vector(sigma, sig_idx, x))  # noqa: E731
            x, fbest, nfev = minimize_derivative_free(fb, _sigma_vector(sigma, sig_idx, cfg.sigma_log10_bounds), sig_bounds, cfg.noise_level)
            cand = _sigma_from_vector(sigma, sig_idx, x)
            Js = joint(cost, cand)
            accepted = Js <= J
            if accepted:
                sigma, J = cand, Js
            traces.append({"outer": outer, "level": "noise", "level_objective": fbest, "joint": J,
                           "evaluations": nfev, "accepted": bool(accepted)})
            log.info("outer %d noise level: f=%.4g joint=%.4g (%d evals)", outer, fbest, J, nfev)
        if J_prev - J <= cfg.outer_tol * max(J_prev, 1e-300):
            converged = True
            break

    cost, sigma, J, pruned = _prune(joint, cost, sigma, J, cfg, sig_idx)
    if pruned:
        traces.append({"outer": outer, "level": "prune", "joint": J, "evaluations": len(cfg.free_cost) + len(sig_idx),
                       "pruned": pruned})
    sensitivity, flat = _sensitivity(ev, cost, sigma, data, cfg, sig_idx)
    ev_full = _ModelEvaluator(template, 1e-8)
    final = ev_full.moments(cost, sigma, warm=False)
    mean_rmse, var_rmse = fit_errors(final, data)
    return IdentificationResult(cost, sigma, mean_rmse, var_rmse, converged, J, traces, sensitivity, flat)


def _prune(joint, cost, sigma, J, cfg, sig_idx):
    """Move parameters without measurable effect to their lower bound.

    Each move may raise the joint objective by at most ``prune_tol`` relative.
    """
    pruned = []
    for k, name in enumerate(cfg.free_cost):
        x = _cost_vector(cost, cfg.free_cost, cfg.cost_log10_bounds)
        lo = cfg.cost_log10_bounds[name][0]
        if x[k] <= lo:
            continue
        x[k] = lo
        cand = _cost_from_vector(cost, cfg.free_cost, x)
        Jc = joint(cand, sigma)
        if Jc <= J * (1.0 + cfg.prune_tol):
            cost, J = cand, Jc
            pruned.append(name)
    lo = cfg.sigma_log10_bounds[0]
    for i in sig_idx:
        if sigma.sigma[i - 1] <= 10.0**lo:
            continue
        cand = _sigma_from_vector(sigma, (i,), [lo])
        Jc = joint(cost, cand)
        if Jc <= J * (1.0 + cfg.prune_tol):
            sigma, J = cand, Jc
            pruned.append(f"sigma_{i}")
    return cost, sigma, J, pruned


def _sensitivity(ev, cost, sigma, data, cfg, sig_idx):
    """Relative objective change for a +-step (log10 units) in each free parameter."""
    base = _joint_objective(ev.moments(cost, sigma), data, cfg)
    h = cfg.sensitivity_step
    out, flat = {}, []
    for k, name in enumerate(cfg.free_cost):
        x = _cost_vector(cost, cfg.free_cost, cfg.cost_log10_bounds)
        vals = []
        for sgn in (1, -1):
            xp = x.copy()
            xp[k] += sgn * h
            vals.append(_joint_objective(ev.moments(_cost_from_vector(cost, cfg.free_cost, xp), sigma), data, cfg))
        rel = float((max(vals) - base) / max(base, 1e-300))
        out[name] = rel
        if abs(rel) < cfg.flat_tol:
            flat.append(name)
    for k, i in enumerate(sig_idx):
        x = _sigma_vector(sigma, sig_idx, cfg.sigma_log10_bounds)
        vals = []
        for sgn in (1, -1):
            xp = x.copy()
            xp[k] += sgn * h
            vals.append(_joint_objective(ev.moments(cost, _sigma_from_vector(sigma, sig_idx, xp)), data, cfg))
        rel = float((max(vals) - base) / max(base, 1e-300))
        out[f"sigma_{i}"] = rel
        if abs(rel) < cfg.flat_tol:
            flat.append(f"sigma_{i}")
    return out, flat


def identified_config(template: ModelConfig, result: IdentificationResult) -> ModelConfig:
    return template.replace(cost=result.s_hat, noise=result.sigma_hat)


def save_result(result: IdentificationResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2) + "\n")


def load_result(path) -> tuple[CostParams, NoiseParams, dict]:
    d = json.loads(Path(path).read_text())
    cost = CostParams(tuple(d["s_terminal"]), tuple(d.get("s_running", (0.0,) * N_STATE)), d["r_effort"])
    return cost, NoiseParams(tuple(d["sigma"])), d
