"""Variability-respecting automation synthesis.

The automation gains are finite-horizon LQR gains on the human-closed mean
dynamics ``A - B_H L_H,t`` with input ``B_A``. The state cost penalizes the
position error at every step and reuses the human's terminal weights at the
end. A scalar effort weight ``rho`` is searched so that the peak position
variance of the joint loop lands on ``kappa`` times the human-only peak.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .lqs import (
    ClosedLoopSpec,
    CostMatrices,
    GainSchedule,
    HumanPolicy,
    MomentTrajectory,
    propagate_moments,
    solve_lqr_deterministic,
)
from .model import NoiseModel, SystemModel, TaskSpec, error_map
from .simulate import TaskMetrics, compute_metrics


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class VarianceTarget:
    mode: str = "match"
    kappa: float = 1.0

    def __post_init__(self):
        if self.mode not in ("match", "reduce"):
            raise ValueError(f"mode must be 'match' or 'reduce', got {self.mode!r}")
        if not 0 < self.kappa <= 1:
            raise ValueError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.mode == "match" and self.kappa != 1.0:
            raise ValueError("match mode requires kappa = 1")

    @classmethod
    def match(cls) -> "VarianceTarget":
        return cls("match", 1.0)

    @classmethod
    def reduce(cls, kappa: float = 0.5) -> "VarianceTarget":
        return cls("reduce", kappa)


@dataclass
class SynthesisOptions:
    log10_rho_min: float = -12.0
    log10_rho_max: float = 12.0
    grid_points: int = 25
    bisection_steps: int = 40
    var_tol: float = 0.02
    running_weight: float = 1.0
    rho_fixed: float | None = None
    reach_tol_m: float = 0.01


@dataclass(frozen=True, eq=False)
class AutomationPolicy:
    gains: GainSchedule
    rho: float
    achieved_peak_variance_m2: float
    baseline_peak_variance_m2: float
    target: VarianceTarget

    def to_dict(self) -> dict:
        N, m, n = self.gains.L.shape
        return {
            "mode": self.target.mode,
            "kappa": self.target.kappa,
            "rho": self.rho,
            "achieved_peak_variance_m2": self.achieved_peak_variance_m2,
            "baseline_peak_variance_m2": self.baseline_peak_variance_m2,
            "N": N,
            "m": m,
            "n": n,
            "gains": self.gains.L.reshape(N, m * n).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AutomationPolicy":
        L = np.array(d["gains"], dtype=float)
        n = int(d.get("n", 5))
        m = int(d.get("m", 1))
        return cls(
            gains=GainSchedule(L.reshape(L.shape[0], m, n), "automation"),
            rho=float(d["rho"]),
            achieved_peak_variance_m2=float(d["achieved_peak_variance_m2"]),
            baseline_peak_variance_m2=float(d["baseline_peak_variance_m2"]),
            target=VarianceTarget(d["mode"], float(d["kappa"])),
        )


@dataclass
class SynthesisReport:
    trace: list = field(default_factory=list)  # (rho, peak_var) in evaluation order
    bracket_status: str = "unbracketed"
    baseline_peak_variance_m2: float = float("nan")
    monotone: bool = True
    target_value_m2: float = float("nan")

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trace, columns=["rho", "peak_var"])


def automation_cost(human_cost: CostMatrices, rho: float, running_weight: float = 1.0) -> CostMatrices:
    """Position-error penalty at every step plus the human's terminal weights."""
    e = error_map()[0]
    s_pos = human_cost.Q_N[0, 0]
    Q_t = running_weight * s_pos * np.outer(e, e)
    return CostMatrices(Q_t=Q_t, Q_N=human_cost.Q_N, R=np.array([[float(rho)]]))


def human_closed_dynamics(model: SystemModel, human: HumanPolicy) -> np.ndarray:
    return model.A[None] - np.einsum("ij,tjk->tik", model.B_H, human.L)


def automation_gains(model, human, human_cost, rho, running_weight=1.0) -> GainSchedule:
    cost = automation_cost(human_cost, rho, running_weight)
    return solve_lqr_deterministic(model, cost, "automation", A_seq=human_closed_dynamics(model, human))


def synthesize(
    model: SystemModel,
    noise: NoiseModel,
    human: HumanPolicy,
    human_cost: CostMatrices,
    task: TaskSpec,
    target: VarianceTarget,
    opts: SynthesisOptions | None = None,
) -> tuple[AutomationPolicy, SynthesisReport]:
    """Pick the effort weight whose joint peak position variance meets the target.

    Peak variance falls as ``rho`` shrinks (more authority). Among the weights
    whose peak variance lies within ``var_tol * baseline`` of
    ``kappa * baseline`` the search returns the most assistive one, i.e. it
    aims at the lower part of the tolerance band. Without this, match mode
    would drift to ``rho -> inf`` and provide no assistance at all.
    """
    opts = opts or SynthesisOptions()
    if not human.converged:
        raise SynthesisError("human policy did not converge; refusing to synthesize against it")
    base_spec = ClosedLoopSpec(model, noise, human_cost, human, task)
    baseline = float(np.max(propagate_moments(base_spec).var_p))
    report = SynthesisReport(baseline_peak_variance_m2=baseline)

    def peak(log_rho):
        LA = automation_gains(model, human, human_cost, 10.0**log_rho, opts.running_weight)
        v = float(np.max(propagate_moments(base_spec.with_automation(LA)).var_p))
        report.trace.append((10.0**log_rho, v))
        return v, LA

    def result(log_rho, v, LA, status):
        report.bracket_status = status
        policy = AutomationPolicy(LA, float(10.0**log_rho), v, baseline, target)
        return policy, report

    if opts.rho_fixed is not None:
        lr = float(np.log10(opts.rho_fixed))
        v, LA = peak(lr)
        return result(lr, v, LA, "fixed")

    aim = (target.kappa - 0.75 * opts.var_tol) * baseline
    accept = 0.25 * opts.var_tol * baseline
    report.target_value_m2 = aim

    grid = np.linspace(opts.log10_rho_min, opts.log10_rho_max, opts.grid_points)
    evals = [peak(lr) for lr in grid]
    values = np.array([v for v, _ in evals])
    report.monotone = bool(np.all(np.diff(values) >= -1e-12 * baseline))

    close = np.nonzero(np.abs(values - aim) <= accept)[0]
    below = values <= aim
    crossing = [i for i in range(len(grid) - 1) if below[i] and not below[i + 1]]
    if crossing:
        i = crossing[0]
        if len(close) and close[0] <= i + 1:
            j = int(close[0])
            return result(grid[j], values[j], evals[j][1], "grid")
        lo, hi = grid[i], grid[i + 1]
        best = min(((abs(values[k] - aim), grid[k], values[k], evals[k][1]) for k in (i, i + 1)), key=lambda r: r[0])
        for _ in range(opts.bisection_steps):
            mid = 0.5 * (lo + hi)
            v, LA = peak(mid)
            if abs(v - aim) < best[0]:
                best = (abs(v - aim), mid, v, LA)
            if abs(v - aim) <= accept:
                break
            if v <= aim:
                lo = mid
            else:
                hi = mid
        _, lr, v, LA = best
        return result(lr, v, LA, "bisection" if best[0] <= accept else "bisection_unconverged")
    if below.all():
        k = len(grid) - 1
        return result(grid[k], values[k], evals[k][1], "above_range")
    k = 0
    return result(grid[k], values[k], evals[k][1], "below_range")


def evaluate_joint(
    model: SystemModel,
    noise: NoiseModel,
    human: HumanPolicy,
    automation: AutomationPolicy | GainSchedule | None,
    task: TaskSpec,
    human_cost: CostMatrices | None = None,
    reach_tol_m: float = 0.01,
) -> tuple[MomentTrajectory, TaskMetrics]:
    if isinstance(automation, AutomationPolicy):
        automation = automation.gains
    if human_cost is None:
        z = np.zeros((model.n, model.n))
        human_cost = CostMatrices(z, z, np.eye(model.m_H))
    spec = ClosedLoopSpec(model, noise, human_cost, human, task, automation)
    mom = propagate_moments(spec)
    return mom, compute_metrics(mom, task, reach_tol_m)


def save_policy(policy: AutomationPolicy, path) -> None:
    Path(path).write_text(json.dumps(policy.to_dict()) + "\n")


def load_policy(path) -> AutomationPolicy:
    return AutomationPolicy.from_dict(json.loads(Path(path).read_text()))
