"""Seeded Monte-Carlo rollouts, ensemble statistics and task metrics."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .kernel import ClosedLoopStepper, augmented_mean, matmul_rows, sqrt_psd
from .lqs import ClosedLoopSpec, MomentTrajectory
from .model import PREF

ENSEMBLE_COLUMNS = ["trial_id", "t_index", "time_s", "p_x_m", "v_x_mps", "f_x_N", "g_x", "p_ref_m", "u_H", "u_A"]
MOMENT_COLUMNS = ["t_index", "time_s", "mean_p_m", "var_p_m2", "mean_v", "var_v"]


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    x: np.ndarray  # (N+1, n)
    u_H: np.ndarray  # (N,)
    u_A: np.ndarray  # (N,)
    y_H: np.ndarray  # (N, r_H)


@dataclass(eq=False)
class TrajectoryEnsemble:
    """Trials stored as stacked arrays; ``trials`` gives per-trial views."""

    states: np.ndarray  # (T, N+1, n)
    u_H: np.ndarray  # (T, N)
    u_A: np.ndarray  # (T, N)
    y_H: np.ndarray | None  # (T, N, r_H) or None for measured data
    dt: float
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        T, N1 = self.states.shape[:2]
        if self.u_H.shape != (T, N1 - 1) or self.u_A.shape != (T, N1 - 1):
            raise ValueError("command arrays inconsistent with state array")

    def __len__(self):
        return self.states.shape[0]

    @property
    def N(self) -> int:
        return self.states.shape[1] - 1

    @property
    def trials(self) -> list[Trajectory]:
        y = self.y_H
        return [
            Trajectory(self.states[i], self.u_H[i], self.u_A[i], None if y is None else y[i])
            for i in range(len(self))
        ]

    def subset(self, idx) -> "TrajectoryEnsemble":
        idx = np.asarray(idx)
        y = None if self.y_H is None else self.y_H[idx]
        return TrajectoryEnsemble(
            self.states[idx], self.u_H[idx], self.u_A[idx], y, self.dt, self.seed, dict(self.metadata)
        )


@dataclass(frozen=True)
class TaskMetrics:
    peak_position_variance_m2: float
    time_to_reach_s: float | None
    endpoint_variance_m2: float
    endpoint_bias_m: float

    def to_dict(self) -> dict:
        return asdict(self)


def noise_free_mean(spec: ClosedLoopSpec) -> np.ndarray:
    """Mean plant trajectory (N+1, n) computed with the rollout kernel."""
    return augmented_mean(spec)[:, : spec.model.n]


# --------------------------------------------------------------------------- #
# rollouts


def trial_rng(seed: int, trial_index: int) -> np.random.Generator:
    """Independent substream for one trial, a hash of (seed, trial_index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(trial_index)]))


def _draw_trial_noise(seed, idx, n, N, n_draws):
    rng = trial_rng(seed, idx)
    z = rng.standard_normal(n + N * n_draws)
    return z[:n], z[n:].reshape(N, n_draws)


def _rollout_chunk(spec, st, seed, indices, store_obs):
    n, N = spec.model.n, spec.model.N
    T = len(indices)
    z0 = np.empty((T, n))
    Z = np.empty((T, N, st.n_draws))
    for j, i in enumerate(indices):
        z0[j], Z[j] = _draw_trial_noise(seed, i, n, N, st.n_draws)
    X0 = spec.task.initial_state + matmul_rows(z0, sqrt_psd(spec.task.initial_covariance))
    states = np.empty((T, N + 1, n))
    uH = np.empty((T, N))
    uA = np.empty((T, N))
    y_H = np.empty((T, N, spec.model.r_H)) if store_obs else None
    states[:, 0] = X0
    X = X0
    Xh = np.broadcast_to(spec.task.initial_state, (T, n)).copy()
    for t in range(N):
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            X, Xh, u, ua, y = st.step(t, X, Xh, Z[:, t])
        if not np.all(np.isfinite(X)):
            bad = int(indices[int(np.argmax(~np.all(np.isfinite(X), axis=1)))])
            raise SimulationError(f"non-finite state in trial {bad} at step {t + 1}")
        states[:, t + 1] = X
        uH[:, t] = u[:, 0]
        uA[:, t] = ua[:, 0]
        if store_obs:
            y_H[:, t] = y
    return states, uH, uA, y_H


def spec_fingerprint(spec: ClosedLoopSpec) -> dict:
    def digest(*arrays):
        h = hashlib.sha256()
        for a in arrays:
            h.update(np.ascontiguousarray(a, dtype=float).tobytes())
        return h.hexdigest()[:16]

    nz = spec.noise
    model_hash = digest(spec.model.A, spec.model.B_H, spec.model.B_A, nz.Omega_alpha, nz.Omega_beta, *nz.C_list, *nz.D_list)
    policy = [spec.human.L, spec.human.K] + ([] if spec.automation is None else [spec.automation.L])
    return {"model_hash": model_hash, "policy_hash": digest(*policy)}


def rollout_ensemble(
    spec: ClosedLoopSpec,
    n_trials: int,
    seed: int,
    workers: int = 1,
    chunk_size: int = 2048,
    store_observations: bool = True,
) -> TrajectoryEnsemble:
    """Simulate ``n_trials`` independent closed-loop trials.

    Trial ``i`` draws all of its noise from ``trial_rng(seed, i)``; the output
    is identical for any ``workers`` / ``chunk_size`` setting.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    st = ClosedLoopStepper(spec)
    chunks = [np.arange(s, min(s + chunk_size, n_trials)) for s in range(0, n_trials, chunk_size)]
    run = lambda idx: _rollout_chunk(spec, st, seed, idx, store_observations)  # noqa: E731
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(idx) for idx in chunks]
    states = np.concatenate([p[0] for p in parts])
    uH = np.concatenate([p[1] for p in parts])
    uA = np.concatenate([p[2] for p in parts])
    y = np.concatenate([p[3] for p in parts]) if store_observations else None
    return TrajectoryEnsemble(states, uH, uA, y, spec.model.dt, int(seed), spec_fingerprint(spec))


def empirical_moments(ensemble: TrajectoryEnsemble) -> MomentTrajectory:
    if len(ensemble) < 2:
        raise ValueError("empirical moments need at least 2 trials")
    X = ensemble.states
    mean = X.mean(axis=0)
    dev = X - mean
    cov = np.einsum("tki,tkj->kij", dev, dev) / (len(ensemble) - 1)
    return MomentTrajectory(mean, cov, ensemble.dt, X.shape[2])


def standard_errors_var(ensemble: TrajectoryEnsemble, coord: int = 0) -> np.ndarray:
    """Standard error of the sample variance of one coordinate at each step."""
    x = ensemble.states[:, :, coord]
    n = x.shape[0]
    dev = x - x.mean(axis=0)
    m2 = (dev**2).mean(axis=0)
    m4 = (dev**4).mean(axis=0)
    return np.sqrt(np.clip(m4 - (n - 3) / (n - 1) * m2**2, 0.0, None) / n)


# --------------------------------------------------------------------------- #
# metrics


def time_to_reach(mean_p: np.ndarray, p_ref: float, tol: float, dt: float) -> float | None:
    """First time after which the mean stays within ``tol`` of ``p_ref``."""
    outside = np.abs(mean_p - p_ref) > tol
    if not outside.any():
        return 0.0
    last_out = int(np.nonzero(outside)[0][-1])
    if last_out == len(mean_p) - 1:
        return None
    return (last_out + 1) * dt


def compute_metrics(moments: MomentTrajectory, task, reach_tol_m: float = 0.01) -> TaskMetrics:
    if not reach_tol_m > 0:
        raise ValueError("reach_tol_m must be positive")
    var_p = moments.var_p
    return TaskMetrics(
        peak_position_variance_m2=float(np.max(var_p)),
        time_to_reach_s=time_to_reach(moments.mean_p, task.p_ref_m, reach_tol_m, moments.dt),
        endpoint_variance_m2=float(var_p[-1]),
        endpoint_bias_m=float(moments.mean_p[-1] - task.p_ref_m),
    )


# --------------------------------------------------------------------------- #
# file formats


def ensemble_frame(ensemble: TrajectoryEnsemble) -> pd.DataFrame:
    T, N1, _ = ensemble.states.shape
    pad = np.full((T, 1), np.nan)
    S = ensemble.states
    return pd.DataFrame(
        {
            "trial_id": np.repeat(np.arange(T), N1),
            "t_index": np.tile(np.arange(N1), T),
            "time_s": np.tile(np.arange(N1) * ensemble.dt, T),
            "p_x_m": S[:, :, 0].ravel(),
            "v_x_mps": S[:, :, 1].ravel(),
            "f_x_N": S[:, :, 2].ravel(),
            "g_x": S[:, :, 3].ravel(),
            "p_ref_m": S[:, :, PREF].ravel(),
            "u_H": np.hstack([ensemble.u_H, pad]).ravel(),
            "u_A": np.hstack([ensemble.u_A, pad]).ravel(),
        },
        columns=ENSEMBLE_COLUMNS,
    )


def write_ensemble_csv(ensemble: TrajectoryEnsemble, path) -> None:
    ensemble_frame(ensemble).to_csv(path, index=False, float_format="%.12g")


def moments_frame(moments: MomentTrajectory) -> pd.DataFrame:
    t = np.arange(moments.N + 1)
    return pd.DataFrame(
        {
            "t_index": t,
            "time_s": t * moments.dt,
            "mean_p_m": moments.mean_p,
            "var_p_m2": moments.var_p,
            "mean_v": moments.mean_v,
            "var_v": moments.var_v,
        },
        columns=MOMENT_COLUMNS,
    )


def write_moments_csv(moments: MomentTrajectory, path) -> None:
    moments_frame(moments).to_csv(path, index=False, float_format="%.12g")


def write_metrics_json(metrics: TaskMetrics, path) -> None:
    Path(path).write_text(json.dumps(metrics.to_dict(), indent=2) + "\n")
