"""Linear-quadratic sensorimotor (LQS) solver and exact moment propagation.

The closed loop is written on the augmented state ``z = [x; xhat]`` where
``xhat`` is the human's internal estimate. Human control is ``u_H = -L_t xhat``
and, when an automation is present, ``u_A = -L_A,t x``. The human estimator is

    xhat_{t+1} = A xhat + B_H u_H + K_t (y_t - H_H xhat)

and never models the automation input.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _core
from .kernel import augmented_mean
from .model import CostMatrices, NoiseModel, SystemModel, TaskSpec

INNOVATION_REG = 1e-12


class SolverError(np.linalg.LinAlgError):
    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step


@dataclass(frozen=True, eq=False)
class GainSchedule:
    """Feedback gains, ``u_t = -L[t] @ state``; ``L`` has shape (N, m, n)."""

    L: np.ndarray
    actor: str = "human"

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        if L.ndim != 3:
            raise ValueError("gain schedule must have shape (N, m, n)")
        if not np.all(np.isfinite(L)):
            raise ValueError("gain schedule contains non-finite entries")
        object.__setattr__(self, "L", L)

    def __len__(self):
        return self.L.shape[0]

    @classmethod
    def zeros(cls, N: int, m: int, n: int, actor: str = "automation") -> "GainSchedule":
        return cls(np.zeros((N, m, n)), actor)


@dataclass(frozen=True, eq=False)
class FilterSchedule:
    K: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim != 3 or not np.all(np.isfinite(K)):
            raise ValueError("filter schedule must be a finite (N, n, r) array")
        object.__setattr__(self, "K", K)


@dataclass(frozen=True, eq=False)
class HumanPolicy:
    gains: GainSchedule
    filter: FilterSchedule
    converged: bool
    residual: float
    iterations: int
    cost_trace: tuple = ()

    @property
    def L(self) -> np.ndarray:
        return self.gains.L

    @property
    def K(self) -> np.ndarray:
        return self.filter.K


@dataclass(frozen=True, eq=False)
class ClosedLoopSpec:
    model: SystemModel
    noise: NoiseModel
    cost: CostMatrices
    human: HumanPolicy
    task: TaskSpec
    automation: GainSchedule | None = None
    automation_in_human_model: bool = False

    def __post_init__(self):
        m, N = self.model, self.model.N
        if self.human.L.shape != (N, m.m_H, m.n):
            raise ValueError(f"human gains have shape {self.human.L.shape}, expected {(N, m.m_H, m.n)}")
        if self.human.K.shape != (N, m.n, m.r_H):
            raise ValueError(f"filter gains have shape {self.human.K.shape}, expected {(N, m.n, m.r_H)}")
        if self.automation is not None and self.automation.L.shape != (N, m.m_A, m.n):
            raise ValueError(
                f"automation gains have shape {self.automation.L.shape}, expected {(N, m.m_A, m.n)}"
            )
        if self.task.initial_state.shape != (m.n,):
            raise ValueError("task initial state has wrong dimension")

    def with_automation(self, automation: GainSchedule | None) -> "ClosedLoopSpec":
        return ClosedLoopSpec(
            self.model, self.noise, self.cost, self.human, self.task, automation, self.automation_in_human_model
        )


@dataclass(frozen=True, eq=False)
class MomentTrajectory:
    """Per-step mean and central covariance of the (possibly augmented) state.

    The first ``n_state`` coordinates are the plant state ``x``.
    """

    mean: np.ndarray
    cov: np.ndarray
    dt: float
    n_state: int = 5
    u_mean: np.ndarray | None = None
    u_second: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.mean.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.N + 1)

    @property
    def mean_p(self) -> np.ndarray:
        return self.mean[:, 0]

    @property
    def var_p(self) -> np.ndarray:
        return self.cov[:, 0, 0]

    @property
    def mean_v(self) -> np.ndarray:
        return self.mean[:, 1]

    @property
    def var_v(self) -> np.ndarray:
        return self.cov[:, 1, 1]

    def state_second_moment(self) -> np.ndarray:
        n = self.n_state
        mu = self.mean[:, :n]
        return self.cov[:, :n, :n] + mu[:, :, None] * mu[:, None, :]


# --------------------------------------------------------------------------- #
# deterministic Riccati recursion


def riccati_gains(A, B: np.ndarray, Q_t: np.ndarray, Q_N: np.ndarray, R: np.ndarray, N: int) -> np.ndarray:
    """Finite-horizon LQR gains for ``x' = A_t x + B u`` with ``u = -L_t x``.

    ``A`` may be a single matrix or a per-step stack of shape (N, n, n).
    """
    A = np.asarray(A, dtype=float)
    A_seq = np.broadcast_to(A, (N,) + A.shape[-2:]) if A.ndim == 2 else A
    n, m = B.shape
    L = np.empty((N, m, n))
    S = np.array(Q_N, dtype=float)
    for t in range(N - 1, -1, -1):
        At = A_seq[t]
        BtS = B.T @ S
        H = R + BtS @ B
        try:
            L[t] = np.linalg.solve(H, BtS @ At)
        except np.linalg.LinAlgError as exc:
            raise SolverError("singular effort Hessian in Riccati recursion", t) from exc
        Acl = At - B @ L[t]
        S = Q_t + L[t].T @ R @ L[t] + Acl.T @ S @ Acl
        S = 0.5 * (S + S.T)
    return L


def solve_lqr_deterministic(
    model: SystemModel,
    cost: CostMatrices,
    actor: str = "human",
    A_seq: np.ndarray | None = None,
) -> GainSchedule:
    """Noise-free gains for the human (input ``B_H``) or the automation (``B_A``).

    ``A_seq`` overrides the plant matrix, e.g. with the human-closed mean dynamics.
    """
    if actor not in ("human", "automation"):
        raise ValueError(f"unknown actor {actor!r}")
    B = model.B_H if actor == "human" else model.B_A
    R = np.atleast_2d(cost.R)
    if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise SolverError("effort weight must be positive definite")
    A = model.A if A_seq is None else A_seq
    return GainSchedule(riccati_gains(A, B, cost.Q_t, cost.Q_N, R, model.N), actor)


# --------------------------------------------------------------------------- #
# moment propagation


def _stack(mats, shape) -> np.ndarray:
    return np.array(mats, dtype=float).reshape((len(mats),) + shape)


def _core_args(model: SystemModel, noise: NoiseModel, L, K, LA=None, efference=False):
    n = model.n
    has_LA = LA is not None
    LA_arr = np.zeros((1, model.m_A, n)) if LA is None else np.ascontiguousarray(LA, dtype=float)
    return (
        model.A,
        model.B_H,
        model.H_H,
        noise.Omega_alpha,
        noise.Omega_beta,
        _stack(noise.C_list, (n, model.m_H)),
        _stack(noise.D_list, (model.r_H, n)),
        np.ascontiguousarray(L, dtype=float),
        np.ascontiguousarray(K, dtype=float),
        model.B_A,
        LA_arr,
        has_LA,
        bool(efference),
    )


def _initial_moments(task: TaskSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    mu = np.concatenate([task.initial_state, task.initial_state])
    S = np.zeros((2 * n, 2 * n))
    S[:n, :n] = task.initial_covariance
    return mu, S


def _forward_moments(model, noise, L, K, task, update_K=False):
    """Mean and central covariance of ``z`` in the human-only loop, t = 0..N.

    With ``update_K`` the filter gains are recomputed on the fly as the
    minimum error-covariance gains given the current moments. Returns
    ``(mu, S, K)``.
    """
    args = _core_args(model, noise, L, K)
    return _core.forward_moments(*args, *_initial_moments(task, model.n), update_K, INNOVATION_REG)


def propagate_moments(spec: ClosedLoopSpec) -> MomentTrajectory:
    """Exact mean and covariance of ``z = [x; xhat]`` under the closed loop.

    The mean is stepped with the same kernel as the Monte-Carlo rollouts, so
    a noise-free rollout reproduces it bit for bit.
    """
    model = spec.model
    n = model.n
    L = spec.human.L
    LA = None if spec.automation is None else spec.automation.L
    mu = augmented_mean(spec)
    S0 = np.zeros((2 * n, 2 * n))
    S0[:n, :n] = spec.task.initial_covariance
    args = _core_args(model, spec.noise, L, spec.human.K, LA, spec.automation_in_human_model)
    cov, asym = _core.propagate_covariance(*args, mu, S0)
    if asym > 1e-8:
        warnings.warn(f"covariance asymmetric by {asym:.3g} (relative); re-symmetrized", RuntimeWarning)
    Phh = cov[:-1, n:, n:] + mu[:-1, n:, None] * mu[:-1, None, n:]
    u_mean = -np.einsum("tij,tj->ti", L, mu[:-1, n:])
    u_second = np.einsum("tai,tij,tbj->tab", L, Phh, L)
    return MomentTrajectory(mu, cov, model.dt, n, u_mean, u_second)


def expected_cost(spec: ClosedLoopSpec, cost: CostMatrices | None = None) -> float:
    """Expected human cost computed from the exact moments."""
    cost = spec.cost if cost is None else cost
    mom = propagate_moments(spec)
    Pxx = mom.state_second_moment()
    N = mom.N
    J = np.einsum("ij,tji->", cost.Q_t, Pxx[:N])
    J += np.einsum("ij,tji->", np.atleast_2d(cost.R), mom.u_second)
    J += np.trace(cost.Q_N @ Pxx[N])
    return float(J)


# --------------------------------------------------------------------------- #
# LQS fixed point


def _backward_gains(model, noise, cost, K, mu, S, rcond=1e-10):
    """Block-coordinate update of every L_t given the filter and forward moments.

    Sweeping backwards, L_t exactly minimizes the expected cost given the
    moments at t (which depend only on earlier gains) and the policy value of
    later steps. The update is the certainty-equivalent term plus a
    correction proportional to E[e xhat'], which vanishes when the estimate is
    orthogonal to its error.
    """
    n = model.n
    Cs = _stack(noise.C_list, (n, model.m_H))
    Ds = _stack(noise.D_list, (model.r_H, n))
    L, bad = _core.backward_gains(
        model.A, model.B_H, model.H_H, Cs, Ds, np.atleast_2d(cost.R).astype(float),
        cost.Q_t, cost.Q_N, np.ascontiguousarray(K), mu, S, rcond,
    )
    if bad >= 0:
        raise SolverError("singular effort Hessian", int(bad))
    return L


def _kalman_init(model, noise, L, task):
    """Filter gains under additive noise only (no signal-dependent terms)."""
    additive = NoiseModel(noise.Omega_alpha, noise.Omega_beta, (), ())
    K0 = np.zeros((model.N, model.n, model.r_H))
    _, _, K = _forward_moments(model, additive, L, K0, task, update_K=True)
    return K


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 500
    damping: float = 0.5


GAIN_FLOOR = 1e-9  # gains below this have no effect in double precision


def _rel_change(new, old):
    scale = max(np.max(np.abs(new)), GAIN_FLOOR)
    return float(np.max(np.abs(new - old)) / scale)


def solve_lqs(
    model: SystemModel,
    noise: NoiseModel,
    cost: CostMatrices,
    task: TaskSpec,
    opts: SolverOptions | None = None,
    warm_start: HumanPolicy | None = None,
) -> HumanPolicy:
    """Coupled controller/estimator fixed point of the LQS problem.

    Each sweep recomputes the filter gains forward given the control gains and
    then the control gains backward given the filter. The residual is the
    larger of the scale-normalized max-norm changes of L and K over a sweep.
    """
    opts = opts or SolverOptions()
    if warm_start is not None:
        L, K = warm_start.L.copy(), warm_start.K.copy()
    else:
        L = solve_lqr_deterministic(model, cost, "human").L
        K = _kalman_init(model, noise, L, task)

    best = (np.inf, L, K)
    prev_residual = np.inf
    damp = 1.0
    trace = []
    it = 0
    for it in range(1, opts.max_iter + 1):
        mu, S, K_new = _forward_moments(model, noise, L, K, task, update_K=True)
        if damp < 1.0:
            K_new = damp * K_new + (1 - damp) * K
            mu, S, _ = _forward_moments(model, noise, L, K_new, task)
        L_new = _backward_gains(model, noise, cost, K_new, mu, S)
        if damp < 1.0:
            L_new = damp * L_new + (1 - damp) * L
        if not (np.all(np.isfinite(L_new)) and np.all(np.isfinite(K_new))):
            break
        residual = max(_rel_change(L_new, L), _rel_change(K_new, K))
        L, K = L_new, K_new
        trace.append(residual)
        if residual < best[0]:
            best = (residual, L, K)
        if residual < opts.tol:
            break
        if residual > prev_residual and it > 5 and damp == 1.0:
            damp = opts.damping
        prev_residual = residual
    res, L, K = best
    return HumanPolicy(
        gains=GainSchedule(L, "human"),
        filter=FilterSchedule(K),
        converged=bool(res < opts.tol),
        residual=float(res),
        iterations=it,
        cost_trace=tuple(trace),
    )


# --------------------------------------------------------------------------- #
# serialization


def save_gains(path, gains: GainSchedule, filt: FilterSchedule | None = None, converged=True, residual=0.0):
    N, m, n = gains.L.shape
    doc = {
        "actor": gains.actor,
        "N": N,
        "m": m,
        "n": n,
        "gains": gains.L.reshape(N, m * n).tolist(),
        "filter": None if filt is None else filt.K.reshape(N, -1).tolist(),
        "converged": bool(converged),
        "residual": float(residual),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_gains(path) -> tuple[GainSchedule, FilterSchedule | None, dict]:
    doc = json.loads(Path(path).read_text())
    N, m, n = doc["N"], doc["m"], doc["n"]
    gains = GainSchedule(np.array(doc["gains"], float).reshape(N, m, n), doc.get("actor", "human"))
    filt = None
    if doc.get("filter") is not None:
        Kf = np.array(doc["filter"], float)
        filt = FilterSchedule(Kf.reshape(N, n, -1))
    return gains, filt, doc
