"""Discrete-time human-machine reaching system, noise model and cost matrices.

State ordering is ``[p, v, f, g, p_ref]``: position, velocity, total force,
muscle filter state and the (constant) reference position.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

P, V, F, G, PREF = range(5)
STATE_NAMES = ("p", "v", "f", "g", "p_ref")
N_STATE = 5
N_SIGMA = 9


class ModelError(ValueError):
    """Raised when model parameters are inadmissible."""


@dataclass(frozen=True)
class PhysicalParams:
    mass_kg: float = 50.0
    damping_kg_per_s: float = 75.0
    tau1_s: float = 0.04
    tau2_s: float = 0.04

    def __post_init__(self):
        for name in ("mass_kg", "damping_kg_per_s", "tau1_s", "tau2_s"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be strictly positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class Discretization:
    dt_s: float = 0.01
    horizon_steps: int = 300

    def __post_init__(self):
        if not self.dt_s > 0:
            raise ModelError(f"dt_s must be positive, got {self.dt_s}")
        if int(self.horizon_steps) != self.horizon_steps or self.horizon_steps < 2:
            raise ModelError(f"horizon_steps must be an integer >= 2, got {self.horizon_steps}")

    @property
    def times(self) -> np.ndarray:
        return self.dt_s * np.arange(self.horizon_steps + 1)


@dataclass(frozen=True, eq=False)
class SystemModel:
    A: np.ndarray
    B_H: np.ndarray
    B_A: np.ndarray
    H_H: np.ndarray
    H_A: np.ndarray
    dt: float
    N: int

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m_H(self) -> int:
        return self.B_H.shape[1]

    @property
    def m_A(self) -> int:
        return self.B_A.shape[1]

    @property
    def r_H(self) -> int:
        return self.H_H.shape[0]

    @property
    def r_A(self) -> int:
        return self.H_A.shape[0]


@dataclass(frozen=True)
class NoiseParams:
    """Noise scales sigma_1..sigma_9.

    1-4 scale additive process noise on p, v, f, g; 5-7 scale additive
    observation noise on p, v, f; 8 scales the control-dependent noise and 9
    the state-dependent observation noise.
    """

    sigma: tuple = (0.0,) * N_SIGMA

    def __post_init__(self):
        s = tuple(float(x) for x in np.ravel(self.sigma))
        if len(s) != N_SIGMA:
            raise ModelError(f"expected {N_SIGMA} noise scales, got {len(s)}")
        bad = [i + 1 for i, x in enumerate(s) if not (x >= 0 and np.isfinite(x))]
        if bad:
            raise ModelError(f"noise scales must be finite and >= 0 (sigma_{bad})")
        object.__setattr__(self, "sigma", s)

    def as_array(self) -> np.ndarray:
        return np.array(self.sigma)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    Omega_alpha: np.ndarray
    Omega_beta: np.ndarray
    C_list: tuple
    D_list: tuple

    @property
    def is_zero(self) -> bool:
        mats = (self.Omega_alpha, self.Omega_beta, *self.C_list, *self.D_list)
        return all(not np.any(M) for M in mats)


@dataclass(frozen=True)
class CostParams:
    s_terminal: tuple = (1.0, 0.0, 0.0, 0.0, 0.0)
    s_running: tuple = (0.0,) * N_STATE
    r_effort: float = 1e-8

    def __post_init__(self):
        st = tuple(float(x) for x in self.s_terminal)
        sr = tuple(float(x) for x in self.s_running)
        if len(st) != N_STATE or len(sr) != N_STATE:
            raise ModelError("s_terminal and s_running need 5 entries each")
        if any(not (x >= 0) for x in st + sr):
            raise ModelError("cost weights must be >= 0")
        if not self.r_effort > 0:
            raise ModelError(f"r_effort must be > 0, got {self.r_effort}")
        object.__setattr__(self, "s_terminal", st)
        object.__setattr__(self, "s_running", sr)
        object.__setattr__(self, "r_effort", float(self.r_effort))


@dataclass(frozen=True, eq=False)
class CostMatrices:
    Q_t: np.ndarray
    Q_N: np.ndarray
    R: np.ndarray

    def scaled(self, c: float) -> "CostMatrices":
        return CostMatrices(c * self.Q_t, c * self.Q_N, c * self.R)


@dataclass(frozen=True, eq=False)
class TaskSpec:
    p_start_m: float
    p_ref_m: float
    initial_state: np.ndarray
    initial_covariance: np.ndarray

    @property
    def distance_m(self) -> float:
        return self.p_ref_m - self.p_start_m


def make_task(p_start_m: float = 0.0, p_ref_m: float = 0.24, initial_covariance=None) -> TaskSpec:
    """Reaching task starting at rest at ``p_start_m`` with zero force."""
    x0 = np.zeros(N_STATE)
    x0[P] = p_start_m
    x0[PREF] = p_ref_m
    cov = np.zeros((N_STATE, N_STATE)) if initial_covariance is None else np.asarray(initial_covariance, float)
    if cov.shape != (N_STATE, N_STATE):
        raise ModelError(f"initial_covariance must be {N_STATE}x{N_STATE}")
    if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-12:
        raise ModelError("initial_covariance must be symmetric PSD")
    return TaskSpec(float(p_start_m), float(p_ref_m), x0, cov)


def build_reaching_system(phys: PhysicalParams, disc: Discretization) -> SystemModel:
    dt = disc.dt_s
    m, d = phys.mass_kg, phys.damping_kg_per_s
    checks = {
        "dt*damping/mass < 1": dt * d / m,
        "dt/tau1 < 1": dt / phys.tau1_s,
        "dt/tau2 < 1": dt / phys.tau2_s,
    }
    for name, value in checks.items():
        if not value < 1:
            raise ModelError(f"unstable discretization: {name} violated ({value:g})")

    A = np.eye(N_STATE)
    A[P, V] = dt
    A[V, V] = 1 - dt * d / m
    A[V, F] = dt / m
    A[F, F] = 1 - dt / phys.tau2_s
    A[F, G] = dt / phys.tau2_s
    A[G, G] = 1 - dt / phys.tau1_s

    B_H = np.zeros((N_STATE, 1))
    B_H[G, 0] = dt / phys.tau1_s
    B_A = np.zeros((N_STATE, 1))
    B_A[F, 0] = 1.0

    H_H = np.hstack([np.eye(3), np.zeros((3, 2))])
    H_A = np.hstack([np.eye(2), np.zeros((2, 3))])
    return SystemModel(A, B_H, B_A, H_H, H_A, dt, int(disc.horizon_steps))


def build_noise_model(sigma: NoiseParams, model: SystemModel) -> NoiseModel:
    s = sigma.as_array()
    if np.any(s < 0):
        raise ModelError("negative noise scale")
    Sigma_alpha = np.diag([s[0], s[1], s[2], s[3], 0.0])
    Sigma_beta = np.diag(s[4:7])
    C_1 = s[7] * model.B_H
    D_list = tuple(
        s[8] * model.H_H @ np.diag(np.eye(N_STATE)[k]) for k in (P, V, PREF)
    )
    return NoiseModel(
        Omega_alpha=Sigma_alpha @ Sigma_alpha.T,
        Omega_beta=Sigma_beta @ Sigma_beta.T,
        C_list=(C_1,),
        D_list=D_list,
    )


def error_map() -> np.ndarray:
    """Map from state to ``[p - p_ref, v, f, g, p_ref]``."""
    M = np.eye(N_STATE)
    M[P, PREF] = -1.0
    return M


def build_cost(params: CostParams, model: SystemModel | None = None) -> CostMatrices:
    M = error_map()
    Q_N = M.T @ np.diag(params.s_terminal) @ M
    Q_t = M.T @ np.diag(params.s_running) @ M
    if not params.r_effort > 0:
        raise ModelError("r_effort must be > 0")
    m_H = 1 if model is None else model.m_H
    return CostMatrices(Q_t=Q_t, Q_N=Q_N, R=params.r_effort * np.eye(m_H))


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to instantiate one reaching experiment."""

    physical: PhysicalParams = field(default_factory=PhysicalParams)
    discretization: Discretization = field(default_factory=Discretization)
    noise: NoiseParams = field(default_factory=NoiseParams)
    cost: CostParams = field(default_factory=CostParams)
    p_start_m: float = 0.0
    p_ref_m: float = 0.24

    def system(self) -> SystemModel:
        return build_reaching_system(self.physical, self.discretization)

    def noise_model(self, model: SystemModel | None = None) -> NoiseModel:
        return build_noise_model(self.noise, model or self.system())

    def cost_matrices(self) -> CostMatrices:
        return build_cost(self.cost)

    def task(self) -> TaskSpec:
        return make_task(self.p_start_m, self.p_ref_m)

    def replace(self, **changes) -> "ModelConfig":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "physical": asdict(self.physical),
            "discretization": asdict(self.discretization),
            "noise": {"sigma": list(self.noise.sigma)},
            "cost": {
                "s_terminal": list(self.cost.s_terminal),
                "s_running": list(self.cost.s_running),
                "r_effort": self.cost.r_effort,
            },
            "task": {"p_start_m": self.p_start_m, "p_ref_m": self.p_ref_m},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        task = d.get("task", {})
        cost = d.get("cost", {})
        return cls(
            physical=PhysicalParams(**d.get("physical", {})),
            discretization=Discretization(**d.get("discretization", {})),
            noise=NoiseParams(tuple(d.get("noise", {}).get("sigma", (0.0,) * N_SIGMA))),
            cost=CostParams(
                s_terminal=tuple(cost.get("s_terminal", CostParams.s_terminal)),
                s_running=tuple(cost.get("s_running", CostParams.s_running)),
                r_effort=cost.get("r_effort", CostParams.r_effort),
            ),
            p_start_m=task.get("p_start_m", 0.0),
            p_ref_m=task.get("p_ref_m", 0.24),
        )


def load_config(path) -> ModelConfig:
    with open(path) as fh:
        return ModelConfig.from_dict(json.load(fh))


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


# Identified subject from the reaching study (goal 0.24 m from the start).
REFERENCE_SIGMA = (1.8e-3, 1.10e-5, 1.63e-2, 1.68e-2, 1.61e-2, 4.12e-2, 1.53e-2, 1.25, 1.4e-3)
REFERENCE_COST = CostParams(s_terminal=(1.0, 0.253, 34.2, 0.0, 0.0), r_effort=3.43e-9)


def reference_config() -> ModelConfig:
    return ModelConfig(noise=NoiseParams(REFERENCE_SIGMA), cost=REFERENCE_COST, p_start_m=0.0, p_ref_m=0.24)
