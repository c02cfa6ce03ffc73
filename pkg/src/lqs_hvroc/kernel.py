"""Closed-loop transition shared by Monte-Carlo rollouts and the analytic mean."""

from __future__ import annotations

import numpy as np


def matmul_rows(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``X @ M.T`` with a fixed per-element summation order (batch-size independent)."""
    out = X[:, 0:1] * M[:, 0]
    for k in range(1, M.shape[1]):
        out = out + X[:, k : k + 1] * M[:, k]
    return out


def sqrt_psd(S: np.ndarray) -> np.ndarray:
    if np.allclose(S, np.diag(np.diag(S))):
        return np.diag(np.sqrt(np.clip(np.diag(S), 0.0, None)))
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


class ClosedLoopStepper:
    """One closed-loop transition on a batch of (x, xhat) pairs."""

    def __init__(self, spec):
        m = spec.model
        self.A, self.B, self.BA, self.H = m.A, m.B_H, m.B_A, m.H_H
        self.L, self.K = spec.human.L, spec.human.K
        self.LA = None if spec.automation is None else spec.automation.L
        self.efference = spec.automation_in_human_model
        self.Sa = sqrt_psd(spec.noise.Omega_alpha)
        self.Sb = sqrt_psd(spec.noise.Omega_beta)
        self.C = spec.noise.C_list
        self.D = spec.noise.D_list
        self.n, self.r = m.n, m.r_H
        # standard normals per step: additive process, additive observation, control-, state-dependent
        self.n_draws = self.n + self.r + len(self.C) + len(self.D)

    def step(self, t, X, Xh, Z=None):
        n, r = self.n, self.r
        y = matmul_rows(X, self.H)
        uH = -matmul_rows(Xh, self.L[t])
        uA = None if self.LA is None else -matmul_rows(X, self.LA[t])
        Xn = matmul_rows(X, self.A) + matmul_rows(uH, self.B)
        if uA is not None:
            Xn = Xn + matmul_rows(uA, self.BA)
        if Z is not None:
            a = Z[:, :n]
            b = Z[:, n : n + r]
            eps = Z[:, n + r : n + r + len(self.C)]
            ups = Z[:, n + r + len(self.C) :]
            Xn = Xn + matmul_rows(a, self.Sa)
            for i, C in enumerate(self.C):
                Xn = Xn + eps[:, i : i + 1] * matmul_rows(uH, C)
            y = y + matmul_rows(b, self.Sb)
            for i, D in enumerate(self.D):
                y = y + ups[:, i : i + 1] * matmul_rows(X, D)
        innov = y - matmul_rows(Xh, self.H)
        Xhn = matmul_rows(Xh, self.A) + matmul_rows(uH, self.B) + matmul_rows(innov, self.K[t])
        if uA is not None and self.efference:
            Xhn = Xhn + matmul_rows(uA, self.BA)
        if uA is None:
            uA = np.zeros((X.shape[0], self.BA.shape[1]))
        return Xn, Xhn, uH, uA, y


def augmented_mean(spec) -> np.ndarray:
    """Noise-free trajectory of ``[x; xhat]``, shape (N+1, 2n), via the rollout kernel."""
    st = ClosedLoopStepper(spec)
    n, N = spec.model.n, spec.model.N
    X = spec.task.initial_state[None, :].copy()
    Xh = X.copy()
    out = np.empty((N + 1, 2 * n))
    out[0, :n], out[0, n:] = X[0], Xh[0]
    for t in range(N):
        X, Xh, *_ = st.step(t, X, Xh)
        out[t + 1, :n], out[t + 1, n:] = X[0], Xh[0]
    return out
