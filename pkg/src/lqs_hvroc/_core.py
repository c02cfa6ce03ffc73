"""Compiled per-step recursions behind ``lqs``.

All functions take plain arrays. Multiplicative noise matrices are stacked:
``Cs`` has shape (c, n, m_H) and ``Ds`` shape (d, r_H, n).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _sym(P):
    return 0.5 * (P + P.T)


@njit(cache=True)
def step_matrix(A, B, H, L_t, K_t, BA, LA_t, has_LA, efference):
    n = A.shape[0]
    BL = B @ L_t
    KH = K_t @ H
    M = np.empty((2 * n, 2 * n))
    M[:n, :n] = A
    M[:n, n:] = -BL
    M[n:, :n] = KH
    M[n:, n:] = A - BL - KH
    if has_LA:
        BLA = BA @ LA_t
        M[:n, :n] -= BLA
        if efference:
            M[n:, :n] -= BLA
    return M


@njit(cache=True)
def noise_cov(Oa, Ob, Cs, Ds, L_t, K_t, Pxx, Phh):
    """Covariance injected into ``[x; xhat]`` in one step."""
    n = Oa.shape[0]
    Nz = np.zeros((2 * n, 2 * n))
    Nxx = Oa.copy()
    if Cs.shape[0] > 0:
        Euu = L_t @ Phh @ L_t.T
        for i in range(Cs.shape[0]):
            C = np.ascontiguousarray(Cs[i])
            Nxx += C @ Euu @ C.T
    W = Ob.copy()
    for i in range(Ds.shape[0]):
        D = np.ascontiguousarray(Ds[i])
        W += D @ Pxx @ D.T
    Nz[:n, :n] = Nxx
    Nz[n:, n:] = K_t @ W @ K_t.T
    return Nz


@njit(cache=True)
def forward_moments(A, B, H, Oa, Ob, Cs, Ds, L, K, BA, LA, has_LA, efference, mu0, S0, update_K, reg):
    """Mean and central covariance of ``z`` for t = 0..N; optionally recompute the filter gains.

    Keeping mean and covariance apart avoids forming the estimation-error
    covariance as a difference of large non-central moments.
    """
    n = A.shape[0]
    N = L.shape[0]
    r = H.shape[0]
    mu = np.empty((N + 1, 2 * n))
    S = np.empty((N + 1, 2 * n, 2 * n))
    mu[0] = mu0
    S[0] = S0
    Kout = K.copy()
    eye_r = np.eye(r)
    for t in range(N):
        St = np.ascontiguousarray(S[t])
        m = mu[t]
        Pxx = np.ascontiguousarray(St[:n, :n]) + np.outer(m[:n], m[:n])
        Phh = np.ascontiguousarray(St[n:, n:]) + np.outer(m[n:], m[n:])
        if update_K:
            Sxh = St[:n, n:]
            e = m[:n] - m[n:]
            Se = St[:n, :n] - Sxh - Sxh.T + St[n:, n:] + np.outer(e, e)
            V = H @ Se @ H.T + Ob + reg * eye_r
            for i in range(Ds.shape[0]):
                D = np.ascontiguousarray(Ds[i])
                V += D @ Pxx @ D.T
            Kout[t] = np.linalg.solve(V, H @ Se @ A.T).T
        L_t = np.ascontiguousarray(L[t])
        K_t = np.ascontiguousarray(Kout[t])
        LA_t = np.ascontiguousarray(LA[t]) if has_LA else np.zeros((BA.shape[1], n))
        M = step_matrix(A, B, H, L_t, K_t, BA, LA_t, has_LA, efference)
        mu[t + 1] = M @ m
        Sn = M @ St @ M.T + noise_cov(Oa, Ob, Cs, Ds, L_t, K_t, Pxx, Phh)
        S[t + 1] = _sym(Sn)
    return mu, S, Kout


@njit(cache=True)
def propagate_covariance(A, B, H, Oa, Ob, Cs, Ds, L, K, BA, LA, has_LA, efference, mu, S0):
    """Central covariance of ``z`` given the mean trajectory ``mu``; returns (cov, max asymmetry)."""
    n = A.shape[0]
    N = L.shape[0]
    cov = np.empty((N + 1, 2 * n, 2 * n))
    cov[0] = S0
    worst = 0.0
    for t in range(N):
        S = np.ascontiguousarray(cov[t])
        m = mu[t]
        Pxx = np.ascontiguousarray(S[:n, :n]) + np.outer(m[:n], m[:n])
        Phh = np.ascontiguousarray(S[n:, n:]) + np.outer(m[n:], m[n:])
        L_t = np.ascontiguousarray(L[t])
        K_t = np.ascontiguousarray(K[t])
        LA_t = np.ascontiguousarray(LA[t]) if has_LA else np.zeros((BA.shape[1], n))
        M = step_matrix(A, B, H, L_t, K_t, BA, LA_t, has_LA, efference)
        Sn = M @ S @ M.T + noise_cov(Oa, Ob, Cs, Ds, L_t, K_t, Pxx, Phh)
        scale = max(1.0, np.max(np.abs(Sn)))
        worst = max(worst, np.max(np.abs(Sn - Sn.T)) / scale)
        cov[t + 1] = _sym(Sn)
    return cov, worst


@njit(cache=True)
def _scaled_pinv(S, rcond):
    n = S.shape[0]
    inv_d = np.zeros(n)
    dmax = max(np.max(np.diag(S)), 0.0)
    for i in range(n):
        if S[i, i] > rcond * dmax:
            inv_d[i] = 1.0 / np.sqrt(S[i, i])
    Sn = S * np.outer(inv_d, inv_d)
    w, V = np.linalg.eigh(_sym(Sn))
    cut = rcond * max(np.max(np.abs(w)), 1e-300)
    winv = np.zeros(n)
    for i in range(n):
        if w[i] > cut:
            winv[i] = 1.0 / w[i]
    return ((V * winv) @ V.T) * np.outer(inv_d, inv_d)


@njit(cache=True)
def backward_gains(A, B, H, Cs, Ds, R, Q_t, Q_N, K, mu, S, rcond):
    """Exact block-coordinate minimization of the expected cost over each L_t.

    Works in ``w = [xhat; e]`` coordinates with ``e = x - xhat``, where the
    estimate block of the value matrix follows the Riccati recursion when
    the estimate is uncorrelated with its error. Returns the gains and the
    index of a singular effort Hessian (-1 if none).
    """
    n = A.shape[0]
    m = B.shape[1]
    N = K.shape[0]
    L = np.zeros((N, m, n))
    W = np.zeros((2 * n, 2 * n))
    for i in range(2):
        for j in range(2):
            W[i * n:(i + 1) * n, j * n:(j + 1) * n] = Q_N
    for t in range(N - 1, -1, -1):
        K_t = np.ascontiguousarray(K[t])
        KH = K_t @ H
        Whh = np.ascontiguousarray(W[:n, :n])
        Whe = np.ascontiguousarray(W[:n, n:])
        Wee = np.ascontiguousarray(W[n:, n:])
        Hu = R + B.T @ Whh @ B
        for i in range(Cs.shape[0]):
            C = np.ascontiguousarray(Cs[i])
            Hu += C.T @ Wee @ C
        St = S[t]
        mt = mu[t]
        Phh = np.ascontiguousarray(St[n:, n:]) + np.outer(mt[n:], mt[n:])
        Seh = np.ascontiguousarray(St[:n, n:]) - np.ascontiguousarray(St[n:, n:]) + np.outer(mt[:n] - mt[n:], mt[n:])
        BW = B.T @ Whh
        G_h = BW @ A
        G_e = BW @ KH + B.T @ Whe @ (A - KH)
        rhs = G_h + G_e @ (Seh @ _scaled_pinv(Phh, rcond))
        if np.linalg.cond(Hu) > 1e14:
            return L, t
        L_t = np.linalg.solve(Hu, rhs)
        L[t] = L_t
        M = np.zeros((2 * n, 2 * n))
        M[:n, :n] = A - B @ L_t
        M[:n, n:] = KH
        M[n:, n:] = A - KH
        Wn = M.T @ W @ M
        for i in range(2):
            for j in range(2):
                Wn[i * n:(i + 1) * n, j * n:(j + 1) * n] += Q_t
        extra = L_t.T @ R @ L_t
        for i in range(Cs.shape[0]):
            CL = np.ascontiguousarray(Cs[i]) @ L_t
            extra += CL.T @ Wee @ CL
        Wn[:n, :n] += extra
        if Ds.shape[0] > 0:
            KWK = K_t.T @ (Whh - Whe - Whe.T + Wee) @ K_t
            for i in range(Ds.shape[0]):
                D = np.ascontiguousarray(Ds[i])
                DKD = D.T @ KWK @ D
                for a in range(2):
                    for b in range(2):
                        Wn[a * n:(a + 1) * n, b * n:(b + 1) * n] += DKD
        W = _sym(Wn)
    return L, -1
