"""Compiled per-problem interior point, same iteration as the batched numpy solver."""
from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


def _frisch_newton_one(Z, y, u, tol, max_iter):
    N, J = Z.shape
    x = np.full(N, 1.0 - u)
    s = 1.0 - x
    b = (1.0 - u) * Z.sum(axis=0)
    c = -y
    lam = np.linalg.solve(Z.T @ Z, Z.T @ c)
    r = c - Z @ lam
    shift = max(1e-3 * np.abs(r).mean(), 1e-8)
    z = np.maximum(r, 0.0) + shift
    w = np.maximum(-r, 0.0) + shift
    scale = 1.0 + np.abs(y).sum()
    Qinv = np.empty(N)
    rt = np.empty(N)
    dx = np.empty(N)
    dz = np.empty(N)
    dw = np.empty(N)
    rz = np.empty(N)
    rw = np.empty(N)
    dl = np.zeros(J)
    it = 0
    converged = False
    sigma = 0.0
    ap = 1.0
    ad = 1.0
    while True:
        gap = 0.0
        for i in range(N):
            gap += x[i] * z[i] + s[i] * w[i]
        rp = b - Z.T @ x
        if gap <= tol * scale and np.abs(rp).max() <= 1e-8 * scale:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        rd = c - Z @ lam - z + w
        mu = gap / (2 * N)
        for i in range(N):
            Qinv[i] = 1.0 / (z[i] / x[i] + w[i] / s[i])
        M = np.zeros((J, J))
        for i in range(N):
            for a in range(J):
                za = Z[i, a] * Qinv[i]
                for k in range(J):
                    M[a, k] += za * Z[i, k]
        # phase 0: affine predictor, phase 1: centred corrector
        for phase in range(2):
            if phase == 0:
                for i in range(N):
                    rz[i] = -x[i] * z[i]
                    rw[i] = -s[i] * w[i]
            else:
                target = sigma * mu
                for i in range(N):
                    rz[i] = target - x[i] * z[i] - dx[i] * dz[i]
                    rw[i] = target - s[i] * w[i] + dx[i] * dw[i]
            rhs = rp.copy()
            for i in range(N):
                rt[i] = rd[i] - rz[i] / x[i] + rw[i] / s[i]
                for a in range(J):
                    rhs[a] += Z[i, a] * rt[i] * Qinv[i]
            dl = np.linalg.solve(M, rhs)
            ap = 1.0
            ad = 1.0
            for i in range(N):
                zd = 0.0
                for a in range(J):
                    zd += Z[i, a] * dl[a]
                dx[i] = (zd - rt[i]) * Qinv[i]
                dz[i] = (rz[i] - z[i] * dx[i]) / x[i]
                dw[i] = (rw[i] + w[i] * dx[i]) / s[i]
                if dx[i] < 0.0:
                    ap = min(ap, -x[i] / dx[i])
                elif dx[i] > 0.0:
                    ap = min(ap, s[i] / dx[i])
                if dz[i] < 0.0:
                    ad = min(ad, -z[i] / dz[i])
                if dw[i] < 0.0:
                    ad = min(ad, -w[i] / dw[i])
            ap = min(1.0, 0.99995 * ap)
            ad = min(1.0, 0.99995 * ad)
            if phase == 0:
                aff = 0.0
                for i in range(N):
                    aff += ((x[i] + ap * dx[i]) * (z[i] + ad * dz[i])
                            + (s[i] - ap * dx[i]) * (w[i] + ad * dw[i]))
                sigma = min(max(aff / (2 * N) / mu, 0.0), 1.0) ** 3
        for i in range(N):
            x[i] += ap * dx[i]
            s[i] = 1.0 - x[i]
            z[i] += ad * dz[i]
            w[i] += ad * dw[i]
        lam += ad * dl
    return -lam, converged, it


def _batch(Z, y, u, tol, max_iter):
    B, N, J = Z.shape
    coef = np.empty((B, J))
    ok = np.empty(B, dtype=np.bool_)
    iters = np.empty(B, dtype=np.int64)
    for k in range(B):
        c, conv, it = _frisch_newton_one(Z[k], y[k], u, tol, max_iter)
        coef[k] = c
        ok[k] = conv
        iters[k] = it
    return coef, ok, iters


AVAILABLE = numba is not None
if AVAILABLE:
    _frisch_newton_one = numba.njit(cache=True, nogil=True)(_frisch_newton_one)
    _batch = numba.njit(cache=True, nogil=True)(_batch)


def frisch_newton_batch(Z, y, u, tol, max_iter):
    """(coef, converged, iterations) for Z (B, N, J) and y (B, N)."""
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    try:
        return _batch(Z, y, float(u), float(tol), int(max_iter))
    except (np.linalg.LinAlgError, ZeroDivisionError):
        # a singular Newton system in one cell: let the caller use the robust path
        B, _, J = Z.shape
        return np.full((B, J), np.nan), np.zeros(B, dtype=bool), np.zeros(B, dtype=np.int64)
