"""Second step: panel regression with interactive fixed effects.

For one coefficient index j and quantile u the S x T panel of first-step
estimates is regressed on the post-period treatment dummies, group-level
covariates and an r-factor structure by alternating principal components
(factors given the slopes) and least squares (slopes given the factors).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class IdentificationError(ValueError):
    pass


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class GroupDesign:
    """Group-level design.

    X has shape (S, T, K); d holds the S treatment flags; T0 is the first
    treated period as a 1-based position in the time ordering.
    """

    X: np.ndarray
    d: np.ndarray
    T0: int
    groups: tuple = ()
    times: tuple = ()
    names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        d = np.asarray(self.d, dtype=float).ravel()
        if X.ndim != 3 or X.shape[0] != d.shape[0]:
            raise DesignError(f"X must be (S, T, K) matching d; got X{X.shape}, d{d.shape}")
        S, T, K = X.shape
        if not np.all(np.isfinite(X)):
            raise DesignError("group covariates contain NaN/Inf")
        if not np.all((d == 0) | (d == 1)):
            raise DesignError("treatment flags must be 0 or 1")
        if not (0 < d.sum() < S):
            raise DesignError("need at least one treated and one control group")
        if not (1 < int(self.T0) < T):
            raise DesignError(f"policy start T0={self.T0} must satisfy 1 < T0 < T={T}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "T0", int(self.T0))
        if not self.groups:
            object.__setattr__(self, "groups", tuple(range(1, S + 1)))
        if not self.times:
            object.__setattr__(self, "times", tuple(range(1, T + 1)))
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{k + 1}" for k in range(K)))

    @property
    def S(self) -> int:
        return self.X.shape[0]

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.X.shape[2]

    @property
    def n_post(self) -> int:
        return self.T - self.T0 + 1

    @property
    def post(self) -> slice:
        return slice(self.T0 - 1, self.T)

    def d_st(self) -> np.ndarray:
        """S x T matrix of d_s * 1{t >= T0}."""
        out = np.zeros((self.S, self.T))
        out[:, self.post] = self.d[:, None]
        return out

    def treatment_effect(self, delta: np.ndarray) -> np.ndarray:
        """S x T matrix whose row s is D_s delta."""
        out = np.zeros((self.S, self.T))
        out[:, self.post] = self.d[:, None] * np.asarray(delta)[None, :]
        return out

    def permute_groups(self, order: Sequence[int]) -> "GroupDesign":
        order = np.asarray(order)
        return GroupDesign(self.X[order], self.d[order], self.T0,
                           tuple(np.asarray(self.groups, dtype=object)[order]),
                           self.times, self.names)


@dataclass(frozen=True)
class FactorModelFit:
    delta: np.ndarray
    beta: np.ndarray
    F: np.ndarray
    Lambda: np.ndarray
    eta: np.ndarray
    r: int
    converged: bool
    iterations: int
    eigenvalues: np.ndarray
    trace: tuple = ()
    checkpoints: dict = field(default_factory=dict)
    j: int | None = None
    u: float | None = None

    @property
    def common(self) -> np.ndarray:
        """S x T common component Lambda F'."""
        return self.Lambda @ self.F.T


def _check_panel(A: np.ndarray, design: GroupDesign) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.shape != (design.S, design.T):
        raise ValueError(f"coefficient panel has shape {A.shape}, expected {(design.S, design.T)}")
    if not np.all(np.isfinite(A)):
        raise ValueError("coefficient panel contains NaN/Inf")
    return A


def residual_panel(A, design: GroupDesign, delta, beta, F=None, Lambda=None) -> np.ndarray:
    A = _check_panel(A, design)
    delta = np.asarray(delta, dtype=float).ravel()
    beta = np.asarray(beta, dtype=float).ravel()
    if delta.shape != (design.n_post,) or beta.shape != (design.K,):
        raise ValueError(f"delta{delta.shape}/beta{beta.shape} do not conform to the design")
    E = A - design.treatment_effect(delta) - design.X @ beta
    if F is not None and np.size(F):
        F = np.asarray(F, dtype=float)
        Lambda = np.asarray(Lambda, dtype=float)
        if F.shape[0] != design.T or Lambda.shape != (design.S, F.shape[1]):
            raise ValueError(f"F{F.shape} and Lambda{Lambda.shape} do not conform")
        E = E - Lambda @ F.T
    return E


def ssr(A, design: GroupDesign, delta, beta, F=None, Lambda=None) -> float:
    """Sum of squared residuals of the interactive fixed effects regression."""
    E = residual_panel(A, design, delta, beta, F, Lambda)
    return float(np.sum(E * E))


def coef_step(A, design: GroupDesign, F=None, Lambda=None) -> tuple[np.ndarray, np.ndarray]:
    """Least squares (delta, beta) with the factor component held fixed.

    Solves the partialled normal equations jointly: beta from the Schur
    complement of the treatment block, then delta_t as the treated-group
    average of the remaining residual.
    """
    A = _check_panel(A, design)
    target = A if F is None or not np.size(F) else A - np.asarray(Lambda) @ np.asarray(F).T
    d = design.d
    nd = float(d @ d)
    if nd == 0.0:
        raise IdentificationError("no treated groups")
    post = design.post
    X = design.X
    # treated averages over groups for each post period
    abar = d @ target[:, post] / nd                       # (P,)
    xbar = np.einsum("s,stk->tk", d, X[:, post]) / nd     # (P, K)
    if design.K:
        G = np.einsum("stk,stl->kl", X, X) - nd * xbar.T @ xbar
        h = np.einsum("stk,st->k", X, target) - nd * xbar.T @ abar
        if np.linalg.cond(G) > 1e12:
            raise IdentificationError("singular normal equations for beta")
        beta = np.linalg.solve(G, h)
    else:
        beta = np.zeros(0)
    delta = abar - xbar @ beta
    return delta, beta


def initial_estimate(A, design: GroupDesign) -> tuple[np.ndarray, np.ndarray]:
    """Pooled least squares without the factor component."""
    return coef_step(A, design)


def second_moment(E: np.ndarray) -> np.ndarray:
    S, T = E.shape
    L = E.T @ E / (S * T)
    return 0.5 * (L + L.T)


def pca_step(A, design: GroupDesign, delta, beta, r: int):
    """Principal components of the slope-adjusted panel.

    Returns ``(F, Lambda, eigenvalues, warning)`` with T^{-1}F'F = I_r,
    Lambda = E F / T, eigenvalues of the T x T second-moment matrix in
    descending order and a degeneracy warning (or None).
    """
    E = residual_panel(A, design, delta, beta)
    return _pca(E, r)


def _pca(E: np.ndarray, r: int):
    S, T = E.shape
    if not (0 <= r <= min(S, T)):
        raise ValueError(f"number of factors r={r} outside [0, {min(S, T)}]")
    try:
        vals, vecs = np.linalg.eigh(second_moment(E))
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"eigen-decomposition failed: {exc}") from exc
    vals, vecs = vals[::-1], vecs[:, ::-1]
    F = np.sqrt(T) * vecs[:, :r]
    Lam = E @ F / T
    # largest-magnitude loading of each factor is positive
    if r:
        pick = np.argmax(np.abs(Lam), axis=0)
        sign = np.where(Lam[pick, np.arange(r)] < 0, -1.0, 1.0)
        F, Lam = F * sign, Lam * sign
    warning = None
    if 0 < r < T and abs(vals[r - 1] - vals[r]) <= 1e-10 * max(abs(vals[0]), 1e-300):
        warning = f"tied eigenvalues at positions {r} and {r + 1}; factor basis not unique"
    return F, Lam, vals, warning


def select_num_factors(eigenvalues, S: int) -> tuple[int, bool]:
    """Modified eigen-ratio choice of the factor count.

    Returns ``(r, no_structure)``; ``no_structure`` is set when the spectrum is
    identically zero (or flat, leaving no eigenvalue above the mean), in
    which case r = 0.
    """
    rho = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    if rho.ndim != 1 or np.any(np.diff(rho) > 1e-12 * max(rho[0], 1.0)):
        raise ValueError("eigenvalues must be a descending 1-d sequence")
    if rho[0] <= 0.0:
        return 0, True
    r_max = int(np.sum(rho > rho.mean()))
    if r_max == 0:
        return 0, True
    threshold = 1.0 / np.log(max(float(S), rho[0]))
    nxt = np.append(rho[1:], 0.0)
    best_r, best = 1, np.inf
    for r in range(1, r_max + 1):
        if rho[r - 1] / rho[0] >= threshold:
            value = nxt[r - 1] / rho[r - 1]
        else:
            value = 1.0
        if value < best:
            best_r, best = r, value
    return best_r, False


def fit_ife(A, design: GroupDesign, *, tol: float = 1e-5, max_iter: int = 1000,
            r_fixed: int | None = None, checkpoints: Sequence[int] = (),
            j: int | None = None, u: float | None = None) -> FactorModelFit:
    """Iterate PCA and least-squares steps until the parameter changes fall below ``tol``.

    The factor count is re-selected from the current spectrum at every
    iteration unless ``r_fixed`` is given.  ``checkpoints`` lists iteration
    numbers m whose delta is kept in ``fit.checkpoints``.
    """
    A = _check_panel(A, design)
    delta, beta = initial_estimate(A, design)
    S, T = A.shape
    F = np.zeros((T, 0))
    Lam = np.zeros((S, 0))
    common = np.zeros((S, T))
    trace = [{"m": 0, "ssr": ssr(A, design, delta, beta), "r": 0,
              "d_delta": np.nan, "d_beta": np.nan, "d_common": np.nan, "norm_err": 0.0,
              "warning": None}]
    keep = {0: delta.copy()} if 0 in checkpoints else {}
    converged = False
    vals = np.zeros(T)
    m = 0
    for m in range(1, max_iter + 1):
        E = residual_panel(A, design, delta, beta)
        if r_fixed is None:
            vals = np.linalg.eigvalsh(second_moment(E))[::-1]
            r, _ = select_num_factors(vals, S)
        else:
            r = int(r_fixed)
        F, Lam, vals, warn = _pca(E, r)
        if warn:
            warnings.warn(warn, RuntimeWarning, stacklevel=2)
        new_delta, new_beta = coef_step(A, design, F, Lam)
        new_common = Lam @ F.T
        change = (float(np.linalg.norm(new_delta - delta)),
                  float(np.linalg.norm(new_beta - beta)),
                  float(np.linalg.norm(new_common - common)))
        delta, beta, common = new_delta, new_beta, new_common
        trace.append({"m": m, "ssr": ssr(A, design, delta, beta, F, Lam), "r": r,
                      "d_delta": change[0], "d_beta": change[1], "d_common": change[2],
                      "norm_err": float(np.max(np.abs(F.T @ F / T - np.eye(r)), initial=0.0)),
                      "warning": warn})
        if m in checkpoints:
            keep[m] = delta.copy()
        if max(change) <= tol:
            converged = True
            break
    eta = residual_panel(A, design, delta, beta, F, Lam)
    return FactorModelFit(delta=delta, beta=beta, F=F, Lambda=Lam, eta=eta,
                          r=F.shape[1], converged=converged, iterations=m,
                          eigenvalues=vals, trace=tuple(trace), checkpoints=keep,
                          j=j, u=u)
