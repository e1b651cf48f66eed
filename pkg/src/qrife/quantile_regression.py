"""Cell-by-cell linear quantile regression (first estimation step).

Each (group, time) cell is fitted by minimising the check loss with a
primal-dual interior point method on the rank-score LP (Frisch-Newton with a
Mehrotra predictor-corrector).  Cells sharing a row count are solved as one
batch so the per-iteration linear algebra is vectorised across cells.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping

import numpy as np

from . import _kernels

Cell = tuple[Hashable, Hashable]

STEP_FRACTION = 0.99995


class QuantileRegressionError(ValueError):
    """Base class for first-step failures."""


class SingularDesignError(QuantileRegressionError):
    def __init__(self, message: str, columns: Iterable[int] = ()):
        super().__init__(message)
        self.columns = tuple(columns)


class SolverFailure(RuntimeError):
    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


class CellFitError(QuantileRegressionError):
    """A per-cell failure annotated with the cell key and quantile."""

    def __init__(self, cell: Cell, u: float, cause: Exception):
        super().__init__(f"cell group={cell[0]} time={cell[1]} u={u}: {cause}")
        self.cell = cell
        self.u = u
        self.cause = cause


def _check_quantile(u: float) -> float:
    u = float(u)
    if not (0.0 < u < 1.0) or math.isnan(u):
        raise ValueError(f"quantile level must lie in (0, 1), got {u}")
    return u


def check_loss(v, u: float):
    """Check loss (u - 1{v < 0}) * v, elementwise."""
    u = _check_quantile(u)
    v = np.asarray(v, dtype=float)
    out = np.where(v < 0, (u - 1.0) * v, u * v)
    return out if out.ndim else float(out)


def objective(Z: np.ndarray, y: np.ndarray, coef: np.ndarray, u: float) -> float:
    return float(np.sum(check_loss(y - Z @ coef, u)))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _rank_deficient_columns(Z: np.ndarray, rtol: float) -> list[int]:
    bad = []
    kept: list[int] = []
    for k in range(Z.shape[1]):
        cols = kept + [k]
        sv = np.linalg.svd(Z[:, cols], compute_uv=False)
        if sv[-1] <= rtol * max(sv[0], 1.0):
            bad.append(k)
        else:
            kept.append(k)
    return bad


def validate_design(Z: np.ndarray, y: np.ndarray, rtol: float = 1e-10) -> None:
    if Z.ndim != 2 or y.ndim != 1 or Z.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes Z{Z.shape} y{y.shape}")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y))):
        raise ValueError("design or response contains NaN/Inf")
    n, J = Z.shape
    if n < J:
        raise SingularDesignError(f"{n} observations for {J} regressors", range(J))
    sv = np.linalg.svd(Z, compute_uv=False)
    if sv[-1] <= rtol * max(sv[0], 1.0):
        bad = _rank_deficient_columns(Z, rtol)
        raise SingularDesignError(f"rank-deficient design; offending columns {bad}", bad)


# ---------------------------------------------------------------------------
# interior point solver
# ---------------------------------------------------------------------------

def _mv(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (M @ v[..., None])[..., 0]


def _max_step(v: np.ndarray, dv: np.ndarray) -> np.ndarray:
    # largest a in (0, 1] with v + a * dv >= 0 along the last axis, damped
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return np.minimum(1.0, STEP_FRACTION * ratio.min(axis=-1))


def _frisch_newton(Z: np.ndarray, y: np.ndarray, u: float, tol: float, max_iter: int):
    """Batched primal-dual IP for  min -y'x  s.t.  Z'x = (1-u)Z'1, 0 <= x <= 1.

    Z has shape (B, N, J) and y (B, N).  Returns coefficients (B, J), a
    convergence mask and the iteration count of each problem.
    """
    B, N, J = Z.shape
    A = np.swapaxes(Z, 1, 2)                      # (B, J, N)
    c = -y
    b = (1.0 - u) * Z.sum(axis=1)                 # (B, J)

    x = np.full((B, N), 1.0 - u)
    s = 1.0 - x
    lam = np.linalg.solve(A @ Z, _mv(A, c)[..., None])[..., 0]
    r = c - _mv(Z, lam)
    shift = np.maximum(1e-3 * np.abs(r).mean(axis=1, keepdims=True), 1e-8)
    z = np.maximum(r, 0.0) + shift
    w = np.maximum(-r, 0.0) + shift

    scale = 1.0 + np.abs(y).sum(axis=1)
    active = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=int)

    def direction(Qinv, rp, rd, rz, rw, xa, sa):
        rt = rd - rz / xa + rw / sa
        M = (Aa * Qinv[:, None, :]) @ Za
        rhs = rp + _mv(Aa, rt * Qinv)
        dl = np.linalg.solve(M, rhs[..., None])[..., 0]
        dx = (_mv(Za, dl) - rt) * Qinv
        return dx, dl

    for it in range(max_iter):
        gap = (x * z).sum(axis=1) + (s * w).sum(axis=1)
        rp_norm = np.abs(b - _mv(A, x)).max(axis=1)
        done = (gap <= tol * scale) & (rp_norm <= 1e-8 * scale)
        active &= ~done
        if not active.any():
            break
        idx = np.flatnonzero(active)
        iters[idx] += 1
        Za, Aa = Z[idx], A[idx]
        xa, sa, za, wa, la = x[idx], s[idx], z[idx], w[idx], lam[idx]
        ca, ba = c[idx], b[idx]

        rp = ba - _mv(Aa, xa)
        rd = ca - _mv(Za, la) - za + wa
        Qinv = 1.0 / (za / xa + wa / sa)
        mu = ((xa * za).sum(axis=1) + (sa * wa).sum(axis=1)) / (2 * N)

        # predictor
        rz, rw = -xa * za, -sa * wa
        dx, dl = direction(Qinv, rp, rd, rz, rw, xa, sa)
        ds = -dx
        dz = (rz - za * dx) / xa
        dw = (rw - wa * ds) / sa
        ap = np.minimum(_max_step(xa, dx), _max_step(sa, ds))[:, None]
        ad = np.minimum(_max_step(za, dz), _max_step(wa, dw))[:, None]
        mu_aff = (((xa + ap * dx) * (za + ad * dz)).sum(axis=1)
                  + ((sa + ap * ds) * (wa + ad * dw)).sum(axis=1)) / (2 * N)
        sigma = np.clip(mu_aff / mu, 0.0, 1.0) ** 3

        # corrector
        target = (sigma * mu)[:, None]
        rz = target - xa * za - dx * dz
        rw = target - sa * wa - ds * dw
        dx, dl = direction(Qinv, rp, rd, rz, rw, xa, sa)
        ds = -dx
        dz = (rz - za * dx) / xa
        dw = (rw - wa * ds) / sa
        ap = np.minimum(_max_step(xa, dx), _max_step(sa, ds))[:, None]
        ad = np.minimum(_max_step(za, dz), _max_step(wa, dw))[:, None]

        x[idx] = xa + ap * dx
        s[idx] = 1.0 - x[idx]
        lam[idx] = la + ad * dl
        z[idx] = za + ad * dz
        w[idx] = wa + ad * dw
    else:
        gap = (x * z).sum(axis=1) + (s * w).sum(axis=1)
        active &= ~(gap <= tol * scale)

    return -lam, ~active, iters


def _irls(Z: np.ndarray, y: np.ndarray, u: float, max_iter: int = 500) -> np.ndarray:
    """Smoothed iteratively reweighted least squares; fallback only."""
    coef = np.linalg.lstsq(Z, y, rcond=None)[0]
    h = max(1e-6, 1e-3 * float(np.std(y)) or 1e-6)
    for _ in range(max_iter):
        r = y - Z @ coef
        wt = np.where(r >= 0, u, 1.0 - u) / np.maximum(np.abs(r), h)
        Zw = Z * wt[:, None]
        new = np.linalg.solve(Z.T @ Zw, Zw.T @ y)
        if np.max(np.abs(new - coef)) < 1e-12 * (1.0 + np.max(np.abs(coef))):
            coef = new
            break
        coef = new
        h = max(h * 0.5, 1e-12)
    return coef


def _to_vertex(Z: np.ndarray, y: np.ndarray, u: float, coef: np.ndarray) -> np.ndarray:
    """Crossover: refit exactly through the J smallest-residual rows."""
    n, J = Z.shape
    order = np.argsort(np.abs(y - Z @ coef), kind="stable")
    rows: list[int] = []
    for i in order:
        trial = rows + [int(i)]
        if np.linalg.matrix_rank(Z[trial]) == len(trial):
            rows = trial
            if len(rows) == J:
                break
    if len(rows) < J:
        return coef
    vertex = np.linalg.solve(Z[rows], y[rows])
    base = objective(Z, y, coef, u)
    if objective(Z, y, vertex, u) <= base + 1e-12 * (1.0 + abs(base)):
        return vertex
    return coef


@dataclass(frozen=True)
class QRSolution:
    coef: np.ndarray
    objective: float
    status: str
    iterations: int


def _batch_loss(Z: np.ndarray, y: np.ndarray, coef: np.ndarray, u: float) -> np.ndarray:
    r = y - _mv(Z, coef)
    return np.where(r < 0, (u - 1.0) * r, u * r).sum(axis=1)


ENGINES = ("auto", "compiled", "numpy")


def _interior_point(Z, y, u, tol, max_iter, engine):
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")
    if engine == "compiled" and not _kernels.AVAILABLE:
        raise RuntimeError("compiled engine requested but numba is not installed")
    if engine != "numpy" and _kernels.AVAILABLE:
        coefs, ok, iters = _kernels.frisch_newton_batch(Z, y, u, tol, max_iter)
        if ok.all():
            return coefs, ok, iters
        # retry the stragglers with the vectorised solver before giving up
        bad = np.flatnonzero(~ok)
        c2, ok2, it2 = _frisch_newton(Z[bad], y[bad], u, tol, max_iter)
        coefs[bad], ok[bad], iters[bad] = c2, ok2, it2
        return coefs, ok, iters
    return _frisch_newton(Z, y, u, tol, max_iter)


def _solve_batch(Z: np.ndarray, y: np.ndarray, u: float, tol: float,
                 max_iter: int, engine: str = "auto") -> list[QRSolution]:
    B, N, J = Z.shape
    coefs, ok, iters = _interior_point(Z, y, u, tol, max_iter, engine)
    status = np.where(ok, "interior-point", "irls-fallback").astype(object)
    for k in np.flatnonzero(~ok | ~np.all(np.isfinite(coefs), axis=1)):
        coefs[k] = _irls(Z[k], y[k], u)
        status[k] = "irls-fallback"
        if not np.all(np.isfinite(coefs[k])):
            raise SolverFailure(
                f"interior point stalled after {iters[k]} iterations and "
                "IRLS fallback diverged", int(iters[k]))

    # vectorised crossover through the J smallest residuals; cells whose
    # candidate basis is singular take the slow path
    loss = _batch_loss(Z, y, coefs, u)
    order = np.argsort(np.abs(y - _mv(Z, coefs)), axis=1, kind="stable")[:, :J]
    Zb = np.take_along_axis(Z, order[:, :, None], axis=1)
    yb = np.take_along_axis(y, order, axis=1)
    sv = np.linalg.svd(Zb, compute_uv=False)
    regular = sv[:, -1] > 1e-10 * np.maximum(sv[:, 0], 1.0)
    vert = coefs.copy()
    if regular.any():
        vert[regular] = np.linalg.solve(Zb[regular], yb[regular][..., None])[..., 0]
    for k in np.flatnonzero(~regular):
        vert[k] = _to_vertex(Z[k], y[k], u, coefs[k])
    vloss = _batch_loss(Z, y, vert, u)
    better = vloss <= loss + 1e-12 * (1.0 + np.abs(loss))
    coefs = np.where(better[:, None], vert, coefs)
    loss = np.where(better, vloss, loss)
    return [QRSolution(coefs[k], float(loss[k]), str(status[k]), int(iters[k]))
            for k in range(B)]


def fit_qr(Z, y, u: float, *, tol: float = 1e-9, max_iter: int = 100,
           engine: str = "auto") -> np.ndarray:
    """Linear quantile regression coefficients at level ``u``.

    Returns a minimiser of sum_i rho_u(y_i - z_i'a).  Solutions may be
    set-valued; the returned point is an LP vertex whenever the crossover
    step finds one at least as good as the interior point iterate.
    """
    return fit_qr_full(Z, y, u, tol=tol, max_iter=max_iter, engine=engine).coef


def fit_qr_full(Z, y, u: float, *, tol: float = 1e-9, max_iter: int = 100,
                engine: str = "auto") -> QRSolution:
    u = _check_quantile(u)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if Z.shape[0] != y.shape[0] and Z.shape[1] == y.shape[0]:
        Z = Z.T
    validate_design(Z, y)
    return _solve_batch(Z[None], y[None], u, tol, max_iter, engine)[0]


# ---------------------------------------------------------------------------
# panel containers
# ---------------------------------------------------------------------------

@dataclass
class MicroPanel:
    """Repeated cross-sections keyed by (group, time).

    ``cells[(s, t)] = (y, Z)`` with ``Z`` of shape (N_st, J); the first
    column of ``Z`` is the intercept.
    """

    cells: dict[Cell, tuple[np.ndarray, np.ndarray]]
    names: tuple[str, ...] = ()
    groups: tuple = field(init=False)
    times: tuple = field(init=False)
    J: int = field(init=False)

    def __post_init__(self):
        if not self.cells:
            raise ValueError("empty panel")
        self.groups = tuple(sorted({k[0] for k in self.cells}))
        self.times = tuple(sorted({k[1] for k in self.cells}))
        missing = [(s, t) for s in self.groups for t in self.times if (s, t) not in self.cells]
        if missing:
            s, t = missing[0]
            raise ValueError(f"missing cell group={s} time={t}")
        clean = {}
        Js = set()
        for key, (y, Z) in self.cells.items():
            y = np.asarray(y, dtype=float).ravel()
            Z = np.asarray(Z, dtype=float)
            if Z.ndim != 2 or Z.shape[0] != y.shape[0] or y.shape[0] < 1:
                raise ValueError(f"cell {key}: inconsistent shapes y{y.shape} Z{Z.shape}")
            if not (np.all(np.isfinite(y)) and np.all(np.isfinite(Z))):
                raise ValueError(f"cell {key}: non-finite entries")
            Js.add(Z.shape[1])
            clean[key] = (y, Z)
        if len(Js) != 1:
            raise ValueError(f"cells disagree on the number of regressors: {sorted(Js)}")
        self.cells = clean
        self.J = Js.pop()
        if not self.names:
            self.names = ("const",) + tuple(f"z{k}" for k in range(1, self.J))
        if len(self.names) != self.J:
            raise ValueError("names must have one entry per regressor")

    @property
    def S(self) -> int:
        return len(self.groups)

    @property
    def T(self) -> int:
        return len(self.times)


@dataclass
class QuantileCoefficientPanel:
    u: float
    alpha: dict[Cell, np.ndarray]
    objective: dict[Cell, float]
    status: dict[Cell, str]
    groups: tuple
    times: tuple

    def as_array(self) -> np.ndarray:
        """Coefficients stacked as (S, T, J) in sorted group/time order."""
        return np.array([[self.alpha[(s, t)] for t in self.times] for s in self.groups])

    def coefficient(self, j: int) -> np.ndarray:
        """S x T panel of the j-th coefficient."""
        return self.as_array()[:, :, j]


def _fit_chunk(keys, panel: MicroPanel, u: float, tol: float, max_iter: int, engine: str):
    Z = np.stack([panel.cells[k][1] for k in keys])
    y = np.stack([panel.cells[k][0] for k in keys])
    try:
        return list(zip(keys, _solve_batch(Z, y, u, tol, max_iter, engine)))
    except SolverFailure:
        # locate the failing cell for the error message
        for k in keys:
            try:
                _solve_batch(panel.cells[k][1][None], panel.cells[k][0][None], u, tol,
                             max_iter, engine)
            except SolverFailure as exc:
                raise CellFitError(k, u, exc) from exc
        raise


def fit_first_step(panel: MicroPanel, quantiles: Iterable[float], *, threads: int = 1,
                   tol: float = 1e-9, max_iter: int = 100,
                   batch_size: int = 256,
                   engine: str = "auto") -> dict[float, QuantileCoefficientPanel]:
    """Fit every cell at every quantile; returns ``{u: QuantileCoefficientPanel}``.

    Any failing cell aborts the whole step with a :class:`CellFitError`.
    """
    qs = sorted({_check_quantile(u) for u in quantiles})
    for key in sorted(panel.cells):
        y, Z = panel.cells[key]
        try:
            validate_design(Z, y)
        except (SingularDesignError, ValueError) as exc:
            raise CellFitError(key, qs[0] if qs else float("nan"), exc) from exc

    by_rows: dict[int, list[Cell]] = {}
    for key in sorted(panel.cells):
        by_rows.setdefault(panel.cells[key][0].shape[0], []).append(key)
    chunks = [(u, keys[i:i + batch_size]) for u in qs
              for _, keys in sorted(by_rows.items())
              for i in range(0, len(keys), batch_size)]

    def run(job):
        u, keys = job
        return u, _fit_chunk(keys, panel, u, tol, max_iter, engine)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(job) for job in chunks]

    out = {}
    for u in qs:
        out[u] = QuantileCoefficientPanel(u, {}, {}, {}, panel.groups, panel.times)
    for u, pairs in results:
        qcp = out[u]
        for key, sol in pairs:
            qcp.alpha[key] = sol.coef
            qcp.objective[key] = sol.objective
            qcp.status[key] = sol.status
    for qcp in out.values():
        qcp.alpha = {k: qcp.alpha[k] for k in sorted(qcp.alpha)}
    return out


def stack_coefficients(fits: Mapping[float, QuantileCoefficientPanel]) -> dict[float, np.ndarray]:
    return {u: q.as_array() for u, q in fits.items()}
