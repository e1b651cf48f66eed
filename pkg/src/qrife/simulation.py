"""Simulation design and Monte Carlo harness.

Outcomes follow a random-coefficient quantile model
    y = a0(U) + z * a1(U),   U ~ U(0, 1),
    a0(u) = delta0(u) + d_st delta_t(u) + x_st beta(u) + f_t' lambda_s + eta_st,
    a1(u) = 2 + 0.1 u,
so the u-th conditional quantile of y given z is a0(u) + z a1(u) whenever
that map is increasing in u.

The estimation design carries a constant column next to x_st so that
delta0(u) is absorbed by a slope coefficient rather than by the factors.

Seeding: replication k of a configuration draws from
``SeedSequence([master_seed, scenario, N, S, T, k])``, so every
replication is reproducible on its own and the harness gives the same
numbers whatever the execution order or worker count.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .inference import bias_hat_single, confidence_interval, sigma_hat
from .panel_ife import GroupDesign, fit_ife
from .quantile_regression import MicroPanel, fit_first_step


class MonteCarloError(RuntimeError):
    pass


def delta0(u):
    return 2.0 + np.asarray(u) ** 2 / 4.0


def delta_t(t, T, u):
    return 2.0 + np.asarray(t) / (2.0 * T) + np.asarray(u) ** 2 / 4.0


def beta_u(u):
    # constant: any u-slope on beta breaks quantile monotonicity when x < 0
    return np.ones_like(np.asarray(u, dtype=float))


def alpha1(u):
    return 2.0 + 0.1 * np.asarray(u)


@dataclass(frozen=True)
class DgpConfig:
    scenario: int = 1
    N: int = 500
    S: int = 40
    T: int = 25
    seed: int = 0
    replication: int = 0
    eta_scale: float = 0.0

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ValueError(f"scenario must be 1 or 2, got {self.scenario}")
        if min(self.N, self.S, self.T) < 4:
            raise ValueError("N, S and T must all be at least 4")
        if not self.eta_scale >= 0.0:
            raise ValueError(f"eta_scale must be non-negative, got {self.eta_scale}")

    @property
    def T0(self) -> int:
        return math.ceil(self.T / 4)

    def treated(self) -> np.ndarray:
        s = np.arange(1, self.S + 1)
        return (s >= self.S / 4).astype(float)

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            [self.seed, self.scenario, self.N, self.S, self.T, self.replication])


@dataclass
class SyntheticDataset:
    cfg: DgpConfig
    panel: MicroPanel
    design: GroupDesign
    F: np.ndarray
    Lambda: np.ndarray
    x: np.ndarray
    eta: np.ndarray

    def true_delta(self, u: float) -> np.ndarray:
        """Intercept policy effects for t = T0..T."""
        t = np.arange(self.cfg.T0, self.cfg.T + 1)
        return delta_t(t, self.cfg.T, u)

    def true_delta_profile(self, u: float) -> np.ndarray:
        """J x (T - T0 + 1); the slope on z carries no policy effect."""
        d = self.true_delta(u)
        return np.vstack([d, np.zeros_like(d)])

    def true_beta(self, u: float) -> np.ndarray:
        """Slopes on the estimation design columns (const, x) for the intercept panel."""
        return np.array([float(delta0(u)), float(beta_u(u))])

    def true_alpha(self, u: float) -> np.ndarray:
        """(S, T, 2) true quantile coefficients at level u."""
        a0 = self.alpha0(u)
        return np.stack([a0, np.full_like(a0, float(alpha1(u)))], axis=2)

    def alpha0(self, u: float) -> np.ndarray:
        cfg = self.cfg
        t = np.arange(1, cfg.T + 1)
        return (delta0(u) + self.design.d_st() * delta_t(t, cfg.T, u)[None, :]
                + self.x * beta_u(u) + self.Lambda @ self.F.T + self.eta)


def generate(cfg: DgpConfig) -> SyntheticDataset:
    rng = np.random.default_rng(cfg.seed_sequence())
    S, T, N = cfg.S, cfg.T, cfg.N
    U = rng.uniform(size=(S, T, N))
    z = rng.uniform(size=(S, T, N))
    xi = rng.uniform(size=(S, T))
    zeta = rng.standard_normal((S, T))
    G = rng.standard_normal((T, T))
    Lam = rng.uniform(0.0, 2.0, size=(S, 2))
    left, _, _ = np.linalg.svd(G)
    F = math.sqrt(T) * left[:, :2]
    if cfg.scenario == 1:
        x = zeta
    else:
        x = zeta + 0.02 * F[:, 0][None, :] ** 2 + 0.02 * Lam[:, 0][:, None] ** 2
    eta = cfg.eta_scale * (xi - 0.5)

    d = cfg.treated()
    X = np.stack([np.ones((S, T)), x], axis=2)
    design = GroupDesign(X, d, cfg.T0, names=("const", "x"))
    t = np.arange(1, T + 1)
    dst = design.d_st()
    common = Lam @ F.T
    a0 = (delta0(U) + dst[..., None] * delta_t(t[None, :, None], T, U)
          + x[..., None] * beta_u(U) + common[..., None] + eta[..., None])
    y = a0 + z * alpha1(U)

    cells = {}
    ones = np.ones(N)
    for s in range(S):
        for k in range(T):
            cells[(s + 1, k + 1)] = (y[s, k], np.column_stack([ones, z[s, k]]))
    panel = MicroPanel(cells, names=("const", "z"))
    return SyntheticDataset(cfg, panel, design, F, Lam, x, eta)




# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

def policy_label(r_fixed: int | None) -> str:
    return "auto" if r_fixed is None else str(int(r_fixed))


def run_replication(cfg: DgpConfig, quantiles: Sequence[float], *,
                    checkpoints: Sequence[int] = (2, 5),
                    factor_policies: Sequence[int | None] = (None,),
                    level: float = 0.95, tol: float = 1e-5, max_iter: int = 1000) -> dict:
    """Estimate delta_T(u) for the intercept on one simulated dataset.

    The first step is shared by all factor policies.  Returns
    ``{policy: {u: record}}`` where a record holds the converged estimate,
    the checkpoint estimates ``m2``, ``m5``, ..., the interval, the truth
    and convergence details.
    """
    data = generate(cfg)
    first = fit_first_step(data.panel, quantiles)
    T = cfg.T
    out = {}
    for r_fixed in factor_policies:
        per_u = {}
        for u, qcp in first.items():
            fit = fit_ife(qcp.coefficient(0), data.design, tol=tol, max_iter=max_iter,
                          r_fixed=r_fixed, checkpoints=checkpoints, j=0, u=u)
            point = float(fit.delta[-1])
            bias = bias_hat_single(fit, data.design, T)
            var = float(sigma_hat([fit], [fit], data.design, T)[0, 0])
            lo, hi = confidence_interval(point, bias, var, cfg.S, level)
            rec = {"truth": float(delta_t(T, T, u)), "converged": point, "lo": lo, "hi": hi,
                   "ok": bool(fit.converged), "r": fit.r, "iterations": fit.iterations}
            for m in checkpoints:
                # a fit that stopped before m keeps its final value
                last = max((k for k in fit.checkpoints if k <= m), default=None)
                rec[f"m{m}"] = float(fit.checkpoints[last][-1]) if last is not None else point
            per_u[u] = rec
        out[policy_label(r_fixed)] = per_u
    return out


def _job(args):
    cfg, quantiles, checkpoints, policies, level = args
    try:
        return run_replication(cfg, quantiles, checkpoints=checkpoints,
                               factor_policies=policies, level=level)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


REPORT_COLUMNS = ("scenario", "N", "S", "T", "u", "m", "bias", "sd", "coverage", "factors")


@dataclass
class MonteCarloReport:
    rows: list
    failures: dict
    replications: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"schema_version": 1, "rows": self.rows,
               "failures": [{"config": list(k[:-1]), "factors": k[-1], "count": v}
                            for k, v in self.failures.items()]}
        return json.dumps(doc, indent=2, allow_nan=True)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "mc_report.csv", out / "mc_report.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path.write_text(self.to_json(), encoding="utf-8")
        return csv_path, json_path

    def lookup(self, scenario, N, S, T, u, m="converged", factors="auto") -> dict:
        for row in self.rows:
            if (row["scenario"], row["N"], row["S"], row["T"], row["m"], row["factors"]) \
                    == (scenario, N, S, T, m, factors) and abs(row["u"] - u) < 1e-12:
                return row
        raise KeyError((scenario, N, S, T, u, m, factors))


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else format(v, ".17g")
    return str(v)


def run_monte_carlo(configs: Iterable[DgpConfig], reps: int, quantiles: Sequence[float], *,
                    master_seed: int = 0, threads: int = 1, checkpoints: Sequence[int] = (2, 5),
                    factor_policies: Sequence[int | None] = (None,), level: float = 0.95,
                    max_failure_rate: float = 0.05) -> MonteCarloReport:
    """Bias, SD and CI coverage of delta_T(u) over ``reps`` simulated datasets per config.

    The ``seed`` and ``replication`` fields of the given configs are
    replaced by ``master_seed`` and the replication counter.  A replication
    fails for a policy when it raises or any of its fits does not converge;
    failures are excluded and counted, and more than ``max_failure_rate``
    of them aborts the run.
    """
    if reps < 2:
        raise ValueError("need at least two replications")
    configs = list(configs)
    quantiles = sorted(float(u) for u in quantiles)
    policies = tuple(factor_policies)
    if not policies:
        raise ValueError("need at least one factor policy")
    jobs = [(replace(c, seed=master_seed, replication=k), tuple(quantiles),
             tuple(checkpoints), policies, level)
            for c in configs for k in range(reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_job, jobs, chunksize=1))
    else:
        results = [_job(j) for j in jobs]

    rows, failures, reps_out = [], {}, {}
    for ci, c in enumerate(configs):
        cfg_key = (c.scenario, c.N, c.S, c.T)
        block = results[ci * reps:(ci + 1) * reps]
        reps_out[cfg_key] = block
        for r_fixed in policies:
            label = policy_label(r_fixed)
            good = [r[label] for r in block
                    if "error" not in r and all(v["ok"] for v in r[label].values())]
            n_fail = reps - len(good)
            failures[cfg_key + (label,)] = n_fail
            if n_fail > max_failure_rate * reps:
                errs = [r.get("error", "not converged") for r in block
                        if "error" in r or not all(v["ok"] for v in r[label].values())][:3]
                raise MonteCarloError(
                    f"{n_fail}/{reps} replications failed for {cfg_key} factors={label}: {errs}")
            for u in quantiles:
                recs = [g[u] for g in good]
                truth = float(delta_t(c.T, c.T, u))
                for m in [f"m{k}" for k in checkpoints] + ["converged"]:
                    err = np.array([rec[m] - truth for rec in recs])
                    cover = float("nan")
                    if m == "converged":
                        cover = float(np.mean([rec["lo"] <= truth <= rec["hi"] for rec in recs]))
                    rows.append({"scenario": c.scenario, "N": c.N, "S": c.S, "T": c.T, "u": u,
                                 "m": m[1:] if m != "converged" else m,
                                 "bias": float(np.mean(err)), "sd": float(np.std(err, ddof=1)),
                                 "coverage": cover, "factors": label,
                                 "replications": len(recs)})
    return MonteCarloReport(rows, failures, reps_out)
