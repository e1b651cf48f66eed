"""Quick built-in oracle checks, independent of the test suite."""
from __future__ import annotations

import itertools

import numpy as np

from .inference import bias_hat_single, sigma_hat
from .panel_ife import GroupDesign, fit_ife
from .policy_effects import DeltaProfile, between_inequality_change
from .quantile_regression import check_loss, fit_qr


def _qr_vs_enumeration(rng) -> float:
    worst = 0.0
    for _ in range(40):
        N = int(rng.integers(3, 15))
        Z = np.column_stack([np.ones(N), rng.standard_normal(N)])
        y = rng.standard_normal(N)
        u = float(rng.choice([0.1, 0.5, 0.9]))
        best = np.inf
        for rows in itertools.combinations(range(N), 2):
            B = Z[list(rows)]
            if abs(np.linalg.det(B)) > 1e-12:
                a = np.linalg.solve(B, y[list(rows)])
                best = min(best, float(np.sum(check_loss(y - Z @ a, u))))
        got = float(np.sum(check_loss(y - Z @ fit_qr(Z, y, u), u)))
        worst = max(worst, got - best)
    return worst


def _noiseless_recovery(rng) -> float:
    S, T, T0 = 20, 12, 4
    d = (np.arange(S) >= S // 4).astype(float)
    X = rng.standard_normal((S, T, 1))
    F = np.linalg.qr(rng.standard_normal((T, 1)))[0] * np.sqrt(T)
    Lam = rng.standard_normal((S, 1))
    delta = rng.standard_normal(T - T0 + 1)
    design = GroupDesign(X, d, T0)
    A = design.treatment_effect(delta) + X[..., 0] * 0.7 + Lam @ F.T
    fit = fit_ife(A, design, r_fixed=1, tol=1e-10, max_iter=5000)
    return float(np.max(np.abs(fit.delta - delta)))


def _inference_loops(rng) -> float:
    S, T, T0 = 6, 5, 2
    d = np.array([0, 0, 1, 1, 1, 1.0])
    design = GroupDesign(rng.standard_normal((S, T, 1)), d, T0)
    A = rng.standard_normal((S, T))
    fit = fit_ife(A, design, r_fixed=1, max_iter=50)
    t = T
    L, F, eta = fit.Lambda, fit.F, fit.eta
    G = L.T @ L / S
    R = np.array([d[s] - L[s] @ np.linalg.solve(G, sum(L[g] * d[g] for g in range(S)) / S)
                  for s in range(S)])
    scale = sum(R[s] ** 2 for s in range(S)) / S
    total = 0.0
    for s in range(S):
        for g in range(S):
            total += d[s] * eta[g, t - 1] ** 2 * (F[t - 1] @ np.linalg.solve(G, L[s]))
    b = -total / (S ** 1.5 * T) / scale
    v = sum(R[s] ** 2 * eta[s, t - 1] ** 2 for s in range(S)) / S / scale ** 2
    return max(abs(b - bias_hat_single(fit, design, t)),
               abs(v - sigma_hat([fit], [fit], design, t)[0, 0]))


def _functional_identity(rng) -> float:
    prof = DeltaProfile({0.5: rng.standard_normal((2, 3))}, 2, 4)
    z = rng.standard_normal(2)
    return abs(between_inequality_change(prof, z, z, 0.5, 3))


CHECKS = (
    ("quantile regression matches basic-solution enumeration", _qr_vs_enumeration, 1e-8),
    ("noiseless second step recovers the policy path", _noiseless_recovery, 1e-4),
    ("bias and variance match loop summation", _inference_loops, 1e-12),
    ("between-inequality of identical profiles is zero", _functional_identity, 1e-12),
)


def run_selftest(seed: int = 0, out=print) -> bool:
    rng = np.random.default_rng(seed)
    ok_all = True
    for name, fn, tol in CHECKS:
        err = fn(rng)
        ok = bool(err <= tol)
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}  (error {err:.2e}, tolerance {tol:g})")
    return ok_all
