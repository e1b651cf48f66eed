"""Plug-in bias and covariance estimates and bias-corrected confidence intervals.

For a post-period t the policy coefficients satisfy, jointly over quantiles,
sqrt(S)(delta_hat - delta) ~ N(B_t, Sigma_t).  The estimators below replace
the population quantities with fitted factors, loadings and residuals and
assume no residual correlation across groups or periods.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .panel_ife import FactorModelFit, GroupDesign
from .policy_effects import DeltaProfile, EffectQuery, evaluate


class DegenerateLoadingsError(np.linalg.LinAlgError):
    pass


class NoIdentifyingVariationError(ValueError):
    pass


def _loading_gram_inv(Lambda: np.ndarray) -> np.ndarray:
    S, r = Lambda.shape
    G = Lambda.T @ Lambda / S
    if r and np.linalg.cond(G) > 1e12:
        raise DegenerateLoadingsError("loading Gram matrix is singular")
    return np.linalg.inv(G) if r else np.zeros((0, 0))


def rhat(d, Lambda) -> np.ndarray:
    """Treatment flags net of their projection on the estimated loadings."""
    d = np.asarray(d, dtype=float).ravel()
    Lambda = np.asarray(Lambda, dtype=float).reshape(d.shape[0], -1)
    S = d.shape[0]
    if Lambda.shape[1] == 0:
        return d.copy()
    Ginv = _loading_gram_inv(Lambda)
    return d - Lambda @ (Ginv @ (Lambda.T @ d / S))


def _r_scale(R: np.ndarray) -> float:
    v = float(np.mean(R * R))
    if v <= 1e-14:
        raise NoIdentifyingVariationError(
            "treatment indicator has no variation left after projecting on the loadings")
    return v


def _col(design: GroupDesign, t: int) -> int:
    if not design.T0 <= t <= design.T:
        raise ValueError(f"period {t} is before the policy start T0={design.T0}")
    return t - 1


def bias_hat_single(fit: FactorModelFit, design: GroupDesign, t: int) -> float:
    S, T = design.S, design.T
    k = _col(design, t)
    d = design.d
    R = rhat(d, fit.Lambda)
    if fit.r == 0:
        return 0.0
    Ginv = _loading_gram_inv(fit.Lambda)
    # sum over (s, g) factorises into sum_g eta_gt^2 times sum_s d_s f_t' G^{-1} lambda_s
    proj = fit.Lambda @ (Ginv @ fit.F[k])
    total = float(np.sum(fit.eta[:, k] ** 2)) * float(d @ proj)
    return -total / (S ** 1.5 * T) / _r_scale(R)


def bias_hat(fits: Sequence[FactorModelFit], design: GroupDesign, t: int) -> np.ndarray:
    """J-vector of estimated asymptotic biases at period t (one fit per coefficient)."""
    return np.array([bias_hat_single(f, design, t) for f in fits])


def sigma_hat(fits_u1: Sequence[FactorModelFit], fits_u2: Sequence[FactorModelFit],
              design: GroupDesign, t: int) -> np.ndarray:
    """J x J cross-quantile covariance block Sigma_t(u1, u2)."""
    k = _col(design, t)
    R1 = np.array([rhat(design.d, f.Lambda) for f in fits_u1])     # (J, S)
    R2 = np.array([rhat(design.d, f.Lambda) for f in fits_u2])
    e1 = np.array([f.eta[:, k] for f in fits_u1])
    e2 = np.array([f.eta[:, k] for f in fits_u2])
    v1 = np.array([_r_scale(r) for r in R1])
    v2 = np.array([_r_scale(r) for r in R2])
    S = design.S
    cross = (R1 * e1) @ (R2 * e2).T / S
    return cross / np.outer(v1, v2)


@dataclass
class InferenceComponents:
    t: int
    S: int
    Rhat: dict = field(default_factory=dict)    # u -> (J, S)
    Bhat: dict = field(default_factory=dict)    # u -> (J,)
    Sigma: dict = field(default_factory=dict)   # (u1, u2) -> (J, J)

    def sigma(self, u1: float, u2: float) -> np.ndarray:
        if (u1, u2) in self.Sigma:
            return self.Sigma[(u1, u2)]
        return self.Sigma[(u2, u1)].T


def build_components(fits: Mapping[float, Sequence[FactorModelFit]], design: GroupDesign,
                     t: int, pairs: Iterable[tuple[float, float]] | None = None
                     ) -> InferenceComponents:
    """Bias vectors for every fitted quantile and covariance blocks for ``pairs``.

    Diagonal blocks (u, u) are always included.
    """
    comp = InferenceComponents(t=t, S=design.S)
    for u, per_j in fits.items():
        comp.Rhat[u] = np.array([rhat(design.d, f.Lambda) for f in per_j])
        comp.Bhat[u] = bias_hat(per_j, design, t)
        comp.Sigma[(u, u)] = sigma_hat(per_j, per_j, design, t)
    for u1, u2 in pairs or ():
        if (u1, u2) not in comp.Sigma and (u2, u1) not in comp.Sigma:
            comp.Sigma[(u1, u2)] = sigma_hat(fits[u1], fits[u2], design, t)
    return comp


@dataclass(frozen=True)
class EffectEstimate:
    query: EffectQuery
    point: float
    bias: float
    se: float
    lo: float
    hi: float
    level: float

    @property
    def corrected(self) -> float:
        return 0.5 * (self.lo + self.hi)


def confidence_interval(point: float, bias: float, variance: float, S: int,
                        level: float = 0.95) -> tuple[float, float]:
    """Bias-corrected normal interval point - bias/sqrt(S) -+ q * sqrt(variance / S)."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    if variance < 0.0:
        warnings.warn(f"negative variance {variance:.3g} clipped to zero", RuntimeWarning,
                      stacklevel=2)
        variance = 0.0
    q = float(norm.ppf(0.5 * (1.0 + level)))
    center = point - bias / math.sqrt(S)
    half = q * math.sqrt(variance / S)
    return center - half, center + half


def effect_moments(query: EffectQuery, comp: InferenceComponents) -> tuple[float, float]:
    """(c'B, c'Sigma c) for the query's loading vector c."""
    if query.kind == "aqtt":
        z = np.asarray(query.z, dtype=float)
        return float(z @ comp.Bhat[query.u]), float(z @ comp.sigma(query.u, query.u) @ z)
    if query.kind == "between":
        c = np.asarray(query.z2, dtype=float) - np.asarray(query.z1, dtype=float)
        return float(c @ comp.Bhat[query.u]), float(c @ comp.sigma(query.u, query.u) @ c)
    z = np.asarray(query.z, dtype=float)
    u1, u2 = query.u1, query.u2
    bias = float(z @ (comp.Bhat[u2] - comp.Bhat[u1]))
    block = comp.sigma(u1, u1) - comp.sigma(u1, u2) - comp.sigma(u2, u1) + comp.sigma(u2, u2)
    return bias, float(z @ block @ z)


def estimate_effect(query: EffectQuery, profile: DeltaProfile, comp: InferenceComponents,
                    level: float = 0.95) -> EffectEstimate:
    point = evaluate(profile, query)
    bias, var = effect_moments(query, comp)
    lo, hi = confidence_interval(point, bias, var, comp.S, level)
    return EffectEstimate(query, point, bias, math.sqrt(max(var, 0.0) / comp.S), lo, hi, level)
