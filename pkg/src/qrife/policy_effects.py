"""Policy functionals as linear combinations of the fitted policy coefficients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .panel_ife import FactorModelFit


class PrePeriodError(ValueError):
    pass


class MissingQuantileError(KeyError):
    pass


@dataclass(frozen=True)
class DeltaProfile:
    """delta[u] is a J x (T - T0 + 1) matrix; column k is period T0 + k."""

    delta: Mapping[float, np.ndarray]
    T0: int
    T: int

    @classmethod
    def from_fits(cls, fits: Mapping[float, Sequence[FactorModelFit]], T0: int, T: int):
        delta = {}
        for u, per_j in fits.items():
            rows = [np.asarray(f.delta, dtype=float) for f in per_j]
            if any(r.shape != (T - T0 + 1,) for r in rows):
                raise ValueError(f"fits at u={u} do not share the post-period length")
            delta[float(u)] = np.vstack(rows)
        return cls(delta, T0, T)

    @property
    def J(self) -> int:
        return next(iter(self.delta.values())).shape[0]

    def column(self, u: float, t: int) -> np.ndarray:
        if t < self.T0 or t > self.T:
            raise PrePeriodError(f"period {t} is outside the post-policy window [{self.T0}, {self.T}]")
        key = self._key(u)
        return self.delta[key][:, t - self.T0]

    def _key(self, u: float) -> float:
        for k in self.delta:
            if abs(k - u) <= 1e-12:
                return k
        raise MissingQuantileError(f"quantile {u} was not fitted")


def _vector(z, J: int) -> np.ndarray:
    z = np.asarray(z, dtype=float).ravel()
    if z.shape != (J,):
        raise ValueError(f"attribute vector has length {z.size}, expected {J}")
    return z


def aqtt(profile: DeltaProfile, z, u: float, t: int) -> float:
    """Average quantile treatment effect on the treated, z' delta_t(u)."""
    return float(_vector(z, profile.J) @ profile.column(u, t))


def between_inequality_change(profile: DeltaProfile, z1, z2, u: float, t: int) -> float:
    c = _vector(z2, profile.J) - _vector(z1, profile.J)
    return float(c @ profile.column(u, t))


def within_inequality_change(profile: DeltaProfile, z, u1: float, u2: float, t: int) -> float:
    if not u1 < u2:
        raise ValueError(f"within-inequality needs u1 < u2, got u1={u1}, u2={u2}")
    z = _vector(z, profile.J)
    return float(z @ (profile.column(u2, t) - profile.column(u1, t)))


KINDS = ("aqtt", "within", "between")


@dataclass(frozen=True)
class EffectQuery:
    """One requested policy functional.

    ``aqtt`` uses (z, u); ``between`` uses (z1, z2, u); ``within`` uses
    (z, u1, u2).  All attribute vectors follow the column order of the
    micro design matrix.
    """

    kind: str
    t: int
    u: float | None = None
    u1: float | None = None
    u2: float | None = None
    z: tuple | None = None
    z1: tuple | None = None
    z2: tuple | None = None
    label: str = ""

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in KINDS:
            raise ValueError(f"unknown effect kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        need = {"aqtt": ("z", "u"), "between": ("z1", "z2", "u"), "within": ("z", "u1", "u2")}[kind]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"{kind} query is missing {missing}")

    def quantiles(self) -> tuple[float, ...]:
        return (self.u1, self.u2) if self.kind == "within" else (self.u,)


def evaluate(profile: DeltaProfile, q: EffectQuery) -> float:
    if q.kind == "aqtt":
        return aqtt(profile, q.z, q.u, q.t)
    if q.kind == "between":
        return between_inequality_change(profile, q.z1, q.z2, q.u, q.t)
    return within_inequality_change(profile, q.z, q.u1, q.u2, q.t)
