"""Builders for small random test instances."""
from __future__ import annotations

import numpy as np


def random_design(rng, S=8, T=6, K=1, T0=3, n_treated=None):
    from qrife.panel_ife import GroupDesign
    n_treated = n_treated or S // 2
    d = np.zeros(S)
    d[rng.choice(S, n_treated, replace=False)] = 1.0
    return GroupDesign(rng.standard_normal((S, T, K)), d, T0)


def orthonormal_factors(rng, T, r):
    q, _ = np.linalg.qr(rng.standard_normal((T, r)))
    return np.sqrt(T) * q
