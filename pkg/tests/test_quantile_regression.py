from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import qr_enumeration, rho
from qrife.quantile_regression import (
    CellFitError, MicroPanel, SingularDesignError, SolverFailure, _frisch_newton, check_loss,
    fit_first_step, fit_qr, fit_qr_full, objective)
from qrife.simulation import DgpConfig, generate


class TestCheckLoss:
    @pytest.mark.parametrize("v,u,expected", [(-1.0, 0.5, 0.5), (0.0, 0.3, 0.0), (2.0, 0.9, 1.8)])
    def test_values(self, v, u, expected):
        assert check_loss(v, u) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.2, 1.5])
    def test_domain(self, u):
        with pytest.raises(ValueError):
            check_loss(1.0, u)

    @given(st.floats(-1e6, 1e6), st.floats(0.01, 0.99))
    def test_nonnegative_and_matches_definition(self, v, u):
        got = check_loss(v, u)
        assert got >= 0.0
        assert got == pytest.approx((u - (v < 0)) * v, rel=1e-12, abs=1e-12)


class TestFitQR:
    def test_median_of_three(self):
        a = fit_qr(np.ones((3, 1)), np.array([1.0, 2.0, 3.0]), 0.5)
        assert a[0] == pytest.approx(2.0, abs=1e-9)

    def test_lower_quartile_vertex(self):
        Z, y = np.ones((4, 1)), np.array([1.0, 2.0, 3.0, 4.0])
        a = fit_qr(Z, y, 0.25)
        best, _ = qr_enumeration(Z, y, 0.25)
        assert 1.0 - 1e-9 <= a[0] <= 2.0 + 1e-9
        assert objective(Z, y, a, 0.25) == pytest.approx(best, abs=1e-8)
        # reported point is a vertex: it interpolates one observation
        assert np.min(np.abs(y - a[0])) < 1e-9

    def test_random_instance_matches_enumeration(self, rng):
        Z = np.column_stack([np.ones(20), rng.standard_normal(20)])
        y = Z @ [1.0, -0.5] + rng.standard_normal(20)
        best, _ = qr_enumeration(Z, y, 0.3)
        assert objective(Z, y, fit_qr(Z, y, 0.3), 0.3) == pytest.approx(best, abs=1e-8)

    def test_subgradient_optimality(self, rng):
        for _ in range(20):
            N = int(rng.integers(5, 40))
            Z = np.column_stack([np.ones(N), rng.uniform(size=N), rng.standard_normal(N)])
            y = rng.standard_normal(N)
            u = float(rng.uniform(0.05, 0.95))
            a = fit_qr(Z, y, u)
            r = y - Z @ a
            zero = np.abs(r) < 1e-9
            g = Z[~zero].T @ (u - (r[~zero] < 0))
            slack = np.abs(Z[zero]).sum(axis=0)
            assert np.all(np.abs(g) <= slack + 1e-8)

    def test_singular_design_names_columns(self):
        Z = np.column_stack([np.ones(6), np.arange(6.0), 2 * np.arange(6.0)])
        with pytest.raises(SingularDesignError) as err:
            fit_qr(Z, np.arange(6.0), 0.5)
        assert 2 in err.value.columns

    def test_too_few_rows(self):
        with pytest.raises(SingularDesignError):
            fit_qr(np.ones((1, 2)), np.ones(1), 0.5)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            fit_qr(np.ones((3, 1)), np.array([1.0, np.nan, 2.0]), 0.5)

    def test_solver_failure_reports_iterations(self, rng):
        Z = np.column_stack([np.ones(50), rng.standard_normal(50)])
        y = rng.standard_normal(50)
        coef, ok, iters = _frisch_newton(Z[None], y[None], 0.5, 1e-9, 2)
        assert not ok[0] and iters[0] == 2
        assert isinstance(SolverFailure("x", 7).iterations, int)

    def test_engines_agree(self, rng):
        for _ in range(30):
            N = int(rng.integers(5, 60))
            Z = np.column_stack([np.ones(N), rng.standard_normal(N)])
            y = rng.standard_normal(N)
            u = float(rng.uniform(0.05, 0.95))
            a = objective(Z, y, fit_qr(Z, y, u, engine="compiled"), u)
            b = objective(Z, y, fit_qr(Z, y, u, engine="numpy"), u)
            assert a == pytest.approx(b, abs=1e-9)

    def test_status_reported(self, rng):
        Z = np.column_stack([np.ones(10), rng.standard_normal(10)])
        sol = fit_qr_full(Z, rng.standard_normal(10), 0.5)
        assert sol.status in ("interior-point", "irls-fallback")
        assert sol.iterations >= 0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), N=st.integers(2, 25), J=st.integers(1, 2),
       u=st.sampled_from([0.1, 0.25, 0.5, 0.75, 0.9]))
def test_oracle_equivalence_property(seed, N, J, u):
    rng = np.random.default_rng(seed)
    cols = [np.ones(N)] + [rng.standard_normal(N) for _ in range(J - 1)]
    Z = np.column_stack(cols)
    y = np.round(rng.standard_normal(N), 2)      # ties exercise degenerate vertices
    best, _ = qr_enumeration(Z, y, u)
    assert objective(Z, y, fit_qr(Z, y, u), u) <= best + 1e-8


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.1, 10.0), u=st.floats(0.05, 0.95))
def test_equivariance(seed, c, u):
    rng = np.random.default_rng(seed)
    N = 30
    Z = np.column_stack([np.ones(N), rng.standard_normal(N)])
    y = rng.standard_normal(N)
    b = rng.standard_normal(2)
    base = objective(Z, y, fit_qr(Z, y, u), u)
    # the minimum value is equivariant even when the minimiser is not unique
    assert objective(Z, c * y, fit_qr(Z, c * y, u), u) == pytest.approx(c * base, rel=1e-7, abs=1e-8)
    shifted = fit_qr(Z, y + Z @ b, u)
    assert objective(Z, y + Z @ b, shifted, u) == pytest.approx(base, rel=1e-7, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), u1=st.floats(0.02, 0.97), gap=st.floats(0.01, 0.5))
def test_constant_only_monotone_in_u(seed, u1, gap):
    u2 = min(u1 + gap, 0.98)
    y = np.random.default_rng(seed).standard_normal(15)
    Z = np.ones((15, 1))
    a1, a2 = fit_qr(Z, y, u1)[0], fit_qr(Z, y, u2)[0]
    assert a1 <= a2 + 1e-9


def _tiny_panel(values):
    cells = {(s, t): (np.array(values, dtype=float), np.ones((len(values), 1)))
             for s in (1, 2) for t in (1, 2)}
    return MicroPanel(cells, names=("const",))


class TestFirstStep:
    def test_two_by_two_grid(self):
        out = fit_first_step(_tiny_panel([0, 1, 2]), [0.5])
        arr = out[0.5].as_array()
        assert arr.shape == (2, 2, 1)
        assert np.allclose(arr, 1.0, atol=1e-9)

    def test_objective_below_zero_vector(self, rng):
        data = generate(DgpConfig(1, N=30, S=5, T=8, seed=1))
        for u, q in fit_first_step(data.panel, [0.2, 0.8]).items():
            for key, (y, Z) in data.panel.cells.items():
                assert q.objective[key] <= float(np.sum(rho(y, u))) + 1e-12

    def test_order_independence(self, rng):
        data = generate(DgpConfig(1, N=40, S=5, T=8, seed=2))
        keys = list(data.panel.cells)
        rng.shuffle(keys)
        shuffled = MicroPanel({k: data.panel.cells[k] for k in keys}, names=data.panel.names)
        a = fit_first_step(data.panel, [0.3, 0.7], batch_size=3)
        b = fit_first_step(shuffled, [0.7, 0.3], batch_size=7, threads=2)
        for u in (0.3, 0.7):
            assert np.array_equal(a[u].as_array(), b[u].as_array())

    def test_beats_true_coefficients(self):
        data = generate(DgpConfig(2, N=60, S=5, T=8, seed=5))
        for u, q in fit_first_step(data.panel, [0.1, 0.5, 0.9]).items():
            truth = data.true_alpha(u)
            for i, s in enumerate(data.panel.groups):
                for k, t in enumerate(data.panel.times):
                    y, Z = data.panel.cells[(s, t)]
                    assert q.objective[(s, t)] <= objective(Z, y, truth[i, k], u) + 1e-9

    def test_large_cell_recovers_truth(self):
        data = generate(DgpConfig(1, N=5000, S=5, T=8, seed=9))
        for u, q in fit_first_step(data.panel, [0.25, 0.5, 0.75]).items():
            assert np.max(np.abs(q.as_array() - data.true_alpha(u))) <= 0.05

    def test_failing_cell_is_named(self):
        cells = {(s, t): (np.arange(4.0), np.column_stack([np.ones(4), np.arange(4.0)]))
                 for s in (1, 2) for t in (1, 2)}
        cells[(2, 1)] = (np.arange(4.0), np.column_stack([np.ones(4), np.ones(4)]))
        with pytest.raises(CellFitError, match="group=2 time=1"):
            fit_first_step(MicroPanel(cells), [0.5])

    def test_missing_cell(self):
        cells = {(1, 1): (np.ones(2), np.ones((2, 1))), (1, 2): (np.ones(2), np.ones((2, 1))),
                 (2, 2): (np.ones(2), np.ones((2, 1)))}
        with pytest.raises(ValueError, match="missing cell group=2 time=1"):
            MicroPanel(cells)

    def test_coefficient_accessor(self):
        out = fit_first_step(_tiny_panel([0, 1, 2, 5]), [0.5])[0.5]
        assert out.coefficient(0).shape == (2, 2)
