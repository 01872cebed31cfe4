import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from entropic_pia.model import Boundary, Grid1D, TimeGrid, ValueField
from entropic_pia.pde import (LinearPdeCoefficients, PdeSolveError, assemble, cyclic_thomas, matvec,
                              solve_elliptic, solve_parabolic, thomas)


def periodic(n):
    return Grid1D(0.0, 2 * math.pi, n, Boundary.PERIODIC)


def sin_oracle(rho):
    """w = A sin x + B cos x solving rho w = w''/2 + w' + sin x (independent 2x2 solve)."""
    k = rho + 0.5
    # sin: k A + B = 1 ; cos: k B - A = 0
    a, b = np.linalg.solve([[k, 1.0], [-1.0, k]], [1.0, 0.0])
    return a, b


class TestCoefficients:
    def test_broadcast(self):
        c = LinearPdeCoefficients(0.5, np.zeros(4), 1.0)
        assert c.second_order.shape == (4,)

    def test_ellipticity_floor(self):
        with pytest.raises(ValueError, match="ellipticity"):
            LinearPdeCoefficients(np.full(3, 0.4), 0.0, 0.0, 1.0, min_second_order=0.5)
        LinearPdeCoefficients(np.full(3, 0.5 - 1e-13), 0.0, 0.0, 1.0, min_second_order=0.5)

    def test_rejects_nonfinite_and_negative_discount(self):
        with pytest.raises(ValueError):
            LinearPdeCoefficients(np.array([0.5, np.nan]), 0.0, 0.0)
        with pytest.raises(ValueError):
            LinearPdeCoefficients(0.5, 0.0, 0.0, discount=-1.0)


class TestTridiagonal:
    def test_thomas_matches_dense(self, rng):
        n = 30
        lo, up = rng.uniform(-1, 0, n), rng.uniform(-1, 0, n)
        d = 3.0 + rng.uniform(0, 1, n)
        rhs = rng.normal(size=n)
        dense = np.diag(d) + np.diag(lo[1:], -1) + np.diag(up[:-1], 1)
        np.testing.assert_allclose(thomas(lo, d, up, rhs), np.linalg.solve(dense, rhs), rtol=1e-12)

    def test_cyclic_matches_dense(self, rng):
        n = 25
        lo, up = rng.uniform(-1, 0, n), rng.uniform(-1, 0, n)
        d = 3.0 + rng.uniform(0, 1, n)
        rhs = rng.normal(size=n)
        dense = np.diag(d) + np.diag(lo[1:], -1) + np.diag(up[:-1], 1)
        dense[0, -1], dense[-1, 0] = lo[0], up[-1]
        np.testing.assert_allclose(cyclic_thomas(lo, d, up, rhs), np.linalg.solve(dense, rhs), rtol=1e-12)

    def test_zero_pivot(self):
        with pytest.raises(PdeSolveError, match="pivot"):
            thomas(np.zeros(3), np.zeros(3), np.zeros(3), np.ones(3))


class TestElliptic:
    @pytest.mark.parametrize("boundary", list(Boundary))
    def test_constant_solution(self, boundary, rng):
        g = Grid1D(0.0, 2 * math.pi, 40, boundary)
        rho, c = 1.7, -2.3
        coeffs = LinearPdeCoefficients(rng.uniform(0.2, 2, 40), rng.uniform(-3, 3, 40), rho * c, rho)
        np.testing.assert_allclose(solve_elliptic(coeffs, g).values, c, rtol=1e-12)

    def test_sin_source_oracle(self):
        a, b = sin_oracle(1.0)
        assert b == pytest.approx(4 / 13)   # w(0) = B
        g = periodic(512)
        w = solve_elliptic(LinearPdeCoefficients(0.5, 1.0, np.sin(g.nodes), 1.0), g)
        exact = a * np.sin(g.nodes) + b * np.cos(g.nodes)
        assert np.max(np.abs(w.values - exact)) <= 1e-4
        assert w.values[0] == pytest.approx(4 / 13, abs=1e-4)

    def test_second_order_convergence(self):
        a, b = sin_oracle(1.0)
        errs = []
        for n in (256, 512):
            g = periodic(n)
            w = solve_elliptic(LinearPdeCoefficients(0.5, 1.0, np.sin(g.nodes), 1.0), g)
            errs.append(np.max(np.abs(w.values - a * np.sin(g.nodes) - b * np.cos(g.nodes))))
        assert 4 * 0.8 <= errs[0] / errs[1] <= 4 * 1.2

    def test_needs_discount(self):
        g = periodic(16)
        with pytest.raises(PdeSolveError, match="positive discount"):
            solve_elliptic(LinearPdeCoefficients(0.5, 0.0, 0.0, 0.0), g)

    def test_upwinding_switch_logged(self, caplog):
        g = Grid1D(0.0, 1.0, 11)
        c1 = np.full(11, 50.0)
        with caplog.at_level(logging.INFO, logger="entropic_pia.pde"):
            m = assemble(LinearPdeCoefficients(0.1, c1, 0.0, 1.0), g, 1.0)
        assert m.n_upwind == 9
        assert "upwinded" in caplog.text
        # M-matrix: nonpositive off-diagonals
        assert np.all(m.lower[1:-1] <= 0) and np.all(m.upper[1:-1] <= 0)

    def test_reflecting_rows_are_m_matrix(self, rng):
        g = Grid1D(0.0, 1.0, 21, Boundary.REFLECTING)
        m = assemble(LinearPdeCoefficients(rng.uniform(0.1, 1, 21), rng.uniform(-30, 30, 21), 0.0, 1.0), g, 1.0)
        assert np.all(m.lower[1:] <= 0) and np.all(m.upper[:-1] <= 0)
        assert m.n_outward_boundary == 0

    def test_outward_drift_flagged(self):
        g = Grid1D(0.0, 1.0, 11, Boundary.LINEAR_EXTRAPOLATION)
        m = assemble(LinearPdeCoefficients(0.5, np.array([-1.0] + [0.0] * 9 + [1.0]), 0.0, 1.0), g, 1.0)
        assert m.n_outward_boundary == 2

    @settings(max_examples=40, deadline=None)
    @given(arrays(float, 48, elements=st.floats(0, 10)), st.sampled_from(list(Boundary)),
           st.floats(0.05, 5), st.floats(-20, 20))
    def test_maximum_principle(self, f, boundary, rho, drift):
        if boundary is Boundary.LINEAR_EXTRAPOLATION:
            # pure-transport end rows are monotone only for inward drift
            c1 = np.linspace(abs(drift), -abs(drift), 48)
        else:
            c1 = np.full(48, drift)
        g = Grid1D(-1.0, 1.0, 48, boundary)
        w = solve_elliptic(LinearPdeCoefficients(0.3, c1, f, rho), g)
        assert np.all(w.values >= -1e-12 * (1 + np.max(f)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(float, (2, 32), elements=st.floats(-10, 10)), st.floats(-5, 5), st.floats(-5, 5))
    def test_linearity(self, fs, alpha, beta):
        g = Grid1D(0.0, 1.0, 32, Boundary.REFLECTING)
        c2, c1 = np.linspace(0.2, 1.0, 32), np.linspace(-1, 2, 32)
        sol = lambda f: solve_elliptic(LinearPdeCoefficients(c2, c1, f, 0.7), g).values
        lhs = sol(alpha * fs[0] + beta * fs[1])
        rhs = alpha * sol(fs[0]) + beta * sol(fs[1])
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * (1 + np.max(np.abs(lhs)))

    def test_residual_small(self, rng):
        g = Grid1D(-3.0, 3.0, 101, Boundary.REFLECTING)
        coeffs = LinearPdeCoefficients(rng.uniform(0.5, 1, 101), rng.uniform(-1, 1, 101), rng.normal(size=101), 2.0)
        w = solve_elliptic(coeffs, g)
        m = assemble(coeffs, g, 2.0)
        res = np.max(np.abs(matvec(m, w.values) - coeffs.source))
        assert res <= 1e-12 * np.max(np.abs(coeffs.source))


class TestParabolic:
    def test_constant_preserved(self):
        g = periodic(32)
        term = ValueField.from_values(g, np.full(32, 1.5))
        w = solve_parabolic(LinearPdeCoefficients(np.full(32, 0.5), np.sin(g.nodes), 0.0), term, TimeGrid(2.0, 7))
        np.testing.assert_allclose(w.values, 1.5, rtol=1e-13)

    @pytest.mark.parametrize("boundary", list(Boundary))
    def test_affine_in_time_exact(self, boundary, rng):
        g = Grid1D(0.0, 2 * math.pi, 30, boundary)
        tg = TimeGrid(1.3, 5)
        term = ValueField.from_values(g, np.zeros(30))
        coeffs = [LinearPdeCoefficients(rng.uniform(0.2, 1, 30), rng.uniform(-2, 2, 30), 1.0) for _ in range(5)]
        w = solve_parabolic(coeffs, term, tg)
        np.testing.assert_allclose(w.values, (tg.horizon - tg.times)[:, None] * np.ones(30), atol=1e-13)

    def test_heat_semigroup_on_sin(self):
        g = periodic(256)
        term = ValueField.from_values(g, np.sin(g.nodes))
        w = solve_parabolic(LinearPdeCoefficients(np.full(256, 0.5), 0.0, 0.0), term, TimeGrid(1.0, 1000))
        assert np.max(np.abs(w.values[0] - math.exp(-0.5) * np.sin(g.nodes))) <= 1e-3

    def test_wrong_number_of_levels(self):
        g = periodic(16)
        term = ValueField.from_values(g, np.zeros(16))
        with pytest.raises(ValueError, match="coefficient sets"):
            solve_parabolic([LinearPdeCoefficients(np.full(16, 0.5), 0.0, 0.0)] * 3, term, TimeGrid(1.0, 5))
