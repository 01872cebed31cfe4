import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from entropic_pia.model import (Boundary, ControlProblem, Grid1D, Mode, TimeGrid, ValueField,
                                finite_difference_derivatives, norms)


def _problem(**kw):
    base = dict(drift=lambda x, a: a + 0 * x, diffusion=lambda x, a: 1.0 + 0 * x * a,
                running_reward=lambda x, a: 0 * x * a, action_lo=-1.0, action_hi=1.0,
                temperature=1.0, coefficient_bound=1.0, sigma_min=1.0, discount=1.0)
    base.update(kw)
    return ControlProblem(**base)


PERIODIC = Grid1D(0.0, 2 * math.pi, 512, Boundary.PERIODIC)
finite_floats = st.floats(-1e3, 1e3, allow_nan=False)


class TestControlProblem:
    def test_valid(self):
        p = _problem()
        assert p.action_length == 2.0
        assert p.log_action_length_plus == pytest.approx(math.log(2))
        assert not p.is_finite_horizon

    def test_log_length_clipped(self):
        assert _problem(action_lo=0.0, action_hi=0.5).log_action_length_plus == 0.0

    def test_empty_action_interval(self):
        with pytest.raises(ValueError, match="empty action"):
            _problem(action_lo=1.0, action_hi=1.0)

    @pytest.mark.parametrize("kw", [dict(discount=None), dict(horizon=1.0, terminal_reward=lambda x: x)])
    def test_exactly_one_of_horizon_discount(self, kw):
        with pytest.raises(ValueError, match="exactly one"):
            _problem(**kw)

    def test_finite_horizon_needs_terminal(self):
        with pytest.raises(ValueError, match="terminal_reward"):
            _problem(discount=None, horizon=1.0)

    def test_sigma_below_floor(self):
        with pytest.raises(ValueError, match="sigma_min"):
            _problem(diffusion=lambda x, a: 0.5 + 0 * x * a)

    def test_drift_mode_rejects_action_dependent_sigma(self):
        with pytest.raises(ValueError, match="ignores the action"):
            _problem(diffusion=lambda x, a: 1.5 + 0.2 * a + 0 * x, sigma_min=1.0)

    def test_diffusion_mode_accepts_action_dependent_sigma(self):
        p = _problem(diffusion=lambda x, a: 1.5 + 0.2 * a + 0 * x, mode=Mode.DIFFUSION_CONTROL_1D)
        assert p.mode is Mode.DIFFUSION_CONTROL_1D

    @pytest.mark.parametrize("field_name", ["temperature", "coefficient_bound", "sigma_min", "discount"])
    def test_nonpositive_rejected(self, field_name):
        with pytest.raises(ValueError):
            _problem(**{field_name: 0.0})


class TestGrids:
    def test_spacing(self):
        g = Grid1D(0.0, 1.0, 11)
        assert g.spacing == pytest.approx(0.1)
        assert np.all(np.diff(g.nodes) > 0)
        assert g.nodes[-1] == pytest.approx(1.0)

    def test_periodic_excludes_endpoint(self):
        assert PERIODIC.spacing == pytest.approx(2 * math.pi / 512)
        assert PERIODIC.nodes[-1] < 2 * math.pi

    @pytest.mark.parametrize("boundary", list(Boundary))
    def test_refined_keeps_old_nodes(self, boundary):
        g = Grid1D(-1.0, 2.0, 17, boundary)
        np.testing.assert_allclose(g.refined().nodes[::2], g.nodes, atol=1e-14)

    def test_rejects_small_grids(self):
        with pytest.raises(ValueError):
            Grid1D(0.0, 1.0, 2)
        with pytest.raises(ValueError):
            Grid1D(1.0, 0.0, 5)

    def test_time_grid(self):
        tg = TimeGrid(2.0, 8)
        assert tg.dt == 0.25
        assert tg.times[-1] == 2.0
        with pytest.raises(ValueError):
            TimeGrid(1.0, 0)


class TestDerivatives:
    @pytest.mark.parametrize("boundary", list(Boundary))
    def test_constant(self, boundary):
        f = ValueField.from_values(Grid1D(0.0, 1.0, 9, boundary), np.full(9, 3.7))
        assert np.all(f.dx == 0) and np.all(f.dxx == 0)

    def test_linear_extrapolation_identity(self):
        g = Grid1D(-2.0, 3.0, 21, Boundary.LINEAR_EXTRAPOLATION)
        f = ValueField.from_values(g, g.nodes)
        np.testing.assert_allclose(f.dx, 1.0, atol=1e-13)
        np.testing.assert_allclose(f.dxx, 0.0, atol=1e-10)

    def test_sin_periodic(self):
        # central difference error h^2/6 |f'''| with h = 2 pi / 512
        f = ValueField.from_values(PERIODIC, np.sin(PERIODIC.nodes))
        assert np.max(np.abs(f.dx - np.cos(PERIODIC.nodes))) <= 1e-4

    def test_reflecting_ends(self):
        g = Grid1D(0.0, 1.0, 11, Boundary.REFLECTING)
        u = g.nodes**2
        f = ValueField.from_values(g, u)
        assert f.dx[0] == 0.0 and f.dx[-1] == 0.0
        assert f.dxx[0] == pytest.approx(2 * (u[1] - u[0]) / g.spacing**2)

    def test_time_indexed(self):
        g = Grid1D(0.0, 1.0, 11)
        vals = np.outer([1.0, 2.0], g.nodes**2)
        f = ValueField.from_values(g, vals)
        single = f.at_time(1)
        np.testing.assert_array_equal(single.dxx, ValueField.from_values(g, vals[1]).dxx)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="non-finite"):
            ValueField.from_values(Grid1D(0.0, 1.0, 3), [0.0, np.nan, 1.0])

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            ValueField.from_values(Grid1D(0.0, 1.0, 3), [0.0, 1.0])

    def test_read_only(self):
        f = ValueField.from_values(Grid1D(0.0, 1.0, 3), [0.0, 1.0, 2.0])
        with pytest.raises(ValueError):
            f.values[0] = 1.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, 33, elements=finite_floats), st.sampled_from(list(Boundary)))
    def test_idempotent(self, vals, boundary):
        f = ValueField.from_values(Grid1D(0.0, 1.0, 33, boundary), vals)
        again = finite_difference_derivatives(f)
        np.testing.assert_array_equal(again.dx, f.dx)
        np.testing.assert_array_equal(again.dxx, f.dxx)

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, 64, elements=finite_floats))
    def test_periodic_dx_mean_zero(self, vals):
        f = ValueField.from_values(Grid1D(0.0, 1.0, 64, Boundary.PERIODIC), vals)
        scale = np.max(np.abs(vals)) / f.grid.spacing + 1.0
        assert abs(np.mean(f.dx)) <= 1e-13 * scale


class TestNorms:
    def test_identity(self):
        f = ValueField.from_values(PERIODIC, np.sin(PERIODIC.nodes))
        d = norms(f, f)
        assert (d.c0, d.c1, d.c2) == (0.0, 0.0, 0.0)

    def test_constant_shift(self):
        g = Grid1D(0.0, 1.0, 21)
        a = ValueField.from_values(g, g.nodes**2)
        b = ValueField.from_values(g, g.nodes**2 + 1)
        d = norms(a, b)
        assert d.c0 == pytest.approx(1.0)
        assert d.c1 <= 1e-12 and d.c2 <= 1e-9
        assert d.total == pytest.approx(d.c0 + d.c1 + d.c2)

    def test_sin_against_zero(self):
        a = ValueField.from_values(PERIODIC, np.sin(PERIODIC.nodes))
        z = ValueField.from_values(PERIODIC, np.zeros(512))
        d = norms(a, z)
        for c in (d.c0, d.c1, d.c2):
            assert abs(c - 1.0) <= 1e-3

    def test_grid_mismatch(self):
        a = ValueField.from_values(Grid1D(0.0, 1.0, 5), np.zeros(5))
        b = ValueField.from_values(Grid1D(0.0, 2.0, 5), np.zeros(5))
        with pytest.raises(ValueError, match="different grids"):
            norms(a, b)

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (3, 17), elements=st.floats(-10, 10)))
    def test_pseudometric(self, vals):
        g = Grid1D(0.0, 1.0, 17, Boundary.PERIODIC)
        a, b, c = (ValueField.from_values(g, v) for v in vals)
        ab, ba, bc, ac = norms(a, b), norms(b, a), norms(b, c), norms(a, c)
        assert (ab.c0, ab.c1, ab.c2) == (ba.c0, ba.c1, ba.c2)
        for k in ("c0", "c1", "c2"):
            x, y, z = getattr(ab, k), getattr(bc, k), getattr(ac, k)
            assert x >= 0
            assert z <= x + y + 1e-12 * (1 + x + y)
