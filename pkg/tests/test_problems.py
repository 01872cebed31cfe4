import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from entropic_pia.hamiltonian import GridHamiltonian, problem_quadrature
from entropic_pia.model import Boundary, ControlProblem, Grid1D, Mode
from entropic_pia.pia import RateClass, fit_rate
from entropic_pia.problems import (COUNTEREXAMPLE, DEFAULT_REGISTRY, ProblemSpec, audit_problem,
                                   counterexample_fourier, counterexample_grid, counterexample_oracle,
                                   counterexample_picard, diffusion_benchmark, get_problem, smooth_benchmark,
                                   tail_gap)


class TestOracle:
    @pytest.mark.parametrize("rho,n,expected", [(1.0, 1, 2 / 3), (1.0, 2, 0.0), (1.0, 3, -8 / 27), (1.0, 4, 0.0),
                                                (0.25, 5, 0.75**-5), (0.25, 1, 4 / 3), (0.25, 3, -(4 / 3) ** 3)])
    def test_values(self, rho, n, expected):
        assert counterexample_oracle(rho, n) == pytest.approx(expected, rel=1e-14)

    def test_odd_ratio(self):
        r = counterexample_oracle(0.25, 3) / counterexample_oracle(0.25, 1)
        assert abs(r) == pytest.approx(16 / 9)

    def test_rejects_negative_index(self):
        with pytest.raises(ValueError):
            counterexample_oracle(1.0, -1)

    @settings(max_examples=50)
    @given(st.floats(0.05, 5.0), st.integers(0, 12))
    def test_fourier_matches_oracle(self, rho, n):
        a, b = counterexample_fourier(rho, n)
        # v^n = A cos x + B sin x, so v^n_x(0) = B
        assert b == pytest.approx(counterexample_oracle(rho, n), rel=1e-12, abs=1e-300)

    @settings(max_examples=30)
    @given(st.floats(0.05, 5.0), st.integers(1, 10))
    def test_fourier_solves_the_recursion(self, rho, n):
        x = np.linspace(0, 2 * np.pi, 17)
        a0, b0 = counterexample_fourier(rho, n - 1)
        a1, b1 = counterexample_fourier(rho, n)
        v = a1 * np.cos(x) + b1 * np.sin(x)
        v_xx = -v
        prev_x = -a0 * np.sin(x) + b0 * np.cos(x)
        np.testing.assert_allclose(rho * v, 0.5 * v_xx + prev_x, atol=1e-12 * (1 + np.abs(prev_x).max()))


@pytest.mark.parametrize("rho", [1.0, 0.25])
def test_grid_matches_oracle(rho):
    grid = counterexample_grid(512)
    iterates = counterexample_picard(rho, grid, 9)
    assert len(iterates) == 10
    for n, v in enumerate(iterates[1:], start=1):
        exact = counterexample_oracle(rho, n)
        got = v.dx[0]
        if n % 2:
            assert abs(got - exact) <= 0.02 * abs(exact)
        else:
            assert abs(got) <= 1e-3
        # the whole iterate, not only x = 0, follows the two-term recursion
        a, b = counterexample_fourier(rho, n)
        scale = math.hypot(a, b)
        assert np.max(np.abs(v.values - a * np.cos(grid.nodes) - b * np.sin(grid.nodes))) <= 0.02 * scale


def test_divergence_detection():
    grid = counterexample_grid(512)
    odd = [1, 3, 5, 7, 9]
    for rho, expected in ((0.25, RateClass.DIVERGENT), (1.0, RateClass.EXPONENTIAL)):
        vs = counterexample_picard(rho, grid, 9)
        fit = fit_rate([abs(vs[n].dx[0]) for n in odd], steps=odd)
        assert fit.classification is expected
        if expected is RateClass.EXPONENTIAL:
            assert fit.eta == pytest.approx(1 / (rho + 0.5), abs=0.02)


def test_picard_rejects_bad_inputs():
    with pytest.raises(ValueError):
        counterexample_picard(1.0, Grid1D(0.0, 1.0, 16), 2)
    with pytest.raises(ValueError):
        counterexample_picard(0.0, counterexample_grid(16), 2)


@pytest.mark.parametrize("name", sorted(DEFAULT_REGISTRY))
def test_registered_problems_pass_audit(name):
    spec = DEFAULT_REGISTRY[name]
    result = audit_problem(spec.build())
    assert result.passed, result.failures
    assert result.checks["min sigma"] >= spec.build().sigma_min


def test_finite_horizon_audit_includes_terminal():
    result = audit_problem(smooth_benchmark().build(horizon=1.0))
    assert result.passed and "|g_xx|" in result.checks


def test_audit_flags_violations():
    p = ControlProblem(drift=lambda x, a: 3 * np.tanh(x) + 0 * a, diffusion=lambda x, a: 1.0 + 0 * (x + a),
                       running_reward=lambda x, a: 0 * (x + a), action_lo=0.0, action_hi=1.0, temperature=1.0,
                       coefficient_bound=2.0, sigma_min=1.0, discount=1.0)
    result = audit_problem(p)
    assert not result.passed
    assert "|b|" in result.failures and "|b_x|" in result.failures


def test_diffusion_tail_gap_decays():
    p = diffusion_benchmark().build()
    x = np.array([0.0, 2.0, 5.0, 10.0, 20.0])
    gap = tail_gap(p, x)
    assert np.all(gap <= 0.4 / np.cosh(x) + 1e-12)
    assert np.all(np.diff(gap) < 0) and gap[-1] < 1e-7


def test_diffusion_hq_envelope():
    p = diffusion_benchmark().build()
    grid = Grid1D(-10.0, 10.0, 201, Boundary.REFLECTING)
    gh = GridHamiltonian(p, grid, problem_quadrature(p))
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.uniform(-50, 50, grid.n_nodes)
        q = rng.uniform(-50, 50, grid.n_nodes)
        hq = gh(z, q).h_q
        assert hq.min() >= 0.18 - 1e-12 and hq.max() <= 0.98 + 1e-12


def test_smooth_benchmark_regimes(smooth_rho20, smooth_rho005):
    assert smooth_rho20.report.rates["eps1"].classification is RateClass.SUPER_EXPONENTIAL
    assert smooth_rho005.report.rates["eps1"].classification is not RateClass.DIVERGENT
    assert smooth_rho005.report.min_monotonicity >= -1e-8


def test_diffusion_benchmark_ratios_decrease(diffusion_rho20):
    rep = diffusion_rho20.report
    floor = rep.floors["eps1"] + rep.floors["eps2"]
    seq = [a + b for a, b in zip(rep.eps1, rep.eps2)]
    seq = [e for e in seq if e > floor]
    ratios = np.array(seq[1:]) / np.array(seq[:-1])
    assert len(ratios) >= 2
    assert np.all(np.diff(ratios) < 0)


class TestRegistry:
    def test_lookup(self):
        assert get_problem("smooth_benchmark") is smooth_benchmark()
        assert get_problem("counterexample") is COUNTEREXAMPLE

    def test_unknown_name(self):
        with pytest.raises(KeyError, match="known"):
            get_problem("nope")

    def test_unknown_parameter(self):
        with pytest.raises(KeyError):
            smooth_benchmark().build(bogus=1.0)

    def test_overrides(self):
        p = smooth_benchmark().build(discount=3.0, temperature=0.5)
        assert p.discount == 3.0 and p.temperature == 0.5
        q = smooth_benchmark().build(horizon=2.0)
        assert q.is_finite_horizon and q.discount is None
        assert smooth_benchmark().time_grid(q).n_steps == 100
        assert smooth_benchmark().time_grid(p) is None

    def test_modes(self):
        assert smooth_benchmark().build().mode is Mode.DRIFT_CONTROL
        assert diffusion_benchmark().build().mode is Mode.DIFFUSION_CONTROL_1D

    def test_custom_registry(self):
        reg = {"only": ProblemSpec("only", "", smooth_benchmark().builder, {"discount": 1.0, "horizon": None,
                                                                            "temperature": 1.0,
                                                                            "coefficient_bound": 2.0},
                                   smooth_benchmark().grid)}
        assert get_problem("only", reg).build().discount == 1.0
        with pytest.raises(KeyError):
            get_problem("smooth_benchmark", reg)
