"""Named reference problems and the Picard divergence counterexample.

Benchmark coefficients were chosen for the tests, not taken from anywhere:
bounded with bounded derivatives, nondegenerate diffusion, genuine action
dependence so the Gibbs policy is not uniform, and (diffusion benchmark)
coefficients that lose their action dependence as |x| grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from .model import Boundary, ControlProblem, Grid1D, Mode, TimeGrid, ValueField
from .pde import LinearPdeCoefficients, solve_elliptic


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    description: str
    builder: Callable[..., ControlProblem]
    defaults: Mapping[str, object]
    grid: Grid1D
    quad_nodes: int = 32
    time_steps: int = 100
    oracle: Optional[Callable] = None

    def build(self, **overrides) -> ControlProblem:
        params = dict(self.defaults)
        unknown = set(overrides) - set(params)
        if unknown:
            raise KeyError(f"{self.name} has no parameters {sorted(unknown)}")
        params.update(overrides)
        return self.builder(**params)

    def time_grid(self, problem: ControlProblem) -> Optional[TimeGrid]:
        if not problem.is_finite_horizon:
            return None
        return TimeGrid(problem.horizon, self.time_steps)


def _sech(x):
    return 1.0 / np.cosh(x)


def _build_smooth(discount=20.0, horizon=None, temperature=1.0, coefficient_bound=2.0):
    if horizon is not None:
        discount = None
    return ControlProblem(
        drift=lambda x, a: a * np.tanh(x) + 0.2 * np.sin(x),
        diffusion=lambda x, a: np.ones(np.broadcast_shapes(np.shape(x), np.shape(a))),
        running_reward=lambda x, a: -0.5 * a**2 + np.cos(x),
        terminal_reward=lambda x: 0.5 * np.cos(x),
        action_lo=-1.0, action_hi=1.0,
        temperature=temperature,
        coefficient_bound=coefficient_bound,
        sigma_min=1.0,
        horizon=horizon, discount=discount,
        mode=Mode.DRIFT_CONTROL,
        name="smooth_benchmark",
    )


def _build_diffusion(discount=20.0, temperature=1.0, coefficient_bound=2.0):
    return ControlProblem(
        drift=lambda x, a: a * _sech(x),
        diffusion=lambda x, a: 1.0 + 0.4 * np.sin(a) * _sech(x),
        running_reward=lambda x, a: -0.5 * a**2 + np.cos(x),
        action_lo=-1.0, action_hi=1.0,
        temperature=temperature,
        coefficient_bound=coefficient_bound,
        sigma_min=0.6,
        discount=discount,
        mode=Mode.DIFFUSION_CONTROL_1D,
        name="diffusion_benchmark",
    )


def _build_counterexample(discount=1.0):
    # Example's linear PDE rho v = v_xx/2 + v_x, written as a problem with a single
    # effective action; only used for registry listing and audits.
    return ControlProblem(
        drift=lambda x, a: np.ones(np.broadcast_shapes(np.shape(x), np.shape(a))),
        diffusion=lambda x, a: np.ones(np.broadcast_shapes(np.shape(x), np.shape(a))),
        running_reward=lambda x, a: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(a))),
        action_lo=0.0, action_hi=1.0,
        temperature=1.0, coefficient_bound=1.0, sigma_min=1.0,
        discount=discount, mode=Mode.DRIFT_CONTROL, name="counterexample",
    )


def counterexample_oracle(rho: float, n: int) -> float:
    """Closed-form v_x^n(0) of the Picard counterexample."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n % 2 == 0:
        return 0.0
    return (-1.0) ** ((n - 1) // 2) * (rho + 0.5) ** (-n)


def counterexample_fourier(rho: float, n: int):
    """Coefficients (A, B) with v^n = A cos x + B sin x, starting from v^0 = -cos x.

    Substituting the ansatz into rho v^n = v^n_xx / 2 + v^{n-1}_x gives
    (rho + 1/2) v^n = v^{n-1}_x, so (A, B) -> (B, -A) / (rho + 1/2).
    """
    a, b = -1.0, 0.0
    for _ in range(n):
        a, b = b / (rho + 0.5), -a / (rho + 0.5)
    return a, b


def counterexample_grid(n_nodes: int = 512) -> Grid1D:
    return Grid1D(0.0, 2 * math.pi, n_nodes, Boundary.PERIODIC)


def counterexample_picard(rho: float, grid: Grid1D, n_iter: int) -> List[ValueField]:
    """Picard iterates rho v^n = v^n_xx / 2 + v^{n-1}_x from v^0 = -cos x.

    Not a policy iteration: the previous iterate enters through the source.
    Returns ``[v^0, ..., v^n_iter]``.
    """
    if grid.boundary is not Boundary.PERIODIC:
        raise ValueError("the counterexample lives on a periodic grid")
    if not rho > 0:
        raise ValueError("rho must be positive")
    v = ValueField.from_values(grid, -np.cos(grid.nodes))
    out = [v]
    half = np.full(grid.n_nodes, 0.5)
    zero = np.zeros(grid.n_nodes)
    for _ in range(n_iter):
        v = solve_elliptic(LinearPdeCoefficients(half, zero, v.dx, rho), grid)
        out.append(v)
    return out


@dataclass(frozen=True)
class AuditResult:
    name: str
    passed: bool
    checks: Dict[str, float] = field(default_factory=dict)
    failures: tuple = ()


def audit_problem(problem: ControlProblem, x_range=(-10.0, 10.0), n_x: int = 401, n_a: int = 64,
                  step: float = 1e-4) -> AuditResult:
    """Numeric sweep of the boundedness and nondegeneracy assumptions.

    Checks sup |phi|, |phi_x|, |phi_xx| <= C0 for phi in b, sigma, r (and g on
    a finite horizon) using central differences of the callables, and
    sigma >= sigma_min.
    """
    x = np.linspace(*x_range, n_x)[:, None]
    a = np.linspace(problem.action_lo, problem.action_hi, n_a)[None, :]
    shape = (n_x, n_a)
    checks: Dict[str, float] = {}
    funcs = {"b": problem.drift, "sigma": problem.diffusion, "r": problem.running_reward}
    for key, f in funcs.items():
        f0 = np.broadcast_to(f(x, a), shape)
        fp = np.broadcast_to(f(x + step, a), shape)
        fm = np.broadcast_to(f(x - step, a), shape)
        checks[f"|{key}|"] = float(np.max(np.abs(f0)))
        checks[f"|{key}_x|"] = float(np.max(np.abs(fp - fm) / (2 * step)))
        checks[f"|{key}_xx|"] = float(np.max(np.abs(fp - 2 * f0 + fm) / step**2))
    if problem.is_finite_horizon:
        g = problem.terminal_reward
        xs = x[:, 0]
        checks["|g|"] = float(np.max(np.abs(g(xs))))
        checks["|g_x|"] = float(np.max(np.abs(g(xs + step) - g(xs - step)) / (2 * step)))
        checks["|g_xx|"] = float(np.max(np.abs(g(xs + step) - 2 * g(xs) + g(xs - step)) / step**2))
    c0 = problem.coefficient_bound
    # second differences of the callables carry ~1e-8 rounding noise
    failures = [k for k, v in checks.items() if v > c0 * (1 + 1e-6) + 1e-6]
    sig_min = float(np.min(np.broadcast_to(problem.diffusion(x, a), shape)))
    checks["min sigma"] = sig_min
    if sig_min < problem.sigma_min:
        failures.append("min sigma")
    return AuditResult(problem.name, not failures, checks, tuple(failures))


def tail_gap(problem: ControlProblem, x) -> np.ndarray:
    """sup over actions of |sigma(x, a) - sigma(x, a_mid)|; vanishes at infinity under the tail assumption."""
    x = np.asarray(x, dtype=float)[:, None]
    a = np.linspace(problem.action_lo, problem.action_hi, 201)[None, :]
    sig = np.broadcast_to(problem.diffusion(x, a), (x.shape[0], a.shape[1]))
    lim = np.broadcast_to(problem.diffusion(x, np.zeros((1, 1))), (x.shape[0], 1))
    return np.max(np.abs(sig - lim), axis=1)


SMOOTH_BENCHMARK = ProblemSpec(
    name="smooth_benchmark",
    description="drift control: b = a tanh x + 0.2 sin x, sigma = 1, r = -a^2/2 + cos x, A = [-1, 1]",
    builder=_build_smooth,
    defaults={"discount": 20.0, "horizon": None, "temperature": 1.0, "coefficient_bound": 2.0},
    grid=Grid1D(-4 * math.pi, 4 * math.pi, 503, Boundary.REFLECTING),
)

DIFFUSION_BENCHMARK = ProblemSpec(
    name="diffusion_benchmark",
    description="diffusion control: sigma = 1 + 0.4 sin(a) sech x, b = a sech x, r = -a^2/2 + cos x, A = [-1, 1]",
    builder=_build_diffusion,
    defaults={"discount": 20.0, "temperature": 1.0, "coefficient_bound": 2.0},
    grid=Grid1D(-4 * math.pi, 4 * math.pi, 503, Boundary.REFLECTING),
)

COUNTEREXAMPLE = ProblemSpec(
    name="counterexample",
    description="Picard iteration rho v^n = v^n_xx/2 + v^{n-1}_x from -cos x; diverges for rho < 1/2",
    builder=_build_counterexample,
    defaults={"discount": 1.0},
    grid=counterexample_grid(),
    oracle=counterexample_oracle,
)


def smooth_benchmark() -> ProblemSpec:
    return SMOOTH_BENCHMARK


def diffusion_benchmark() -> ProblemSpec:
    return DIFFUSION_BENCHMARK


DEFAULT_REGISTRY: Dict[str, ProblemSpec] = {
    spec.name: spec for spec in (SMOOTH_BENCHMARK, DIFFUSION_BENCHMARK, COUNTEREXAMPLE)
}


def get_problem(name: str, registry: Optional[Mapping[str, ProblemSpec]] = None) -> ProblemSpec:
    registry = DEFAULT_REGISTRY if registry is None else registry
    try:
        return registry[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(registry)}") from None
