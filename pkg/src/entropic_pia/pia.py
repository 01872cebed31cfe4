"""Policy iteration for the entropic HJB equations and convergence diagnostics.

Three regimes share one engine:

* finite horizon, drift control:   u_t + 1/2 sigma^2 u_xx + H(x, u_x) = 0
* infinite horizon, drift control: rho v = 1/2 sigma^2 v_xx + H(x, v_x)
* infinite horizon, 1D diffusion control: rho v = H(x, v_x, v_xx)

Each step freezes the Gibbs policy of the previous iterate and solves the
resulting linear PDE (coefficients H_q or sigma^2/2, H_z and the affine
remainder h). The derivative stencils used for the policy are the same ones
the PDE solve uses, so the discrete iterates inherit the monotone improvement
of the continuous algorithm.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .hamiltonian import ActionQuadrature, GridHamiltonian
from .model import ControlProblem, Grid1D, Mode, TimeGrid, ValueField, norms
from .pde import LinearPdeCoefficients, PdeSolveError, solve_elliptic, solve_parabolic

_EPS = np.finfo(float).eps


class Regime(enum.Enum):
    FINITE = "finite_horizon"
    INFINITE = "infinite_horizon"
    DIFFUSION = "diffusion_1d"


class IterationError(RuntimeError):
    """A PDE solve failed inside the iteration; carries the iteration index."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, deltas: Sequence[float]):
        super().__init__(message)
        self.deltas = list(deltas)


@dataclass(frozen=True)
class PiaConfig:
    max_iter: int = 50
    stop_tol: float = 1e-10
    reference_tol: float = 1e-12
    record_policies: bool = True
    rho_big: float = 20.0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.reference_tol <= self.stop_tol:
            raise ValueError("need 0 < reference_tol <= stop_tol")


class RateClass(enum.Enum):
    SUPER_EXPONENTIAL = "SuperExponential"
    EXPONENTIAL = "Exponential"
    STALLED = "Stalled"
    DIVERGENT = "Divergent"


@dataclass(frozen=True)
class RateFit:
    classification: RateClass
    eta: Optional[float]
    floor: float
    double_log_slope: Optional[float] = None
    n_used: int = 0
    ratios: tuple = ()

    def to_dict(self) -> dict:
        return {
            "classification": self.classification.value,
            "eta": self.eta,
            "floor": self.floor,
            "double_log_slope": self.double_log_slope,
            "n_used": self.n_used,
            "ratios": list(self.ratios),
        }


def fit_rate(eps, steps=None, floor: float = 0.0) -> RateFit:
    """Classify an error sequence.

    Entries at or below ``floor`` end the usable range, as does the first
    entry that fails to decrease (after skipping any initial rise up to the
    sequence maximum). On that range: SuperExponential when the successive
    ratios strictly decrease and log(-log eps) grows with slope at least
    ln(2)/2 per step; Exponential when log eps is linear in the step
    (R^2 >= 0.98) with negative slope; Divergent when a 3-step window grows by
    10% or more and the growth is not undone by the end; Stalled otherwise.
    """
    eps = np.asarray(eps, dtype=float)
    if eps.ndim != 1 or eps.size < 4:
        raise ValueError("need a sequence of at least 4 entries")
    if not np.all(np.isfinite(eps)) or np.any(eps <= 0):
        raise ValueError("error sequence must be positive and finite")
    steps = np.arange(eps.size, dtype=float) if steps is None else np.asarray(steps, dtype=float)
    if steps.shape != eps.shape or np.any(np.diff(steps) <= 0):
        raise ValueError("steps must be increasing and match eps")

    above = np.nonzero(eps <= floor)[0]
    stop = int(above[0]) if above.size else eps.size
    e, s = eps[:stop], steps[:stop]

    if e.size >= 2:
        for i in range(e.size - 1):
            j = min(i + 3, e.size - 1)
            if e[i + 1:j + 1].max() >= 1.1 * e[i] and e[-1] >= 1.1 * e[:-1].min():
                return RateFit(RateClass.DIVERGENT, None, floor, n_used=int(e.size))

    start = int(np.argmax(e)) if e.size else 0
    end = start + 1
    while end < e.size and e[end] < e[end - 1]:
        end += 1
    e, s = e[start:end], s[start:end]
    if e.size < 2:
        return RateFit(RateClass.STALLED, None, floor, n_used=int(e.size))

    # per-step contraction factors, so unevenly spaced steps compare fairly
    ratios = np.exp(np.diff(np.log(e)) / np.diff(s))
    slope_ll = None
    if e.size >= 3:
        scale = 1.0 if e.max() < 1.0 else 2.0 * e.max()
        slope_ll = float(np.polyfit(s, np.log(-np.log(e / scale)), 1)[0])
        decreasing = bool(np.all(ratios[1:] < ratios[:-1] * (1 - 1e-6)))
        if decreasing and slope_ll >= 0.5 * math.log(2):
            a = np.polyfit(np.exp2(s - s[0]), np.log(e), 1)[0]
            eta = float(np.clip(math.exp(a), 1e-300, 1 - 1e-16))
            return RateFit(RateClass.SUPER_EXPONENTIAL, eta, floor, slope_ll, int(e.size), tuple(ratios))

    coef = np.polyfit(s, np.log(e), 1)
    pred = np.polyval(coef, s)
    ss_res = float(np.sum((np.log(e) - pred) ** 2))
    ss_tot = float(np.sum((np.log(e) - np.log(e).mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    if coef[0] < 0 and r2 >= 0.98:
        return RateFit(RateClass.EXPONENTIAL, float(math.exp(coef[0])), floor, slope_ll, int(e.size), tuple(ratios))
    return RateFit(RateClass.STALLED, None, floor, slope_ll, int(e.size), tuple(ratios))


@dataclass
class IterationReport:
    """Per-iterate diagnostics; row ``k`` describes iterate ``k`` (row 0 is the initializer).

    ``delta*``, ``policy_delta`` and ``monotonicity_violation`` compare with
    the previous iterate and are NaN on row 0. ``eps*`` compare with the
    reference and stay NaN until :meth:`attach_reference`.
    """

    regime: str
    n: List[int] = field(default_factory=list)
    eps0: List[float] = field(default_factory=list)
    eps1: List[float] = field(default_factory=list)
    eps2: List[float] = field(default_factory=list)
    delta0: List[float] = field(default_factory=list)
    delta1: List[float] = field(default_factory=list)
    delta2: List[float] = field(default_factory=list)
    policy_delta: List[float] = field(default_factory=list)
    monotonicity_violation: List[float] = field(default_factory=list)
    bound_violation: List[float] = field(default_factory=list)
    residual: List[float] = field(default_factory=list)
    vxx_identity: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    termination: str = ""
    floors: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)

    COLUMNS = ("n", "eps0", "eps1", "eps2", "delta0", "delta1", "delta2", "policy_delta",
               "monotonicity_violation", "residual", "seconds")

    def __len__(self):
        return len(self.n)

    def append(self, **row):
        for name in ("n", "eps0", "eps1", "eps2", "delta0", "delta1", "delta2", "policy_delta",
                     "monotonicity_violation", "bound_violation", "residual", "vxx_identity", "seconds"):
            getattr(self, name).append(row.get(name, math.nan))

    def truncated(self, length: int) -> "IterationReport":
        out = IterationReport(self.regime, termination=self.termination, floors=dict(self.floors))
        for name in ("n", "eps0", "eps1", "eps2", "delta0", "delta1", "delta2", "policy_delta",
                     "monotonicity_violation", "bound_violation", "residual", "vxx_identity", "seconds"):
            setattr(out, name, list(getattr(self, name)[:length]))
        return out

    def attach_reference(self, iterates: Sequence[ValueField], reference: ValueField):
        for k, it in enumerate(iterates[:len(self)]):
            d = norms(it, reference)
            self.eps0[k], self.eps1[k], self.eps2[k] = d.c0, d.c1, d.c2
        self.refit()

    def refit(self):
        self.rates = {}
        e1 = np.asarray(self.eps1)
        e2 = np.asarray(self.eps2)
        for key, seq, floor in (("eps1", e1, self.floors.get("eps1", 0.0)),
                                ("eps2", e2, self.floors.get("eps2", 0.0)),
                                ("eps12", e1 + e2, self.floors.get("eps2", 0.0))):
            seq = seq[np.isfinite(seq)]
            seq = seq[: int(np.argmax(seq <= 0)) if np.any(seq <= 0) else seq.size]
            if seq.size >= 4:
                self.rates[key] = fit_rate(seq, floor=floor)

    @property
    def min_monotonicity(self) -> float:
        vals = [v for v in self.monotonicity_violation if not math.isnan(v)]
        return min(vals) if vals else math.nan

    @property
    def max_bound_violation(self) -> float:
        return max(self.bound_violation)

    def to_dict(self) -> dict:
        def clean(xs):
            return [None if isinstance(x, float) and math.isnan(x) else x for x in xs]

        out = {name: clean(getattr(self, name)) for name in (
            "n", "eps0", "eps1", "eps2", "delta0", "delta1", "delta2", "policy_delta",
            "monotonicity_violation", "bound_violation", "residual", "vxx_identity")}
        out["regime"] = self.regime
        out["termination"] = self.termination
        out["floors"] = dict(self.floors)
        out["rates"] = {k: v.to_dict() for k, v in self.rates.items()}
        return out


class PiaRun(NamedTuple):
    values: List[ValueField]
    policies: List[np.ndarray]   # normalized Gibbs log-density on (time x) grid x action nodes
    report: IterationReport


def _sigma2_drift_mode(problem: ControlProblem, grid: Grid1D, quad: ActionQuadrature) -> np.ndarray:
    x = grid.nodes[:, None]
    sig = np.broadcast_to(problem.diffusion(x, quad.nodes[None, :1]), (grid.n_nodes, 1))[:, 0]
    return sig**2


def initial_value(problem: ControlProblem, grid: Grid1D, tgrid: Optional[TimeGrid] = None) -> ValueField:
    """Step-0 iterate, a global lower bound for every policy's value."""
    c0, lam, la = problem.coefficient_bound, problem.temperature, problem.log_action_length_plus
    if problem.is_finite_horizon:
        ttm = problem.horizon - tgrid.times
        vals = (-c0 - (c0 - lam * la) * ttm)[:, None] * np.ones(grid.n_nodes)
    else:
        vals = np.full(grid.n_nodes, -(c0 - lam * la) / problem.discount)
    return ValueField.from_values(grid, vals)


def upper_bound(problem: ControlProblem, tgrid: Optional[TimeGrid] = None):
    c0, lam, la = problem.coefficient_bound, problem.temperature, problem.log_action_length_plus
    if problem.is_finite_horizon:
        return (c0 + (c0 + lam * la) * (problem.horizon - tgrid.times))[:, None]
    return (c0 + lam * la) / problem.discount


def _regime_of(problem: ControlProblem) -> Regime:
    if problem.mode is Mode.DIFFUSION_CONTROL_1D:
        if problem.is_finite_horizon:
            raise ValueError("diffusion control is only supported on the infinite horizon")
        return Regime.DIFFUSION
    return Regime.FINITE if problem.is_finite_horizon else Regime.INFINITE


class _Engine:
    """One policy-evaluation/improvement loop; shared by the three regimes."""

    def __init__(self, problem, grid, quad, tgrid=None):
        self.problem = problem
        self.grid = grid
        self.quad = quad
        self.tgrid = tgrid
        self.regime = _regime_of(problem)
        if self.regime is Regime.FINITE and tgrid is None:
            raise ValueError("finite-horizon runs need a time grid")
        if self.regime is Regime.FINITE and not math.isclose(tgrid.horizon, problem.horizon):
            raise ValueError("time grid horizon differs from the problem horizon")
        self.gh = GridHamiltonian(problem, grid, quad)
        self.sigma2 = None if self.regime is Regime.DIFFUSION else _sigma2_drift_mode(problem, grid, quad)
        self.c2_floor = 0.5 * problem.sigma_min**2

    def gibbs(self, field: ValueField):
        if self.regime is Regime.DIFFUSION:
            return self.gh(field.dx, field.dxx)
        return self.gh(field.dx)

    def hjb_residual(self, field: ValueField, g) -> float:
        p = self.problem
        if self.regime is Regime.DIFFUSION:
            r = p.discount * field.values - g.h_val
        elif self.regime is Regime.INFINITE:
            r = p.discount * field.values - 0.5 * self.sigma2 * field.dxx - g.h_val
        else:
            u = field.values
            r = (u[1:] - u[:-1]) / self.tgrid.dt + 0.5 * self.sigma2 * field.dxx[:-1] + g.h_val[:-1]
        return float(np.max(np.abs(r)))

    def step(self, g, n: int) -> ValueField:
        p, grid = self.problem, self.grid
        try:
            if self.regime is Regime.FINITE:
                coeffs = [LinearPdeCoefficients(0.5 * self.sigma2, g.h_z[k], g.residual_h[k], 0.0, self.c2_floor)
                          for k in range(self.tgrid.n_steps)]
                terminal = ValueField.from_values(grid, p.terminal_reward(grid.nodes))
                return solve_parabolic(coeffs, terminal, self.tgrid)
            if self.regime is Regime.DIFFUSION:
                c2 = g.h_q
                if np.any(c2 < self.c2_floor - 1e-10):
                    raise IterationError(n, f"H_q = {c2.min():.3e} below sigma_min^2/2 = {self.c2_floor:.3e}")
            else:
                c2 = 0.5 * self.sigma2
            coeffs = LinearPdeCoefficients(c2, g.h_z, g.residual_h, p.discount, self.c2_floor)
            return solve_elliptic(coeffs, grid)
        except (PdeSolveError, ValueError) as exc:
            raise IterationError(n, str(exc)) from exc

    def floors(self, scale: float) -> dict:
        h = self.grid.spacing
        base = 1e2 * _EPS * max(1.0, scale)
        return {"eps0": base, "eps1": base / h, "eps2": base / h**2}


def frozen_coefficients(problem: ControlProblem, grid: Grid1D, quad: ActionQuadrature,
                        field: ValueField) -> LinearPdeCoefficients:
    """Linear-PDE coefficients of the step that follows ``field`` (infinite horizon).

    The next iterate solves rho w = c2 w_xx + c1 w_x + f with these arrays.
    """
    eng = _Engine(problem, grid, quad)
    if eng.regime is Regime.FINITE:
        raise ValueError("frozen_coefficients covers the stationary regimes")
    g = eng.gibbs(field)
    c2 = g.h_q if eng.regime is Regime.DIFFUSION else 0.5 * eng.sigma2
    return LinearPdeCoefficients(c2, g.h_z, g.residual_h, problem.discount, eng.c2_floor)


def _stagnated(deltas: List[float], floor: float) -> bool:
    if len(deltas) < 4 or deltas[-1] > floor:
        return False
    return min(deltas[-3:]) >= min(deltas[:-3])


def _iterate(problem, grid, quad, tgrid, stop_tol: float, max_iter: int, record_policies: bool,
             stall_floor: bool = False):
    eng = _Engine(problem, grid, quad, tgrid)
    bound = upper_bound(problem, tgrid)
    report = IterationReport(eng.regime.value)
    prev = initial_value(problem, grid, tgrid)
    values, policies = [prev], []
    g = eng.gibbs(prev)
    report.append(n=0, bound_violation=float(np.max(prev.values - bound)),
                  residual=eng.hjb_residual(prev, g), seconds=0.0)
    prev_density = None
    totals: List[float] = []
    report.termination = "max_iter"
    for n in range(1, max_iter + 1):
        t0 = time.perf_counter()
        new = eng.step(g, n)
        g_new = eng.gibbs(new)
        d = norms(new, prev)
        row = dict(n=n, delta0=d.c0, delta1=d.c1, delta2=d.c2,
                   monotonicity_violation=float(np.min(new.values - prev.values)),
                   bound_violation=float(np.max(new.values - bound)),
                   residual=eng.hjb_residual(new, g_new))
        if prev_density is not None:
            row["policy_delta"] = float(np.max(np.abs(g.density - prev_density)))
        if eng.regime is Regime.DIFFUSION:
            implied = (problem.discount * new.values - g.h_z * new.dx - g.residual_h) / g.h_q
            row["vxx_identity"] = float(np.max(np.abs(new.dxx - implied)))
        row["seconds"] = time.perf_counter() - t0
        report.append(**row)
        if record_policies:
            policies.append(g.logits - g.log_partition[..., None])
        prev_density = g.density
        values.append(new)
        totals.append(d.total)
        prev, g = new, g_new
        if d.total <= stop_tol:
            report.termination = "tolerance"
            break
        if stall_floor:
            scale = float(np.max(np.abs(new.values)))
            if _stagnated(totals, sum(eng.floors(scale).values())):
                report.termination = "rounding_floor"
                break
    report.floors = eng.floors(float(np.max(np.abs(prev.values))))
    return values, policies, report, eng


@dataclass(frozen=True)
class ReferenceSolution:
    field: ValueField
    iterations: int
    hjb_residual: float
    termination: str
    deltas: tuple


def reference_solution(problem: ControlProblem, grid: Grid1D, tgrid: Optional[TimeGrid],
                       quad: ActionQuadrature, config: PiaConfig = PiaConfig()) -> ReferenceSolution:
    """Discrete ground truth: the iteration continued to ``reference_tol``.

    Stops early only if the update has stagnated at the floating-point floor
    of the discrete second-derivative norm. Raises :class:`ConvergenceError`
    when neither happens within ``10 * max_iter`` iterations.
    """
    values, _, report, eng = _iterate(problem, grid, quad, tgrid, config.reference_tol,
                                      10 * config.max_iter, False, stall_floor=True)
    deltas = tuple(report.delta0[k] + report.delta1[k] + report.delta2[k] for k in range(1, len(report)))
    if report.termination == "max_iter":
        raise ConvergenceError(f"no convergence to {config.reference_tol:g} in {10 * config.max_iter} iterations",
                               deltas)
    return ReferenceSolution(values[-1], len(values) - 1, report.residual[-1], report.termination, deltas)


def _run(problem, grid, quad, tgrid, config: PiaConfig, reference: Optional[ValueField]) -> PiaRun:
    values, policies, report, _ = _iterate(problem, grid, quad, tgrid, config.stop_tol, config.max_iter,
                                           config.record_policies)
    if reference is None:
        reference = reference_solution(problem, grid, tgrid, quad, config).field
    report.attach_reference(values, reference)
    return PiaRun(values, policies, report)


def pia_finite_horizon(problem: ControlProblem, grid: Grid1D, tgrid: TimeGrid, quad: ActionQuadrature,
                       config: PiaConfig = PiaConfig(), reference: Optional[ValueField] = None) -> PiaRun:
    if problem.mode is not Mode.DRIFT_CONTROL or not problem.is_finite_horizon:
        raise ValueError("pia_finite_horizon needs a finite-horizon drift-control problem")
    return _run(problem, grid, quad, tgrid, config, reference)


def pia_infinite_horizon(problem: ControlProblem, grid: Grid1D, quad: ActionQuadrature,
                         config: PiaConfig = PiaConfig(), reference: Optional[ValueField] = None) -> PiaRun:
    if problem.mode is not Mode.DRIFT_CONTROL or problem.is_finite_horizon:
        raise ValueError("pia_infinite_horizon needs an infinite-horizon drift-control problem")
    return _run(problem, grid, quad, None, config, reference)


def pia_diffusion_1d(problem: ControlProblem, grid: Grid1D, quad: ActionQuadrature,
                     config: PiaConfig = PiaConfig(), reference: Optional[ValueField] = None) -> PiaRun:
    if problem.mode is not Mode.DIFFUSION_CONTROL_1D:
        raise ValueError("pia_diffusion_1d needs a diffusion-control problem")
    return _run(problem, grid, quad, None, config, reference)


def run_pia(problem: ControlProblem, grid: Grid1D, quad: ActionQuadrature, tgrid: Optional[TimeGrid] = None,
            config: PiaConfig = PiaConfig(), reference: Optional[ValueField] = None) -> PiaRun:
    """Dispatch on the problem's regime."""
    regime = _regime_of(problem)
    if regime is Regime.FINITE:
        return pia_finite_horizon(problem, grid, tgrid, quad, config, reference)
    if regime is Regime.DIFFUSION:
        return pia_diffusion_1d(problem, grid, quad, config, reference)
    return pia_infinite_horizon(problem, grid, quad, config, reference)
