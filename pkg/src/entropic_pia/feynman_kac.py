"""Monte Carlo estimates of linear-PDE solutions and their spatial derivatives.

Paths of dX = b(X) dt + sigma(X) dW (diagonal noise, d <= 3) are simulated by
Euler-Maruyama together with the tangent process (the derivative of X_t in its
starting point) and the weight

    N_t = (1/t) int_0^t (sigma(X_s)^{-1} grad X_s)^T dW_s,

so that d/dx E[phi(X_t)] = E[phi(X_t) N_t]. For a standard Brownian motion in
one dimension the second derivative uses R_t = (W_t^2 - t) / t^2.

Per-path samples are reduced with numpy's pairwise summation in a fixed order,
and chunked runs draw each chunk from its own spawned seed, so estimates do not
depend on how many workers produced the chunks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .model import Grid1D, ValueField

SeedLike = Union[int, np.random.SeedSequence]

# Euler bias allowance in the grid/MC agreement budget: C * (dt_sim + h^2)
DEFAULT_BIAS_CONSTANT = 2.0


def _fd_jacobian(f: Callable, x: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian of a vector field, shape (P, d, d)."""
    p, d = x.shape
    jac = np.empty((p, d, d))
    for k in range(d):
        step = 1e-6 * (1.0 + np.abs(x[:, k]))
        e = np.zeros_like(x)
        e[:, k] = step
        jac[:, :, k] = (f(x + e) - f(x - e)) / (2 * step[:, None])
    return jac


@dataclass(frozen=True)
class SdeSpec:
    """Coefficients of dX = b(X) dt + diag(sigma(X)) dW.

    ``drift`` and ``diffusion`` map states of shape ``(P, d)`` to ``(P, d)``.
    The Jacobians, if given, map ``(P, d)`` to ``(P, d, d)`` with entry
    ``[p, i, k] = d f_i / d x_k``; otherwise central differences are used.
    """

    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    dim: int = 1
    drift_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    diffusion_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not 1 <= self.dim <= 3:
            raise ValueError("Monte Carlo supports dimensions 1 to 3")

    def b_jac(self, x):
        return self.drift_jacobian(x) if self.drift_jacobian else _fd_jacobian(self.drift, x)

    def sigma_jac(self, x):
        return self.diffusion_jacobian(x) if self.diffusion_jacobian else _fd_jacobian(self.diffusion, x)

    @classmethod
    def brownian(cls, dim: int = 1) -> "SdeSpec":
        zero = lambda x: np.zeros_like(x)
        zero_j = lambda x: np.zeros(x.shape + (x.shape[-1],))
        return cls(zero, lambda x: np.ones_like(x), dim, zero_j, zero_j)

    @classmethod
    def scalar(cls, drift, diffusion, drift_dx=None, diffusion_dx=None) -> "SdeSpec":
        """1D SDE from functions of a ``(P,)`` state array."""
        wrap = lambda f: (lambda x: np.broadcast_to(f(x[:, 0]), x.shape[:1])[:, None])
        wrap_j = lambda f: None if f is None else (
            lambda x: np.broadcast_to(f(x[:, 0]), x.shape[:1])[:, None, None])
        return cls(wrap(drift), wrap(diffusion), 1, wrap_j(drift_dx), wrap_j(diffusion_dx))

    @classmethod
    def from_grid(cls, grid: Grid1D, drift_values, sigma_values) -> "SdeSpec":
        """Piecewise-linear interpolation of nodal coefficients (constant outside the grid)."""
        xs = grid.nodes
        lo, h, last = xs[0], grid.spacing, xs.size - 1
        b = np.broadcast_to(np.asarray(drift_values, dtype=float), xs.shape).copy()
        s = np.broadcast_to(np.asarray(sigma_values, dtype=float), xs.shape).copy()
        db = np.append(np.diff(b) / h, 0.0)
        ds = np.append(np.diff(s) / h, 0.0)

        # uniform nodes: the cell index is arithmetic, no search needed
        def cell(x):
            u = np.clip((x - lo) / h, 0.0, last)
            i = np.minimum(u.astype(np.intp), last - 1)
            return i, u - i

        def value(table):
            def f(x):
                i, w = cell(x)
                return table[i] + w * (table[i + 1] - table[i])
            return f

        def slope(table):
            def f(x):
                inside = (x >= lo) & (x <= xs[-1])
                return np.where(inside, table[cell(x)[0]], 0.0)
            return f

        return cls.scalar(value(b), value(s), slope(db), slope(ds))


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Simulated trajectories on the time levels ``times`` (shape ``(K+1,)``).

    ``states`` and ``brownian`` have shape ``(K+1, P, d)``, ``tangent`` has
    ``(K+1, P, d, d)`` and ``weight_sum`` holds the running stochastic
    integral whose ratio with t is the weight N. Paths that went non-finite are
    frozen at their last finite level and excluded through ``alive``.
    """

    times: np.ndarray
    states: np.ndarray
    tangent: np.ndarray
    weight_sum: np.ndarray
    brownian: np.ndarray
    alive: np.ndarray
    dt_sim: float
    seed: Optional[SeedLike]
    drift_sup: float           # max |b| seen along the paths
    sigma_dev_sup: float       # max |sigma - 1| seen along the paths

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    @property
    def n_failed(self) -> int:
        return int(self.n_paths - self.alive.sum())

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def weight(self) -> np.ndarray:
        """N_t on every level; NaN at t = 0 where it is undefined."""
        t = self.times[:, None, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(t > 0, self.weight_sum / np.where(t > 0, t, 1.0), np.nan)

    @property
    def is_standard_brownian(self) -> bool:
        return self.dim == 1 and self.drift_sup == 0.0 and self.sigma_dev_sup == 0.0

    def level(self, t: float) -> int:
        k = int(round(t / self.dt_sim))
        if k < 0 or k >= self.times.size or not math.isclose(self.times[k], t, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"t = {t} is not a simulation level (dt_sim = {self.dt_sim}, t_max = {self.times[-1]})")
        return k


def simulate_paths(spec: SdeSpec, x0, t_max: float, n_paths: int, dt_sim: float,
                   seed: Optional[SeedLike] = None) -> PathBundle:
    """Euler-Maruyama for X, its tangent and the weight integral; deterministic given ``seed``."""
    if not dt_sim > 0 or not t_max > 0:
        raise ValueError("dt_sim and t_max must be positive")
    if n_paths < 2:
        raise ValueError("need at least two paths for an error estimate")
    n_steps = int(round(t_max / dt_sim))
    if n_steps < 1 or not math.isclose(n_steps * dt_sim, t_max, rel_tol=1e-9):
        raise ValueError("t_max must be a whole number of dt_sim steps")
    d = spec.dim
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (d,))
    rng = np.random.default_rng(seed)
    sq = math.sqrt(dt_sim)

    states = np.empty((n_steps + 1, n_paths, d))
    tangent = np.empty((n_steps + 1, n_paths, d, d))
    wsum = np.empty((n_steps + 1, n_paths, d))
    wpath = np.empty((n_steps + 1, n_paths, d))
    states[0] = x0
    tangent[0] = np.eye(d)
    wsum[0] = 0.0
    wpath[0] = 0.0
    alive = np.ones(n_paths, dtype=bool)
    drift_sup = 0.0
    sigma_dev = 0.0

    for k in range(n_steps):
        x, jac = states[k], tangent[k]
        dw = rng.standard_normal((n_paths, d)) * sq
        b = spec.drift(x)
        s = spec.diffusion(x)
        drift_sup = max(drift_sup, float(np.max(np.abs(b[alive]), initial=0.0)))
        sigma_dev = max(sigma_dev, float(np.max(np.abs(s[alive] - 1.0), initial=0.0)))
        states[k + 1] = x + b * dt_sim + s * dw
        if d == 1:
            growth = 1.0 + spec.b_jac(x)[:, 0, 0] * dt_sim + spec.sigma_jac(x)[:, 0, 0] * dw[:, 0]
            tangent[k + 1] = jac * growth[:, None, None]
            wsum[k + 1] = wsum[k] + jac[:, 0] / s * dw
        else:
            tangent[k + 1] = (jac + np.einsum("pik,pkj->pij", spec.b_jac(x), jac) * dt_sim
                              + np.einsum("pik,pkj->pij", spec.sigma_jac(x), jac) * dw[:, :, None])
            wsum[k + 1] = wsum[k] + np.einsum("pij,pi->pj", jac / s[:, :, None], dw)
        wpath[k + 1] = wpath[k] + dw

        ok = (np.all(np.isfinite(states[k + 1]), axis=1)
              & np.all(np.isfinite(tangent[k + 1]), axis=(1, 2))
              & np.all(np.isfinite(wsum[k + 1]), axis=1))
        dead = alive & ~ok
        if dead.any():
            alive &= ok
        if not alive.all():
            # frozen paths keep finite placeholder values so later steps stay finite
            stop = ~alive
            states[k + 1, stop] = states[k, stop]
            tangent[k + 1, stop] = tangent[k, stop]
            wsum[k + 1, stop] = wsum[k, stop]
            wpath[k + 1, stop] = wpath[k, stop]

    times = dt_sim * np.arange(n_steps + 1)
    return PathBundle(times, states, tangent, wsum, wpath, alive, dt_sim, seed, drift_sup, sigma_dev)


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_paths: int
    tail: float = 0.0          # deterministic truncation allowance for infinite horizons
    n_failed: int = 0

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be nonnegative")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "n_paths": self.n_paths,
                "tail": self.tail, "n_failed": self.n_failed}


def _estimate(samples: np.ndarray, tail: float = 0.0, n_failed: int = 0) -> McEstimate:
    n = samples.size
    if n < 2:
        raise ValueError("fewer than two surviving paths")
    mean = float(np.sum(samples) / n)
    se = float(np.std(samples, ddof=1) / math.sqrt(n))
    return McEstimate(mean, se, n, tail, n_failed)


def _x_arg(x: np.ndarray):
    return x[..., 0] if x.shape[-1] == 1 else x


def _check_integrand(bundle, source, discount, horizon, terminal):
    if source is None and terminal is None:
        raise ValueError("need a source, a terminal reward or both")
    if (discount is None) == (horizon is None):
        raise ValueError("exactly one of discount and horizon must be given")
    if horizon is not None:
        if terminal is None:
            raise ValueError("finite-horizon estimates need a terminal reward")
        return bundle.level(horizon)
    if terminal is not None:
        raise ValueError("a terminal reward needs a horizon")
    if not discount > 0:
        raise ValueError("discount must be positive")
    return bundle.times.size - 1


def _source_table(bundle, source, k_end):
    """f(t_k, X_k) for k < k_end, shape (k_end, P)."""
    x = _x_arg(bundle.states[:k_end])
    tt = bundle.times[:k_end].reshape((-1,) + (1,) * (x.ndim - 1))
    return np.broadcast_to(np.asarray(source(tt, x), dtype=float), (k_end, bundle.n_paths))


def _tail(bundle, f_vals, discount, source_bound, singular: bool):
    if discount is None:
        return 0.0
    bound = source_bound if source_bound is not None else float(np.max(np.abs(f_vals), initial=0.0))
    t_max = bundle.times[-1]
    tail = math.exp(-discount * t_max) * bound / discount
    # weighted integrands carry E|N_t| ~ t^{-1/2}
    return tail * max(1.0, 1.0 / math.sqrt(t_max)) if singular else tail


def mc_value(bundle: PathBundle, source: Optional[Callable] = None, discount: Optional[float] = None,
             horizon: Optional[float] = None, terminal: Optional[Callable] = None,
             source_bound: Optional[float] = None) -> McEstimate:
    """E[int e^{-rho t} f(t, X_t) dt] or E[int_0^T f dt + g(X_T)].

    Left Riemann sum on the simulation levels. On an infinite horizon the
    integral stops at the last level and ``tail`` reports
    exp(-rho t_max) ||f|| / rho, with ||f|| taken from ``source_bound`` or else
    from the sampled values.
    """
    k_end = _check_integrand(bundle, source, discount, horizon, terminal)
    dt = bundle.dt_sim
    alive = bundle.alive
    total = np.zeros(bundle.n_paths)
    f_vals = np.zeros(0)
    if source is not None:
        f_vals = _source_table(bundle, source, k_end)
        disc = np.ones(k_end) if discount is None else np.exp(-discount * bundle.times[:k_end])
        total = total + dt * np.sum(disc[:, None] * f_vals, axis=0)
    if terminal is not None:
        total = total + terminal(_x_arg(bundle.states[k_end]))
    return _estimate(total[alive], _tail(bundle, f_vals, discount, source_bound, False), bundle.n_failed)


def mc_gradient(bundle: PathBundle, source: Optional[Callable] = None, discount: Optional[float] = None,
                horizon: Optional[float] = None, terminal: Optional[Callable] = None,
                source_bound: Optional[float] = None, component: int = 0) -> McEstimate:
    """Spatial derivative in coordinate ``component`` by the weight N.

    The time integral starts at the first level t = dt_sim, where N is
    defined; the skipped slice and the t^{-1/2} singularity cost O(dt_sim).
    """
    k_end = _check_integrand(bundle, source, discount, horizon, terminal)
    if not 0 <= component < bundle.dim:
        raise ValueError("component out of range")
    dt = bundle.dt_sim
    n = bundle.weight[..., component]
    total = np.zeros(bundle.n_paths)
    f_vals = np.zeros(0)
    if source is not None:
        f_vals = _source_table(bundle, source, k_end)
        disc = np.ones(k_end) if discount is None else np.exp(-discount * bundle.times[:k_end])
        total = total + dt * np.sum(disc[1:, None] * f_vals[1:] * n[1:k_end], axis=0)
    if terminal is not None:
        total = total + terminal(_x_arg(bundle.states[k_end])) * n[k_end]
    return _estimate(total[bundle.alive], _tail(bundle, f_vals, discount, source_bound, True), bundle.n_failed)


def mc_second_derivative_unit_sigma(bundle: PathBundle, source: Optional[Callable] = None,
                                    discount: Optional[float] = None, horizon: Optional[float] = None,
                                    terminal: Optional[Callable] = None, source_dx: Optional[Callable] = None,
                                    delta: float = 0.1, source_bound: Optional[float] = None) -> McEstimate:
    """Second spatial derivative for X = x + W in one dimension.

    A terminal term g(X_T) is weighted by R_T = (W_T^2 - T) / T^2. A time
    integrated source uses R_t only for t >= delta; below delta, where R_t is
    not integrable, it uses f_x(X_t) N_t. ``source_dx`` defaults to a central
    difference of ``source``.
    """
    if not bundle.is_standard_brownian:
        raise ValueError("the closed-form second-order weight needs b = 0 and sigma = 1 in one dimension; "
                         "use the grid second difference of the value instead")
    k_end = _check_integrand(bundle, source, discount, horizon, terminal)
    if not delta >= 0:
        raise ValueError("delta must be nonnegative")
    dt = bundle.dt_sim
    t = bundle.times
    w = bundle.brownian[..., 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        r_w = np.where(t[:, None] > 0, (w**2 - t[:, None]) / np.where(t > 0, t, 1.0)[:, None] ** 2, np.nan)
    total = np.zeros(bundle.n_paths)
    f_vals = np.zeros(0)
    if source is not None:
        if source_dx is None:
            eps = 1e-5
            source_dx = lambda tt, x: (source(tt, x + eps) - source(tt, x - eps)) / (2 * eps)
        f_vals = _source_table(bundle, source, k_end)
        fx_vals = _source_table(bundle, source_dx, k_end)
        disc = np.ones(k_end) if discount is None else np.exp(-discount * t[:k_end])
        n = bundle.weight[..., 0]
        small = t[:k_end] < delta
        term = np.where(small[:, None], fx_vals * n[:k_end], f_vals * r_w[:k_end])
        total = total + dt * np.sum(disc[1:, None] * term[1:], axis=0)
    if terminal is not None:
        total = total + terminal(_x_arg(bundle.states[k_end])) * r_w[k_end]
    return _estimate(total[bundle.alive], _tail(bundle, f_vals, discount, source_bound, True), bundle.n_failed)


# chunked comparison against a grid solution


@dataclass(frozen=True)
class ProbeComparison:
    x0: float
    quantity: str              # "value" or "gradient"
    grid: float
    mc: McEstimate
    bias_allowance: float
    passed: bool

    @property
    def error(self) -> float:
        return abs(self.mc.mean - self.grid)

    @property
    def budget(self) -> float:
        return 3 * self.mc.std_error + self.mc.tail + self.bias_allowance

    def to_dict(self) -> dict:
        return {"x0": self.x0, "quantity": self.quantity, "grid": self.grid, "mc": self.mc.to_dict(),
                "error": self.error, "budget": self.budget, "passed": self.passed}


def _merge(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(parts)) if parts else np.zeros(0)


def _chunk_samples(spec, x0, t_max, dt_sim, seeds, chunk, source, discount, workers):
    """Per-path value and gradient samples, chunk by chunk, in seed order."""

    def one(ss):
        b = simulate_paths(spec, x0, t_max, chunk, dt_sim, ss)
        k_end = b.times.size - 1
        f_vals = _source_table(b, source, k_end)
        disc = np.exp(-discount * b.times[:k_end])
        val = b.dt_sim * np.sum(disc[:, None] * f_vals, axis=0)
        n = b.weight[..., 0]
        grad = b.dt_sim * np.sum(disc[1:, None] * f_vals[1:] * n[1:k_end], axis=0)
        return val[b.alive], grad[b.alive], b.n_failed, float(np.max(np.abs(f_vals)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(ss) for ss in seeds]
    vals = _merge([r[0] for r in results])
    grads = _merge([r[1] for r in results])
    return vals, grads, sum(r[2] for r in results), max(r[3] for r in results)


def compare_with_grid(field: ValueField, drift_values, sigma_values, source_values, discount: float,
                      probes: Sequence[float], n_paths: int = 20000, dt_sim: float = 1e-3,
                      t_max: Optional[float] = None, seed: int = 0, chunk: int = 2000,
                      bias_constant: float = DEFAULT_BIAS_CONSTANT, workers: int = 1) -> List[ProbeComparison]:
    """Check a grid solution of rho w = 1/2 sigma^2 w_xx + c1 w_x + f against Monte Carlo.

    ``field`` is the grid solution; the nodal ``drift_values`` (c1),
    ``sigma_values`` and ``source_values`` (f) are interpolated linearly for the
    SDE. Probes snap to the nearest grid node so no interpolation enters the
    grid side. The budget per probe is 3 SE + tail + C (dt_sim + h^2).
    ``t_max`` defaults to the time at which exp(-rho t) drops below 1e-10.
    """
    grid = field.grid
    if field.values.ndim != 1:
        raise ValueError("expected a stationary field")
    if n_paths % chunk:
        raise ValueError("n_paths must be a multiple of chunk")
    if t_max is None:
        t_max = dt_sim * math.ceil(math.log(1e10) / discount / dt_sim)
    spec = SdeSpec.from_grid(grid, drift_values, sigma_values)
    xs = grid.nodes
    f_tab = np.broadcast_to(np.asarray(source_values, dtype=float), xs.shape).copy()
    source = lambda t, x: np.interp(x, xs, f_tab)
    allowance = bias_constant * (dt_sim + grid.spacing**2)

    root = np.random.SeedSequence(seed)
    out: List[ProbeComparison] = []
    for j, seq in zip(probes, root.spawn(len(probes))):
        i = int(np.argmin(np.abs(xs - j)))
        seeds = seq.spawn(n_paths // chunk)
        vals, grads, failed, fmax = _chunk_samples(spec, xs[i], t_max, dt_sim, seeds, chunk, source,
                                                   discount, workers)
        tail = math.exp(-discount * t_max) * fmax / discount
        v_est = _estimate(vals, tail, failed)
        g_est = _estimate(grads, tail * max(1.0, 1.0 / math.sqrt(t_max)), failed)
        for name, grid_val, est in (("value", field.values[i], v_est), ("gradient", field.dx[i], g_est)):
            ok = abs(est.mean - grid_val) <= 3 * est.std_error + est.tail + allowance
            out.append(ProbeComparison(float(xs[i]), name, float(grid_val), est, allowance, bool(ok)))
    return out
