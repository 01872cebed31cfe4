"""Control problems, spatial/time grids, grid fields and discrete norms.

Coefficient callables must broadcast over numpy arrays: ``drift(x, a)`` is
called with ``x`` of shape ``(n, 1)`` and ``a`` of shape ``(1, m)`` and must
return an ``(n, m)`` array (or something broadcastable to it).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

Coefficient = Callable[[np.ndarray, np.ndarray], np.ndarray]


class Mode(enum.Enum):
    DRIFT_CONTROL = "drift_control"
    DIFFUSION_CONTROL_1D = "diffusion_control_1d"


class Boundary(enum.Enum):
    PERIODIC = "periodic"
    LINEAR_EXTRAPOLATION = "linear_extrapolation"
    REFLECTING = "reflecting"


# state/action sample used to audit the nondegeneracy and drift-mode invariants
_AUDIT_X = np.linspace(-10.0, 10.0, 41)


@dataclass(frozen=True)
class ControlProblem:
    """Entropy-regularized control problem with scalar state and interval actions.

    Exactly one of ``horizon`` (finite horizon, needs ``terminal_reward``) and
    ``discount`` (infinite horizon) is set. ``coefficient_bound`` and
    ``sigma_min`` are declared by the caller; coefficients are opaque callables
    so they cannot be inferred.
    """

    drift: Coefficient
    diffusion: Coefficient
    running_reward: Coefficient
    action_lo: float
    action_hi: float
    temperature: float
    coefficient_bound: float
    sigma_min: float
    terminal_reward: Optional[Callable[[np.ndarray], np.ndarray]] = None
    horizon: Optional[float] = None
    discount: Optional[float] = None
    mode: Mode = Mode.DRIFT_CONTROL
    name: str = "custom"

    def __post_init__(self):
        if not self.action_lo < self.action_hi:
            raise ValueError(f"empty action interval [{self.action_lo}, {self.action_hi}]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if (self.horizon is None) == (self.discount is None):
            raise ValueError("exactly one of horizon and discount must be set")
        if self.horizon is not None:
            if not self.horizon > 0:
                raise ValueError("horizon must be positive")
            if self.terminal_reward is None:
                raise ValueError("finite-horizon problems need a terminal_reward")
        if self.discount is not None and not self.discount > 0:
            raise ValueError("discount must be positive")
        if not self.coefficient_bound > 0:
            raise ValueError("coefficient_bound must be positive")
        if not self.sigma_min > 0:
            raise ValueError("sigma_min must be positive")

        a = np.linspace(self.action_lo, self.action_hi, 17)[None, :]
        sig = np.broadcast_to(self.diffusion(_AUDIT_X[:, None], a), (_AUDIT_X.size, a.size))
        if np.any(sig < self.sigma_min * (1 - 1e-12)):
            raise ValueError(f"diffusion drops below sigma_min={self.sigma_min} on the audit sample")
        if self.mode is Mode.DRIFT_CONTROL and np.ptp(sig, axis=1).max() > 1e-14 * (1 + np.abs(sig).max()):
            raise ValueError("drift-control mode requires a diffusion that ignores the action")

    @property
    def action_length(self) -> float:
        return self.action_hi - self.action_lo

    @property
    def log_action_length_plus(self) -> float:
        """(ln|A|)^+, the largest entropy a density on A can carry when clipped at 0."""
        return max(math.log(self.action_length), 0.0)

    @property
    def is_finite_horizon(self) -> bool:
        return self.horizon is not None

    def replace(self, **changes) -> "ControlProblem":
        return replace(self, **changes)


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [x_lo, x_hi].

    Periodic grids exclude the right endpoint (it is identified with x_lo), so
    the spacing is ``(x_hi - x_lo) / n_nodes``; the other boundaries include
    both endpoints with spacing ``(x_hi - x_lo) / (n_nodes - 1)``.
    """

    x_lo: float
    x_hi: float
    n_nodes: int
    boundary: Boundary = Boundary.LINEAR_EXTRAPOLATION

    def __post_init__(self):
        if not self.x_lo < self.x_hi:
            raise ValueError("x_lo must be below x_hi")
        if self.n_nodes < 3:
            raise ValueError("need at least 3 nodes")

    @property
    def spacing(self) -> float:
        if self.boundary is Boundary.PERIODIC:
            return (self.x_hi - self.x_lo) / self.n_nodes
        return (self.x_hi - self.x_lo) / (self.n_nodes - 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.x_lo + self.spacing * np.arange(self.n_nodes)

    def refined(self) -> "Grid1D":
        """Same domain with half the spacing; old nodes are the even-indexed new ones."""
        if self.boundary is Boundary.PERIODIC:
            return replace(self, n_nodes=2 * self.n_nodes)
        return replace(self, n_nodes=2 * self.n_nodes - 1)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0 or self.n_steps < 1:
            raise ValueError("need horizon > 0 and n_steps >= 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ValueField:
    """Values on a grid (shape ``(n,)`` or ``(n_times, n)``) with cached derivatives.

    Build through :meth:`from_values`; ``dx``/``dxx`` are always those produced
    by :func:`finite_difference_derivatives` from ``values``.
    """

    grid: Grid1D
    values: np.ndarray
    dx: np.ndarray = field(repr=False)
    dxx: np.ndarray = field(repr=False)

    @classmethod
    def from_values(cls, grid: Grid1D, values) -> "ValueField":
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != grid.n_nodes:
            raise ValueError(f"last axis has {values.shape[-1]} entries, grid has {grid.n_nodes} nodes")
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite values in field")
        dx, dxx = _differences(values, grid)
        return cls(grid, _readonly(values), _readonly(dx), _readonly(dxx))

    def at_time(self, k: int) -> "ValueField":
        """Slice one time level of a time-indexed field."""
        return ValueField(self.grid, self.values[k], self.dx[k], self.dxx[k])


def _differences(u: np.ndarray, grid: Grid1D):
    h = grid.spacing
    if grid.boundary is Boundary.PERIODIC:
        up, um = np.roll(u, -1, axis=-1), np.roll(u, 1, axis=-1)
        return (up - um) / (2 * h), (up - 2 * u + um) / h**2

    dx = np.empty_like(u)
    dxx = np.empty_like(u)
    dx[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * h)
    dxx[..., 1:-1] = (u[..., 2:] - 2 * u[..., 1:-1] + u[..., :-2]) / h**2
    if grid.boundary is Boundary.LINEAR_EXTRAPOLATION:
        # ghost u[-1] = 2u[0] - u[1]: zero second difference, central dx turns one-sided
        dx[..., 0] = (u[..., 1] - u[..., 0]) / h
        dx[..., -1] = (u[..., -1] - u[..., -2]) / h
        dxx[..., 0] = 0.0
        dxx[..., -1] = 0.0
    else:
        # mirror ghost u[-1] = u[1]
        dx[..., 0] = 0.0
        dx[..., -1] = 0.0
        dxx[..., 0] = 2 * (u[..., 1] - u[..., 0]) / h**2
        dxx[..., -1] = 2 * (u[..., -2] - u[..., -1]) / h**2
    return dx, dxx


def finite_difference_derivatives(field: ValueField) -> ValueField:
    """Recompute ``dx`` and ``dxx`` of ``field`` from its values.

    Interior nodes use second-order central stencils. Periodic grids wrap the
    indices. ``LINEAR_EXTRAPOLATION`` closes the stencil with a ghost node of
    zero second difference, so ``dxx`` vanishes at the end nodes and ``dx``
    there is the one-sided difference the ghost implies. ``REFLECTING`` uses a
    mirrored ghost (``dx = 0`` at the ends).
    """
    return ValueField.from_values(field.grid, field.values)


@dataclass(frozen=True)
class DiscreteNorms:
    c0: float
    c1: float
    c2: float

    @property
    def total(self) -> float:
        return self.c0 + self.c1 + self.c2


def norms(field_a: ValueField, field_b: ValueField) -> DiscreteNorms:
    """Sup-norm distances between two fields and between their cached derivatives."""
    if field_a.grid != field_b.grid or field_a.values.shape != field_b.values.shape:
        raise ValueError("fields live on different grids")
    return DiscreteNorms(
        float(np.max(np.abs(field_a.values - field_b.values))),
        float(np.max(np.abs(field_a.dx - field_b.dx))),
        float(np.max(np.abs(field_a.dxx - field_b.dxx))),
    )
