"""Rectified-flow core: interpolation paths, velocity matching, Euler integration.

Conventions used throughout the package: time t=0 is the prior (noise) end of
the path, t=1 is the data end. Generation integrates 0 -> 1, inversion 1 -> 0.
A velocity field is any callable ``field(z, t, cond) -> array`` returning an
array of the same shape as ``z``; ``cond`` is passed through opaquely and may
be None. All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatchError, NumericsError, TimeRangeError

TIME_TOL = 1e-9

VelocityFn = Callable[[np.ndarray, float, object], np.ndarray]


def _fd_derivative(fn: Callable[[float], float], t: float, h: float = 1e-6) -> float:
    """Central difference, shifted to one-sided at the interval ends."""
    lo, hi = max(0.0, t - h), min(1.0, t + h)
    return (fn(hi) - fn(lo)) / (hi - lo)


@dataclass(frozen=True)
class Schedule:
    """Interpolation schedule (alpha, beta) with alpha(0)=1, beta(0)=0, alpha(1)=0, beta(1)=1.

    ``alpha_dot``/``beta_dot`` may be omitted for custom schedules, in which
    case derivatives fall back to central finite differences. The canonical
    linear schedule carries exact derivatives.
    """

    alpha: Callable[[float], float]
    beta: Callable[[float], float]
    alpha_dot: Optional[Callable[[float], float]] = None
    beta_dot: Optional[Callable[[float], float]] = None
    kind: str = "custom"

    @classmethod
    def canonical_linear(cls) -> "Schedule":
        """alpha(t) = 1 - t, beta(t) = t: the straight-path schedule."""
        return cls(
            alpha=lambda t: 1.0 - t,
            beta=lambda t: t,
            alpha_dot=lambda t: -1.0,
            beta_dot=lambda t: 1.0,
            kind="canonical-linear",
        )

    def d_alpha(self, t: float) -> float:
        if self.alpha_dot is not None:
            return self.alpha_dot(t)
        return _fd_derivative(self.alpha, t)

    def d_beta(self, t: float) -> float:
        if self.beta_dot is not None:
            return self.beta_dot(t)
        return _fd_derivative(self.beta, t)

    def check_endpoints(self, atol: float = 1e-12) -> None:
        """Validate the boundary constraints on alpha and beta."""
        checks = [
            (self.alpha(0.0), 1.0, "alpha(0)"),
            (self.beta(0.0), 0.0, "beta(0)"),
            (self.alpha(1.0), 0.0, "alpha(1)"),
            (self.beta(1.0), 1.0, "beta(1)"),
        ]
        for got, want, name in checks:
            if abs(got - want) > atol:
                raise ValueError(f"schedule violates {name}={want}, got {got}")


CANONICAL = Schedule.canonical_linear()


@dataclass
class FlowState:
    """A latent point on the flow path together with its time coordinate."""

    z: np.ndarray
    t: float

    def __post_init__(self) -> None:
        self.z = np.asarray(self.z, dtype=np.float64)
        if not (-TIME_TOL <= self.t <= 1.0 + TIME_TOL):
            raise TimeRangeError(f"time {self.t} outside [0, 1]")
        if not np.all(np.isfinite(self.z)):
            raise NumericsError("FlowState latent contains non-finite entries")


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing partition 0 = t_0 < ... < t_K = 1 plus a direction.

    ``forward`` walks the times left to right (noise -> data), ``reverse``
    right to left (data -> noise). Times are stored increasing either way.
    """

    times: np.ndarray
    direction: str = "forward"

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("grid needs at least two times")
        if abs(times[0]) > TIME_TOL or abs(times[-1] - 1.0) > TIME_TOL:
            raise ValueError("grid must span [0, 1]")
        if np.any(np.diff(times) <= 0):
            raise ValueError("grid times must be strictly increasing")
        if self.direction not in ("forward", "reverse"):
            raise ValueError(f"unknown direction {self.direction!r}")

    @classmethod
    def uniform(cls, steps: int, direction: str = "forward") -> "TimeGrid":
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return cls(np.linspace(0.0, 1.0, steps + 1), direction)

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def start_time(self) -> float:
        return float(self.times[0] if self.direction == "forward" else self.times[-1])

    @property
    def end_time(self) -> float:
        return float(self.times[-1] if self.direction == "forward" else self.times[0])

    def segments(self) -> list[tuple[float, float]]:
        """(t_from, t_to) pairs in traversal order; t_to - t_from is the signed step."""
        ts = self.times
        if self.direction == "forward":
            return [(float(ts[i]), float(ts[i + 1])) for i in range(ts.size - 1)]
        return [(float(ts[i + 1]), float(ts[i])) for i in range(ts.size - 2, -1, -1)]

    def mirrored(self) -> "TimeGrid":
        """Same partition, opposite traversal direction."""
        other = "reverse" if self.direction == "forward" else "forward"
        return TimeGrid(self.times.copy(), other)


def _check_same_shape(z0: np.ndarray, z1: np.ndarray) -> None:
    if z0.shape != z1.shape:
        raise DimensionMismatchError(f"shape mismatch: {z0.shape} vs {z1.shape}")


def interpolate(z0: np.ndarray, z1: np.ndarray, t: float, schedule: Schedule = CANONICAL) -> np.ndarray:
    """Point on the interpolation path: alpha(t) * z0 + beta(t) * z1.

    Exact at the endpoints: t=0 returns z0 and t=1 returns z1 bitwise.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    _check_same_shape(z0, z1)
    if t == 0.0:
        return z0.copy()
    if t == 1.0:
        return z1.copy()
    return schedule.alpha(t) * z0 + schedule.beta(t) * z1


def path_velocity(z0: np.ndarray, z1: np.ndarray, t: float, schedule: Schedule = CANONICAL) -> np.ndarray:
    """Instantaneous path derivative alpha'(t) * z0 + beta'(t) * z1.

    For the canonical linear schedule this is z1 - z0 for every t.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    _check_same_shape(z0, z1)
    if schedule.kind == "canonical-linear":
        return z1 - z0
    return schedule.d_alpha(t) * z0 + schedule.d_beta(t) * z1


def velocity_matching_loss(
    field: VelocityFn,
    batch: Sequence[tuple[np.ndarray, np.ndarray, float]],
    schedule: Schedule = CANONICAL,
    cond: object = None,
) -> float:
    """Mean squared velocity-prediction error over a batch of (z0, z1, t) items.

    Reduction is the mean over batch items AND over array elements, so the
    value does not scale with the latent dimension.
    """
    if len(batch) == 0:
        raise ValueError("velocity_matching_loss needs a nonempty batch")
    total = 0.0
    for z0, z1, t in batch:
        zt = interpolate(z0, z1, t, schedule)
        target = path_velocity(z0, z1, t, schedule)
        diff = np.asarray(field(zt, t, cond), dtype=np.float64) - target
        total += float(np.mean(diff * diff))
    return total / len(batch)


def euler_step(field: VelocityFn, state: FlowState, h: float, cond: object = None) -> FlowState:
    """One explicit Euler step: z' = z + h * v(z, t), t' = t + h. h may be signed."""
    t_next = state.t + h
    if not (-TIME_TOL <= t_next <= 1.0 + TIME_TOL):
        raise TimeRangeError(f"step from t={state.t} by h={h} leaves [0, 1]")
    if h == 0.0:
        return FlowState(state.z.copy(), state.t)
    v = np.asarray(field(state.z, state.t, cond), dtype=np.float64)
    _check_same_shape(state.z, v)
    return FlowState(state.z + h * v, min(max(t_next, 0.0), 1.0))


def integrate(
    field: VelocityFn,
    initial: FlowState,
    grid: TimeGrid,
    stepper: str = "euler",
    cond: object = None,
    solver_config: object = None,
) -> list[FlowState]:
    """Integrate the flow ODE along ``grid`` and return the full trajectory.

    ``stepper`` is "euler", "rf2" (second-order solver with finite-difference
    time derivative), or a callable ``(field, state, h, cond) -> FlowState``.
    The trajectory has ``grid.steps + 1`` states, the first being ``initial``.
    """
    if abs(initial.t - grid.start_time) > TIME_TOL:
        raise ValueError(f"initial time {initial.t} does not match grid start {grid.start_time}")
    step_fn = _resolve_stepper(stepper, solver_config)
    trajectory = [FlowState(initial.z.copy(), initial.t)]
    state = trajectory[0]
    for i, (t_from, t_to) in enumerate(grid.segments()):
        try:
            state = step_fn(field, FlowState(state.z, t_from), t_to - t_from, cond)
        except NumericsError as exc:
            raise NumericsError(f"non-finite latent after step {i}") from exc
        if not np.all(np.isfinite(state.z)):
            raise NumericsError(f"non-finite latent after step {i}")
        trajectory.append(state)
    return trajectory


def _resolve_stepper(stepper, solver_config):
    if callable(stepper):
        return stepper
    if stepper == "euler":
        return euler_step
    if stepper in ("rf2", "rf_solver"):
        from .solver import SolverConfig, rf_solver_step

        cfg = solver_config if solver_config is not None else SolverConfig()

        def rf2(field, state, h, cond):
            return rf_solver_step(field, state, h, cfg, cond)

        return rf2
    raise ValueError(f"unknown stepper {stepper!r}")
