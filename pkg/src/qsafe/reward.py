"""Time-dependent safety reward and the closed-form value bounds it induces.

The crossing penalty is scaled by ``1 / gamma**t`` so that, discounted back to
the start of the episode, a crash costs ``-1 / (1 - gamma)`` no matter when
it happens. That constant dominates anything the shaping term can collect,
which is what separates recoverable from irrecoverable states in value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import ContractViolation, EnvModel, TimedState, UsageError
from .envs import GridSpec


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise UsageError(f"gamma must lie in (0, 1), got {gamma}")


@dataclass(frozen=True)
class SafetyRewardParams:
    gamma: float
    T: int
    l_max_norm: float

    def __post_init__(self):
        _check_gamma(self.gamma)
        if self.T < 0:
            raise UsageError(f"T must be non-negative, got {self.T}")
        if not self.l_max_norm > 0:
            raise UsageError("l_max_norm must be positive")

    @classmethod
    def for_grid(cls, env: EnvModel, grid: GridSpec, gamma: float, T: int | None = None):
        return cls(gamma, env.horizon if T is None else T, max_distance(env, grid))

    @property
    def pin_value(self) -> float:
        return v_bounds(self.gamma, self.T).unsafe_value


def max_distance(env: EnvModel, grid: GridSpec) -> float:
    d = env.distance(grid.centers)
    m = float(d.max())
    if m <= 0:
        raise UsageError("grid has no cell centre outside the unsafe set")
    return m


def l_shape(env: EnvModel, grid: GridSpec, q, params: SafetyRewardParams | None = None) -> float:
    q = np.asarray(q, dtype=float)
    if env.unsafe(q[None, :])[0]:
        raise ContractViolation("l(x) is undefined on the unsafe set")
    l_max = params.l_max_norm if params is not None else max_distance(env, grid)
    # continuous states can sit slightly deeper than the deepest cell centre
    return float(min(env.distance(q[None, :])[0] / l_max, 1.0))


def l_shape_array(distance: np.ndarray, params: SafetyRewardParams) -> np.ndarray:
    return np.minimum(np.asarray(distance, dtype=float) / params.l_max_norm, 1.0)


def crossing_penalty(t, gamma: float):
    """Reward for stepping from a non-unsafe state at time ``t`` into the unsafe set."""
    return -1.0 / (np.power(gamma, t) * (1.0 - gamma))


def r_safe(
    x: TimedState,
    x_next: TimedState,
    unsafe_now: bool,
    unsafe_next: bool,
    l_x: float,
    params: SafetyRewardParams,
) -> float:
    """Safety reward for one transition.

    ``l_x`` is the shaping value of the departing state; it is only used when
    both states are outside the unsafe set.
    """
    if x_next.t != x.t + 1:
        raise ContractViolation(f"time must advance by one step ({x.t} -> {x_next.t})")
    if unsafe_now and not unsafe_next:
        raise ContractViolation("unsafe states are absorbing; cannot leave the unsafe set")
    if unsafe_now:
        return -1.0
    if unsafe_next:
        return float(crossing_penalty(x.t, params.gamma))
    return float(l_x)


class ValueBounds(NamedTuple):
    safe_upper: float
    irrec_lower: float
    unsafe_value: float


def v_bounds(gamma: float, T: int) -> ValueBounds:
    _check_gamma(gamma)
    if T < 0:
        raise UsageError(f"T must be non-negative, got {T}")
    g = gamma ** (T + 1)
    safe_upper = (1.0 - g) / (1.0 - gamma)
    return ValueBounds(safe_upper, (-1.0 + g - gamma) / (1.0 - gamma), -safe_upper)


def unsafe_value_at(t, gamma: float, T: int):
    """Value of an absorbing unsafe state with ``T + 1 - t`` steps of -1 left."""
    return -(1.0 - np.power(gamma, T + 1 - np.asarray(t))) / (1.0 - gamma)
