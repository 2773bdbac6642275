"""State, transition and environment vocabulary shared by every other module.

States carry their own time index. The partition of the state space into
safe, irrecoverable and unsafe states is represented by :class:`RegionLabel`;
only the unsafe part is known up front (it is human defined), the other two
come out of the recoverability oracle in :mod:`qsafe.analysis`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class UsageError(ValueError):
    """Bad arguments from the caller (invalid action ids, bad config values)."""


class ContractViolation(RuntimeError):
    """An operation was invoked outside its precondition."""


class RegionLabel(enum.IntEnum):
    SAFE = 0
    IRRECOVERABLE = 1
    UNSAFE = 2


@dataclass(frozen=True)
class TimedState:
    t: int
    q: tuple[float, ...]

    @classmethod
    def make(cls, t: int, q: Sequence[float]) -> "TimedState":
        return cls(int(t), tuple(float(v) for v in q))

    def array(self) -> np.ndarray:
        return np.asarray(self.q, dtype=float)


@dataclass(frozen=True)
class Transition:
    x: TimedState
    u: int
    x_next: TimedState
    r_task: float
    r_safe: float
    entered_unsafe: bool
    episode_done: bool


class EnvModel:
    """Deterministic discrete-time environment with a finite action set.

    Subclasses provide vectorised ``dynamics`` and ``signed_margin``. All
    array methods accept a leading batch shape; the last axis is the state
    dimension. Instances are treated as immutable.
    """

    name = "env"
    dim = 0

    def __init__(self, action_set: Sequence[float], dt: float, horizon: int):
        actions = np.asarray(action_set, dtype=float)
        if actions.ndim != 1 or actions.size == 0:
            raise UsageError("action_set must be a non-empty 1-D sequence")
        if dt <= 0:
            raise UsageError(f"dt must be positive, got {dt}")
        if horizon < 0:
            raise UsageError(f"horizon must be non-negative, got {horizon}")
        self.action_set = actions
        self.action_set.setflags(write=False)
        self.dt = float(dt)
        self.horizon = int(horizon)

    @property
    def n_actions(self) -> int:
        return self.action_set.size

    @property
    def absolute_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def dynamics(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Next continuous state for control values ``u`` (not action ids)."""
        raise NotImplementedError

    def signed_margin(self, q: np.ndarray) -> np.ndarray:
        """Distance to the unsafe set, <= 0 on the unsafe set and its boundary."""
        raise NotImplementedError

    def unsafe(self, q: np.ndarray) -> np.ndarray:
        return self.signed_margin(q) <= 0.0

    def distance(self, q: np.ndarray) -> np.ndarray:
        return np.maximum(self.signed_margin(q), 0.0)

    def apply(self, q: np.ndarray, action_ids: np.ndarray) -> np.ndarray:
        return self.dynamics(q, self.action_set[np.asarray(action_ids)])

    def check_action(self, u) -> int:
        if isinstance(u, (bool, np.bool_)) or not isinstance(u, (int, np.integer)):
            raise UsageError(f"action id must be an integer, got {u!r}")
        if not 0 <= u < self.n_actions:
            raise UsageError(f"action id {u} outside [0, {self.n_actions})")
        return int(u)


def step(env: EnvModel, x: TimedState, u: int) -> TimedState:
    u = env.check_action(u)
    if x.t > env.horizon:
        raise ContractViolation(f"step called at t={x.t} > T={env.horizon}")
    q_next = env.apply(x.array()[None, :], np.array([u]))[0]
    return TimedState.make(x.t + 1, q_next)


def is_unsafe(env: EnvModel, x: TimedState | Sequence[float]) -> bool:
    q = x.array() if isinstance(x, TimedState) else np.asarray(x, dtype=float)
    return bool(env.unsafe(q[None, :])[0])


def episode_terminated(x_next: TimedState, entered_unsafe: bool, T: int) -> bool:
    return bool(entered_unsafe) or x_next.t == T + 1
