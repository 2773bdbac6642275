"""Q-value threshold filter.

A task action passes when its safety Q-value is strictly above the threshold
``eps2``; otherwise the safety-greedy action is substituted. Equality
intervenes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import TimedState, UsageError
from .solvers import TimedQTable, greedy


@dataclass(frozen=True)
class FilterConfig:
    eps2: float = 0.0
    tie_break: str = "lowest"
    count_interventions: bool = True

    def __post_init__(self):
        if np.isnan(self.eps2):
            raise UsageError("eps2 must not be NaN")
        if self.tie_break != "lowest":
            raise UsageError(f"unsupported tie-break rule {self.tie_break!r}")


def _index(Q_safe: TimedQTable, x):
    if isinstance(x, TimedState):
        return Q_safe.clamp_t(x.t), Q_safe.cell_of(x.q)
    t, cell = x
    return Q_safe.clamp_t(t), cell


def safe_policy(Q_safe: TimedQTable, x) -> int:
    """Safety-greedy action at ``x`` (a TimedState or a ``(t, cell)`` pair)."""
    t, cell = _index(Q_safe, x)
    return greedy(Q_safe, t, cell)


def filter_action(Q_safe: TimedQTable, x, u_task: int, cfg: FilterConfig) -> tuple[int, bool]:
    t, cell = _index(Q_safe, x)
    if Q_safe.values[t, cell, u_task] > cfg.eps2:
        return int(u_task), False
    return greedy(Q_safe, t, cell), True


def filter_batch(Q_safe: TimedQTable, t, cells, u_task, eps2: float):
    """Vectorised ``filter_action`` over parallel states sharing one ``t`` or
    with per-state ``t``. Returns ``(actions, intervened)``."""
    t = Q_safe.clamp_t(np.broadcast_to(np.asarray(t), np.shape(cells)))
    rows = Q_safe.values[t, cells]
    q_task = np.take_along_axis(rows, np.asarray(u_task)[..., None], axis=-1)[..., 0]
    intervene = ~(q_task > eps2)
    actions = np.where(intervene, np.argmax(rows, axis=-1), u_task)
    return actions, intervene
