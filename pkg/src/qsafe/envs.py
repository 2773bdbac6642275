"""Benchmark environments and their grid discretisation.

Two systems are provided: a double integrator with box constraints on
position and velocity, and a constant-speed Dubins car that must stay inside
a square workspace while avoiding a central disk. Both are integrated with a
fixed Euler step and clamp to their absolute bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import ContractViolation, EnvModel, UsageError


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(theta, dtype=float), 2.0 * math.pi)


def uniform_actions(limit: float, n: int) -> np.ndarray:
    if n < 3 or n % 2 == 0:
        raise UsageError(f"action count must be odd and >= 3, got {n}")
    return np.linspace(-limit, limit, n)


class DoubleIntegratorEnv(EnvModel):
    name = "double-integrator"
    dim = 2

    def __init__(
        self,
        pos_bound: float = 2.0,
        vel_bound: float = 3.0,
        pos_abs: float = 4.0,
        vel_abs: float = 5.0,
        accel_max: float = 2.0,
        n_actions: int = 5,
        goal: float = 1.8,
        goal_radius: float = 0.1,
        dt: float = 0.1,
        horizon: int = 100,
    ):
        if not (0 < pos_bound < pos_abs and 0 < vel_bound < vel_abs):
            raise UsageError("safe bounds must lie strictly inside the absolute bounds")
        super().__init__(uniform_actions(accel_max, n_actions), dt, horizon)
        self.pos_bound = float(pos_bound)
        self.vel_bound = float(vel_bound)
        self.pos_abs = float(pos_abs)
        self.vel_abs = float(vel_abs)
        self.accel_max = float(accel_max)
        self.goal = float(goal)
        self.goal_radius = float(goal_radius)

    @property
    def absolute_bounds(self):
        return (np.array([-self.pos_abs, -self.vel_abs]), np.array([self.pos_abs, self.vel_abs]))

    def dynamics(self, q, u):
        q = np.asarray(q, dtype=float)
        a = np.asarray(u, dtype=float)
        p, v = q[..., 0], q[..., 1]
        dt = self.dt
        p_next = p + v * dt + 0.5 * a * dt * dt
        v_next = v + a * dt
        out = np.stack([p_next, v_next], axis=-1)
        lo, hi = self.absolute_bounds
        return np.clip(out, lo, hi)

    def signed_margin(self, q):
        q = np.asarray(q, dtype=float)
        # each margin normalised by its own half-width, so d is dimensionless
        mp = (self.pos_bound - np.abs(q[..., 0])) / self.pos_bound
        mv = (self.vel_bound - np.abs(q[..., 1])) / self.vel_bound
        return np.minimum(mp, mv)

    def goal_distance(self, q):
        return np.abs(np.asarray(q, dtype=float)[..., 0] - self.goal)

    @property
    def goal_distance_max(self) -> float:
        return max(abs(self.pos_abs - self.goal), abs(-self.pos_abs - self.goal))

    def default_grid(self) -> "GridSpec":
        lo, hi = self.absolute_bounds
        return GridSpec(tuple(lo), tuple(hi), (81, 101), (False, False))


class DubinsCarEnv(EnvModel):
    name = "dubins"
    dim = 3

    def __init__(
        self,
        bound: float = 2.0,
        obstacle_radius: float = 1.0,
        speed: float = 1.2,
        omega_max: float = 2.0,
        n_actions: int = 5,
        goal: tuple[float, float] = (1.8, 1.8),
        goal_radius: float = 0.5,
        dt: float = 0.1,
        horizon: int = 100,
    ):
        if not 0 < obstacle_radius < bound:
            raise UsageError("keep-out disk must fit inside the workspace")
        super().__init__(uniform_actions(omega_max, n_actions), dt, horizon)
        self.bound = float(bound)
        self.obstacle_radius = float(obstacle_radius)
        self.speed = float(speed)
        self.omega_max = float(omega_max)
        self.goal = (float(goal[0]), float(goal[1]))
        self.goal_radius = float(goal_radius)

    @property
    def absolute_bounds(self):
        b = self.bound
        return (np.array([-b, -b, -math.pi]), np.array([b, b, math.pi]))

    def dynamics(self, q, u):
        q = np.asarray(q, dtype=float)
        omega = np.asarray(u, dtype=float)
        theta = wrap_angle(q[..., 2])
        dt = self.dt
        # translate with the current heading, then turn
        x = np.clip(q[..., 0] + self.speed * np.cos(theta) * dt, -self.bound, self.bound)
        y = np.clip(q[..., 1] + self.speed * np.sin(theta) * dt, -self.bound, self.bound)
        return np.stack([x, y, wrap_angle(theta + omega * dt)], axis=-1)

    def signed_margin(self, q):
        q = np.asarray(q, dtype=float)
        x, y = q[..., 0], q[..., 1]
        disk = np.hypot(x, y) - self.obstacle_radius
        wall = np.minimum(self.bound - np.abs(x), self.bound - np.abs(y))
        return np.minimum(disk, wall)

    def goal_distance(self, q):
        q = np.asarray(q, dtype=float)
        return np.hypot(q[..., 0] - self.goal[0], q[..., 1] - self.goal[1])

    @property
    def goal_distance_max(self) -> float:
        b = self.bound
        return max(math.hypot(cx - self.goal[0], cy - self.goal[1]) for cx in (-b, b) for cy in (-b, b))

    def default_grid(self) -> "GridSpec":
        lo, hi = self.absolute_bounds
        return GridSpec(tuple(lo), tuple(hi), (41, 41, 17), (False, False, True))


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid of cell centres.

    Non-periodic axes place ``n`` centres evenly on ``[lower, upper]``
    (both ends included). Periodic axes split ``[lower, upper)`` into ``n``
    equal cells with centres at the cell midpoints.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    counts: tuple[int, ...]
    periodic: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "counts", tuple(int(v) for v in self.counts))
        object.__setattr__(self, "periodic", tuple(bool(v) for v in self.periodic))
        k = len(self.counts)
        if not (len(self.lower) == len(self.upper) == len(self.periodic) == k):
            raise UsageError("grid spec fields must have equal length")
        if any(n < 2 for n in self.counts):
            raise UsageError("every grid axis needs at least 2 cells")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise UsageError("grid upper bounds must exceed lower bounds")

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def widths(self) -> np.ndarray:
        return np.array([
            (hi - lo) / (n if per else n - 1)
            for lo, hi, n, per in zip(self.lower, self.upper, self.counts, self.periodic)
        ])

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        out = []
        for lo, hi, n, per in zip(self.lower, self.upper, self.counts, self.periodic):
            if per:
                w = (hi - lo) / n
                out.append(lo + (np.arange(n) + 0.5) * w)
            else:
                out.append(np.linspace(lo, hi, n))
        return tuple(out)

    @cached_property
    def centers(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        c = np.stack([m.ravel() for m in mesh], axis=-1)
        c.setflags(write=False)
        return c

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.widths))

    def to_dict(self) -> dict:
        return {
            "lower": list(self.lower),
            "upper": list(self.upper),
            "counts": list(self.counts),
            "periodic": list(self.periodic),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["lower"]), tuple(d["upper"]), tuple(d["counts"]), tuple(d["periodic"]))


def discretize(grid: GridSpec, q) -> np.ndarray | int:
    """Flat index of the nearest cell centre for each state in ``q``."""
    q = np.asarray(q, dtype=float)
    scalar = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[-1] != grid.ndim:
        raise UsageError(f"state has {q.shape[-1]} dims, grid has {grid.ndim}")
    idx = []
    for k, (lo, hi, n, per) in enumerate(zip(grid.lower, grid.upper, grid.counts, grid.periodic)):
        col = q[..., k]
        if per:
            w = (hi - lo) / n
            i = np.mod(np.floor((col - lo) / w), n).astype(np.int64)
        else:
            if np.any(col < lo) or np.any(col > hi):
                raise ContractViolation(f"state outside grid bounds on axis {k}: [{lo}, {hi}]")
            w = (hi - lo) / (n - 1)
            i = np.clip(np.floor((col - lo) / w + 0.5), 0, n - 1).astype(np.int64)
        idx.append(i)
    flat = np.ravel_multi_index(tuple(idx), grid.counts)
    return int(flat[0]) if scalar else flat


def cell_center(grid: GridSpec, cell) -> np.ndarray:
    return grid.centers[np.asarray(cell)]


class DiscreteMDP:
    """The deterministic cell-to-cell MDP induced by an environment and grid.

    Transitions start from cell centres and land in the nearest cell of the
    continuous successor. Everything that claims exactness on the grid
    (value iteration, the recoverability oracle, snapped rollouts) reads the
    same ``next_cell`` table.
    """

    def __init__(self, env: EnvModel, grid: GridSpec):
        if grid.ndim != env.dim:
            raise UsageError(f"grid has {grid.ndim} dims, {env.name} needs {env.dim}")
        self.env = env
        self.grid = grid
        c = grid.centers
        self.unsafe = env.unsafe(c)
        self.distance = env.distance(c)
        n, m = grid.n_cells, env.n_actions
        nxt = np.empty((n, m), dtype=np.int64)
        for a in range(m):
            nxt[:, a] = discretize(grid, env.dynamics(c, np.full(n, env.action_set[a])))
        self.next_cell = nxt
        for arr in (self.unsafe, self.distance, self.next_cell):
            arr.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    @property
    def n_actions(self) -> int:
        return self.env.n_actions

    @property
    def centers(self) -> np.ndarray:
        return self.grid.centers


def make_env(name: str, **params) -> EnvModel:
    if name == "double-integrator":
        return DoubleIntegratorEnv(**params)
    if name == "dubins":
        return DubinsCarEnv(**params)
    raise UsageError(f"unknown environment {name!r}")


def signed_distance(env: EnvModel, q) -> float | np.ndarray:
    """Distance to the unsafe set; 0 on unsafe states and on the boundary."""
    q = np.asarray(q, dtype=float)
    d = env.distance(q)
    return float(d) if q.ndim == 1 else d
