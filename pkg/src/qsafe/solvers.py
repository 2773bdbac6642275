"""Time-indexed tabular Q-functions: exact backward induction and Q-learning.

Tables are indexed ``[t, cell, action]`` for ``t`` in ``0..T``; the value
after the last decision, ``V_{T+1}``, is zero. Value iteration runs on the
:class:`~qsafe.envs.DiscreteMDP` and is the ground truth every learned table
is compared against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Transition, UsageError
from .envs import DiscreteMDP, GridSpec, discretize
from .reward import SafetyRewardParams, crossing_penalty, l_shape_array

MAGIC = b"QSAFE-QTABLE 1\n"


def row_max(A: np.ndarray) -> np.ndarray:
    """Max over the last (action) axis.

    Same result as ``A.max(axis=-1)``; folding columns with ``np.maximum``
    is much faster for the narrow action axis.
    """
    v = A[..., 0].copy()
    for a in range(1, A.shape[-1]):
        np.maximum(v, A[..., a], out=v)
    return v


class TimedQTable:
    def __init__(self, values: np.ndarray, grid: GridSpec, gamma: float, kind: str = "safe",
                 source: str = "learned", env_name: str = ""):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3 or values.shape[1] != grid.n_cells:
            raise UsageError(f"table shape {values.shape} does not match grid ({grid.n_cells} cells)")
        if kind not in ("safe", "task"):
            raise UsageError(f"unknown table kind {kind!r}")
        self.values = values
        self.grid = grid
        self.gamma = float(gamma)
        self.kind = kind
        self.source = source
        self.env_name = env_name

    @classmethod
    def zeros(cls, grid: GridSpec, n_actions: int, gamma: float, T: int, **kw) -> "TimedQTable":
        return cls(np.zeros((T + 1, grid.n_cells, n_actions)), grid, gamma, **kw)

    @property
    def T(self) -> int:
        return self.values.shape[0] - 1

    @property
    def n_actions(self) -> int:
        return self.values.shape[2]

    def V(self, t=None) -> np.ndarray:
        if t is None:
            return row_max(self.values)
        return row_max(self.values[t])

    def clamp_t(self, t):
        return np.minimum(t, self.T)

    def cell_of(self, q) -> np.ndarray | int:
        return discretize(self.grid, q)

    def copy(self) -> "TimedQTable":
        return TimedQTable(self.values.copy(), self.grid, self.gamma, self.kind, self.source, self.env_name)

    def header(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "T": self.T,
            "kind": self.kind,
            "source": self.source,
            "env": self.env_name,
        }

    def save(self, path) -> Path:
        """Write the table as a magic line, a JSON header line, then raw
        little-endian float64 values in row-major ``[t][cell][action]`` order."""
        path = Path(path)
        try:
            with open(path, "wb") as fh:
                fh.write(MAGIC)
                fh.write(json.dumps(self.header(), sort_keys=True).encode() + b"\n")
                fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        except OSError as exc:
            raise OSError(f"cannot write Q-table to {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path) -> "TimedQTable":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                if fh.readline() != MAGIC:
                    raise UsageError(f"{path} is not a Q-table file")
                head = json.loads(fh.readline())
                raw = fh.read()
        except OSError as exc:
            raise OSError(f"cannot read Q-table from {path}: {exc}") from exc
        grid = GridSpec.from_dict(head["grid"])
        shape = (head["T"] + 1, grid.n_cells, head["n_actions"])
        values = np.frombuffer(raw, dtype="<f8")
        if values.size != int(np.prod(shape)):
            raise UsageError(f"{path}: payload has {values.size} values, header implies {shape}")
        return cls(values.reshape(shape).astype(np.float64), grid, head["gamma"], head["kind"],
                   head["source"], head.get("env", ""))


@dataclass(frozen=True)
class LearnerConfig:
    alpha: float = 0.5
    epsilon: float = 0.5
    episodes: int = 50000
    seed: int = 0
    n_envs: int = 1024
    sweeps_per_batch: int = 1
    buffer_capacity: int = 500_000
    relabel_time: bool = True
    snap_to_grid: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise UsageError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise UsageError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.episodes < 0 or self.n_envs < 1 or self.buffer_capacity < 1:
            raise UsageError("episode budget must be non-negative, env and buffer sizes positive")
        if self.sweeps_per_batch < 0:
            raise UsageError("sweeps_per_batch must be non-negative")


def _absorbing_next(mdp: DiscreteMDP) -> np.ndarray:
    nxt = mdp.next_cell.copy()
    rows = np.flatnonzero(mdp.unsafe)
    nxt[rows, :] = rows[:, None]
    return nxt


def safety_rewards(mdp: DiscreteMDP, params: SafetyRewardParams, t: int) -> np.ndarray:
    """Reward array ``[cell, action]`` of the grid MDP at decision time ``t``."""
    nxt = _absorbing_next(mdp)
    l = l_shape_array(mdp.distance, params)
    r = np.where(mdp.unsafe[nxt], crossing_penalty(t, params.gamma), l[:, None])
    r[mdp.unsafe, :] = -1.0
    return r


def value_iteration_safe(env, grid: GridSpec, params: SafetyRewardParams,
                         mdp: DiscreteMDP | None = None) -> TimedQTable:
    """Exact ``Q*_safe`` on the grid MDP by backward induction.

    Unsafe cells are absorbing and pay -1 per remaining step.
    """
    mdp = mdp if mdp is not None else DiscreteMDP(env, grid)
    T, g = params.T, params.gamma
    nxt = _absorbing_next(mdp)
    Q = np.empty((T + 1, mdp.n_cells, mdp.n_actions))
    v_next = np.zeros(mdp.n_cells)
    for t in range(T, -1, -1):
        Q[t] = safety_rewards(mdp, params, t) + g * v_next[nxt]
        v_next = row_max(Q[t])
    return TimedQTable(Q, grid, g, kind="safe", source="dp", env_name=env.name)


def bellman_residual(table: TimedQTable, mdp: DiscreteMDP, params: SafetyRewardParams) -> float:
    """Largest change one more backward sweep would make to ``table``."""
    nxt = _absorbing_next(mdp)
    V = table.V()
    worst = 0.0
    for t in range(table.T + 1):
        v_next = V[t + 1] if t < table.T else np.zeros(mdp.n_cells)
        target = safety_rewards(mdp, params, t) + params.gamma * v_next[nxt]
        worst = max(worst, float(np.abs(table.values[t] - target).max()))
    return worst


def q_update(table: TimedQTable, tr: Transition, alpha: float, gamma: float | None = None,
             done: bool | None = None) -> float:
    """One tabular Q-learning step on the entry ``[tr.x.t, cell(x), u]``.

    Safety tables learn from ``r_safe``, task tables from ``r_task``. ``done``
    defaults to the transition's own termination flag.
    """
    gamma = table.gamma if gamma is None else gamma
    t = tr.x.t
    c = table.cell_of(tr.x.q)
    r = tr.r_safe if table.kind == "safe" else tr.r_task
    done = tr.episode_done if done is None else done
    boot = 0.0
    if not done and t + 1 <= table.T:
        boot = table.values[t + 1, table.cell_of(tr.x_next.q)].max()
    entry = (1.0 - alpha) * table.values[t, c, tr.u] + alpha * (r + gamma * boot)
    table.values[t, c, tr.u] = entry
    return float(entry)


def replay_sweep(table: TimedQTable, t, cells, actions, next_cells, rewards, entered_unsafe,
                 alpha: float, relabel: bool = True) -> np.ndarray:
    """One backward pass of Q-learning over a batch of stored transitions.

    Time slices are visited from ``T`` down to 0 so that every slice
    bootstraps from the freshly updated slice after it. Within a slice the
    targets of all transitions sharing a ``(cell, action)`` entry are
    averaged before the usual ``(1 - alpha) * Q + alpha * target`` step.

    With ``relabel`` every transition is used at every slice: the dynamics do
    not depend on time, so only the reward (the crossing penalty) and the
    horizon cut-off are recomputed per slice. Task tables ignore
    ``entered_unsafe`` because the task stream runs on after a violation.

    Returns the flat ``cell * n_actions + action`` entries that were touched.
    """
    T, g, m = table.T, table.gamma, table.n_actions
    t = np.asarray(t, dtype=np.int64)
    cells = np.asarray(cells, dtype=np.int64)
    if cells.size == 0:
        return np.empty(0, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    next_cells = np.asarray(next_cells, dtype=np.int64)
    rewards = np.asarray(rewards, dtype=float)
    entered = np.asarray(entered_unsafe, dtype=bool)
    safe_kind = table.kind == "safe"

    # collapse repeated transitions into one packed integer key per group;
    # stored rewards are averaged within a group
    n_cells = table.grid.n_cells
    entry = cells * m + actions
    packed = (entry * n_cells + next_cells) * 2 + entered
    if not relabel:
        packed = packed * (T + 1) + t
    uniq, inv, counts = np.unique(packed, return_inverse=True, return_counts=True)
    w = counts.astype(float)
    r_mean = np.bincount(inv, weights=rewards, minlength=len(uniq)) / w
    t_u = None
    if not relabel:
        t_u = uniq % (T + 1)
        uniq = uniq // (T + 1)
    ent = (uniq % 2).astype(bool)
    nxt = (uniq // 2) % n_cells
    key = uniq // 2 // n_cells
    entries, key_idx = np.unique(key, return_inverse=True)
    e_cell, e_act = entries // m, entries % m

    Q = table.values
    for s in range(T, -1, -1):
        if relabel:
            sel = slice(None)
            kidx, wk = key_idx, w
        else:
            sel = t_u == s
            if not np.any(sel):
                continue
            kidx, wk = key_idx[sel], w[sel]
        n_ = nxt[sel]
        ent_s = ent[sel]
        boot = row_max(Q[s + 1])[n_] if s < T else np.zeros(n_.size)
        if safe_kind:
            r = np.where(ent_s, crossing_penalty(s, g), r_mean[sel])
            live = ~ent_s & (s < T)
        else:
            r = r_mean[sel]
            live = np.full(n_.size, s < T)
        target = r + g * np.where(live, boot, 0.0)
        num = np.bincount(kidx, weights=wk * target, minlength=entries.size)
        den = np.bincount(kidx, weights=wk, minlength=entries.size)
        hit = den > 0
        c, a = e_cell[hit], e_act[hit]
        Q[s, c, a] = (1.0 - alpha) * Q[s, c, a] + alpha * num[hit] / den[hit]
    return entries


def pin_unsafe(table: TimedQTable, env, grid: GridSpec | None = None,
               params: SafetyRewardParams | None = None, unsafe_mask: np.ndarray | None = None,
               cells: np.ndarray | None = None) -> TimedQTable:
    """Set every action entry of every unsafe cell, at every t, to the
    closed-form unsafe value ``-(1 - gamma^(T+1)) / (1 - gamma)``.

    ``cells`` restricts the write to those cells; callers that keep the rest
    of the table pinned use it to re-pin only what an update touched.
    """
    grid = table.grid if grid is None else grid
    gamma = table.gamma if params is None else params.gamma
    T = table.T if params is None else params.T
    mask = env.unsafe(grid.centers) if unsafe_mask is None else unsafe_mask
    rows = np.flatnonzero(mask)
    if cells is not None:
        cells = np.unique(np.asarray(cells, dtype=np.int64))
        rows = cells[mask[cells]]
    table.values[:, rows, :] = -(1.0 - gamma ** (T + 1)) / (1.0 - gamma)
    return table


def greedy(table: TimedQTable, t, cell) -> np.ndarray | int:
    """Argmax action; ties go to the lowest action id."""
    t = table.clamp_t(np.asarray(t))
    a = np.argmax(table.values[t, cell], axis=-1)
    return int(a) if np.ndim(a) == 0 else a


def epsilon_greedy(table: TimedQTable, t, cell, epsilon: float, rng: np.random.Generator):
    """Uniform random action with probability ``epsilon``, greedy otherwise.

    Draws one uniform and one integer per state whatever the outcome, so the
    random stream does not depend on the table contents.
    """
    cell = np.asarray(cell)
    n = cell.size
    explore = rng.random(n) < epsilon
    random_a = rng.integers(0, table.n_actions, size=n)
    a = np.where(explore, random_a, np.reshape(greedy(table, np.broadcast_to(t, cell.shape), cell), n))
    return int(a[0]) if cell.ndim == 0 else a.reshape(cell.shape)
