"""Rollouts, task rewards, gated replay buffers and simultaneous training.

The task agent and the safety agent see the same rolled-out data but keep
separate replay buffers. The safety stream of an episode stops at the first
entry into the unsafe set; the task stream runs on to the horizon.

Rollouts are vectorised over parallel episodes. With ``snap=True`` states
live on cell centres and follow the :class:`~qsafe.envs.DiscreteMDP` table,
i.e. exactly the MDP that value iteration solves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import ContractViolation, EnvModel, TimedState, Transition, UsageError
from .envs import DiscreteMDP, DubinsCarEnv, GridSpec, discretize, wrap_angle
from .filter import filter_batch
from .reward import SafetyRewardParams, crossing_penalty, l_shape_array
from .solvers import LearnerConfig, TimedQTable, epsilon_greedy, greedy, pin_unsafe, replay_sweep

# policy(t, q, rng) -> action ids, for a batch of states q of shape (n, dim)
Policy = Callable[[np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class TaskRewardConfig:
    goal_bonus: float = 10.0
    shaping_scale: float = 1.0


def in_goal(env: EnvModel, q) -> np.ndarray:
    return env.goal_distance(q) <= env.goal_radius


def task_reward(env: EnvModel, x, u, x_next, cfg: TaskRewardConfig = TaskRewardConfig()):
    """Dense distance shaping in [-1, 0] plus a bonus on entering the goal.

    Works on single states or batches; ``u`` is unused but kept for the
    usual ``r(x, u, x')`` signature.
    """
    q = x.array() if isinstance(x, TimedState) else np.asarray(x, dtype=float)
    qn = x_next.array() if isinstance(x_next, TimedState) else np.asarray(x_next, dtype=float)
    shaping = -cfg.shaping_scale * env.goal_distance(qn) / env.goal_distance_max
    entered = in_goal(env, qn) & ~in_goal(env, q)
    r = shaping + cfg.goal_bonus * entered
    return float(r) if np.ndim(r) == 0 else r


# --- task policies --------------------------------------------------------

class RandomPolicy:
    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def __call__(self, t, q, rng):
        return rng.integers(0, self.n_actions, size=len(q))


def _nearest_action(env: EnvModel, control: np.ndarray) -> np.ndarray:
    return np.argmin(np.abs(control[:, None] - env.action_set[None, :]), axis=1)


class ScriptedGoalPolicy:
    """Drives straight at the goal, ignoring safety.

    Double integrator: PD on position. Dubins car: turn towards the goal
    bearing, which cuts through the keep-out disk from the far side.
    """

    def __init__(self, env: EnvModel, kp: float = 2.0, kd: float = 2.5):
        self.env = env
        self.kp, self.kd = kp, kd

    def __call__(self, t, q, rng):
        env = self.env
        q = np.asarray(q, dtype=float)
        if isinstance(env, DubinsCarEnv):
            bearing = np.arctan2(env.goal[1] - q[:, 1], env.goal[0] - q[:, 0])
            err = wrap_angle(bearing - q[:, 2])
            return _nearest_action(env, np.clip(err / env.dt, -env.omega_max, env.omega_max))
        accel = self.kp * (env.goal - q[:, 0]) - self.kd * q[:, 1]
        return _nearest_action(env, accel)


class AdversarialPolicy:
    """Heads for the unsafe set as directly as possible."""

    def __init__(self, env: EnvModel):
        self.env = env

    def __call__(self, t, q, rng):
        env = self.env
        q = np.asarray(q, dtype=float)
        m = env.n_actions
        if isinstance(env, DubinsCarEnv):
            bearing = np.arctan2(-q[:, 1], -q[:, 0])
            err = wrap_angle(bearing - q[:, 2])
            return _nearest_action(env, np.clip(err / env.dt, -env.omega_max, env.omega_max))
        return np.where(q[:, 0] >= 0, m - 1, 0)


class GreedyTablePolicy:
    def __init__(self, table: TimedQTable):
        self.table = table

    def __call__(self, t, q, rng):
        return greedy(self.table, t, discretize(self.table.grid, q))


def make_policy(name: str, env: EnvModel, table: TimedQTable | None = None) -> Policy:
    if name == "random":
        return RandomPolicy(env.n_actions)
    if name == "scripted":
        return ScriptedGoalPolicy(env)
    if name == "adversarial":
        return AdversarialPolicy(env)
    if name in ("cotrained", "penalty", "greedy"):
        if table is None:
            raise UsageError(f"policy {name!r} needs a trained task table")
        return GreedyTablePolicy(table)
    raise UsageError(f"unknown policy {name!r}")


# --- records and buffers ----------------------------------------------------

@dataclass
class EpisodeRecord:
    task_return: float
    violated: bool
    length: int
    interventions: int = 0
    trajectory: list = field(default_factory=list)


class ReplayBuffer:
    """Bounded FIFO of transitions stored column-wise.

    The safety-owned buffer refuses transitions whose source state is unsafe.
    """

    FIELDS = ("t", "cell", "u", "next_cell", "r_task", "r_safe", "entered_unsafe",
              "episode_done", "source_unsafe")

    def __init__(self, capacity: int, dim: int, owner: str = "task"):
        if owner not in ("task", "safety"):
            raise UsageError(f"unknown buffer owner {owner!r}")
        if capacity < 1:
            raise UsageError("capacity must be positive")
        self.capacity = capacity
        self.owner = owner
        self.dim = dim
        self.q = np.zeros((capacity, dim))
        self.q_next = np.zeros((capacity, dim))
        self.t = np.zeros(capacity, dtype=np.int64)
        self.cell = np.zeros(capacity, dtype=np.int64)
        self.u = np.zeros(capacity, dtype=np.int64)
        self.next_cell = np.zeros(capacity, dtype=np.int64)
        self.r_task = np.zeros(capacity)
        self.r_safe = np.zeros(capacity)
        self.entered_unsafe = np.zeros(capacity, dtype=bool)
        self.episode_done = np.zeros(capacity, dtype=bool)
        self.source_unsafe = np.zeros(capacity, dtype=bool)
        self._head = 0
        self._size = 0
        self.total_appended = 0

    def __len__(self) -> int:
        return self._size

    def append(self, **cols) -> None:
        n = len(cols["t"])
        if n == 0:
            return
        if self.owner == "safety" and np.any(cols["source_unsafe"]):
            raise ContractViolation("gating: unsafe-source transition offered to the safety buffer")
        if n > self.capacity:
            cols = {k: np.asarray(v)[-self.capacity:] for k, v in cols.items()}
            n = self.capacity
        idx = (self._head + np.arange(n)) % self.capacity
        for name in self.FIELDS + ("q", "q_next"):
            getattr(self, name)[idx] = cols[name]
        self._head = (self._head + n) % self.capacity
        self._size = min(self._size + n, self.capacity)
        self.total_appended += n

    def order(self) -> np.ndarray:
        """Storage slots from oldest to newest."""
        start = (self._head - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.order()[rng.integers(0, self._size, size=n)]

    def transitions(self) -> list[Transition]:
        out = []
        for i in self.order():
            out.append(Transition(
                TimedState.make(self.t[i], self.q[i]), int(self.u[i]),
                TimedState.make(self.t[i] + 1, self.q_next[i]),
                float(self.r_task[i]), float(self.r_safe[i]),
                bool(self.entered_unsafe[i]), bool(self.episode_done[i]),
            ))
        return out


# --- rollouts ---------------------------------------------------------------

class Stepper:
    """Advance batches of states either on the grid MDP or in continuous space."""

    def __init__(self, env: EnvModel, grid: GridSpec, snap: bool = True, mdp: DiscreteMDP | None = None):
        self.env, self.grid, self.snap = env, grid, snap
        self.mdp = mdp if mdp is not None else DiscreteMDP(env, grid)

    def cells(self, q) -> np.ndarray:
        return discretize(self.grid, q)

    def advance(self, q, cells, actions):
        if self.snap:
            nxt = self.mdp.next_cell[cells, actions]
            return self.mdp.centers[nxt], nxt, self.mdp.unsafe[nxt]
        qn = self.env.apply(q, actions)
        return qn, discretize(self.grid, qn), self.env.unsafe(qn)

    def unsafe(self, q, cells) -> np.ndarray:
        return self.mdp.unsafe[cells] if self.snap else self.env.unsafe(q)


def rollout_batch(stepper: Stepper, policy: Policy, start_q: np.ndarray, rng: np.random.Generator,
                  T: int | None = None, Q_safe: TimedQTable | None = None, eps2: float = 0.0,
                  task_cfg: TaskRewardConfig = TaskRewardConfig(), on_step=None) -> dict:
    """Run parallel episodes until each enters the unsafe set or reaches ``t = T + 1``.

    ``on_step(t, q, cells, actions, alive)`` is called before each transition
    is applied (used by the invariance checks).
    """
    env = stepper.env
    T = env.horizon if T is None else T
    q = np.array(start_q, dtype=float, copy=True)
    n = len(q)
    cells = stepper.cells(q)
    if np.any(stepper.unsafe(q, cells)):
        raise ContractViolation("rollouts must start outside the unsafe set")
    alive = np.ones(n, dtype=bool)
    returns = np.zeros(n)
    length = np.zeros(n, dtype=np.int64)
    violated = np.zeros(n, dtype=bool)
    interventions = np.zeros(n, dtype=np.int64)
    for t in range(T + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        qa, ca = q[idx], cells[idx]
        a = np.asarray(policy(np.full(idx.size, t), qa, rng), dtype=np.int64)
        if Q_safe is not None:
            a, hit = filter_batch(Q_safe, t, ca, a, eps2)
            interventions[idx] += hit
        if on_step is not None:
            on_step(t, qa, ca, a, idx)
        qn, cn, un = stepper.advance(qa, ca, a)
        returns[idx] += task_reward(env, qa, a, qn, task_cfg)
        length[idx] += 1
        violated[idx] |= un
        q[idx], cells[idx] = qn, cn
        alive[idx] = ~un
    return {"returns": returns, "length": length, "violated": violated,
            "interventions": interventions, "final_q": q}


def records_from(result: dict) -> list[EpisodeRecord]:
    return [
        EpisodeRecord(float(r), bool(v), int(l), int(k))
        for r, v, l, k in zip(result["returns"], result["violated"], result["length"], result["interventions"])
    ]


def sample_starts(grid: GridSpec, start_cells: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    return grid.centers[rng.choice(np.asarray(start_cells), size=n)]


def run_episode(env: EnvModel, grid: GridSpec, policy: Policy, rng: np.random.Generator,
                start=None, start_cells=None, Q_safe: TimedQTable | None = None, eps2: float = 0.0,
                params: SafetyRewardParams | None = None, T: int | None = None, snap: bool = True,
                task_cfg: TaskRewardConfig = TaskRewardConfig(), stepper: Stepper | None = None) -> EpisodeRecord:
    """Single episode with its full trajectory of :class:`Transition` objects.

    The start is ``start`` if given, else drawn uniformly from ``start_cells``.
    ``r_safe`` is filled in when ``params`` is given, NaN otherwise.
    """
    T = env.horizon if T is None else T
    stepper = stepper if stepper is not None else Stepper(env, grid, snap)
    if start is None:
        if start_cells is None:
            raise UsageError("run_episode needs a start state or start cells")
        start = sample_starts(grid, start_cells, 1, rng)[0]
    q = np.asarray(start, dtype=float)[None, :]
    cells = stepper.cells(q)
    if stepper.unsafe(q, cells)[0]:
        raise ContractViolation("episodes must start outside the unsafe set")
    traj = []
    total, hits = 0.0, 0
    violated = False
    for t in range(T + 1):
        a = np.asarray(policy(np.array([t]), q, rng), dtype=np.int64)
        if Q_safe is not None:
            a, hit = filter_batch(Q_safe, t, cells, a, eps2)
            hits += int(hit[0])
        qn, cn, un = stepper.advance(q, cells, a)
        r_task = float(task_reward(env, q, a, qn, task_cfg)[0])
        entered = bool(un[0])
        if params is not None:
            r_s = float(crossing_penalty(t, params.gamma)) if entered else float(
                l_shape_array(env.distance(q), params)[0])
        else:
            r_s = math.nan
        done = entered or t + 1 == T + 1
        traj.append(Transition(TimedState.make(t, q[0]), int(a[0]), TimedState.make(t + 1, qn[0]),
                               r_task, r_s, entered, done))
        total += r_task
        q, cells = qn, cn
        if entered:
            violated = True
            break
    return EpisodeRecord(total, violated, len(traj), hits, traj)


# --- simultaneous training --------------------------------------------------

@dataclass
class TrainResult:
    Q_task: TimedQTable
    Q_safe: TimedQTable
    task_buffer: ReplayBuffer
    safety_buffer: ReplayBuffer
    log: list[dict]
    safety_visits: np.ndarray  # [cell, action] count of transitions fed to the safety agent


def dual_train(env: EnvModel, grid: GridSpec, params: SafetyRewardParams, learner: LearnerConfig,
               start_cells: np.ndarray, task_cfg: TaskRewardConfig = TaskRewardConfig(),
               penalty: float = 0.0, mdp: DiscreteMDP | None = None) -> TrainResult:
    """Co-train task and safety Q-tables from shared ε-greedy rollouts.

    Episodes are rolled out ``learner.n_envs`` at a time with the task
    agent's ε-greedy behaviour policy. Every transition carries both rewards.
    After each batch of episodes each agent runs ``sweeps_per_batch``
    backward replay sweeps over its own buffer, and the safety table's
    unsafe cells are re-pinned after every sweep. ``penalty`` subtracts a fixed
    amount from the task reward on unsafe entry (reward-penalty baseline).
    """
    T = params.T
    rng = np.random.default_rng(learner.seed)
    stepper = Stepper(env, grid, learner.snap_to_grid, mdp)
    unsafe_cells = stepper.mdp.unsafe
    Q_task = TimedQTable.zeros(grid, env.n_actions, params.gamma, T, kind="task", env_name=env.name)
    Q_safe = TimedQTable.zeros(grid, env.n_actions, params.gamma, T, kind="safe", env_name=env.name)
    pin_unsafe(Q_safe, env, params=params, unsafe_mask=unsafe_cells)
    task_buf = ReplayBuffer(learner.buffer_capacity, env.dim, "task")
    safe_buf = ReplayBuffer(learner.buffer_capacity, env.dim, "safety")
    log: list[dict] = []
    visits = np.zeros((grid.n_cells, env.n_actions), dtype=np.int64)
    done_eps = 0
    while done_eps < learner.episodes:
        n = min(learner.n_envs, learner.episodes - done_eps)
        q = sample_starts(grid, start_cells, n, rng)
        cells = stepper.cells(q)
        src_unsafe = stepper.unsafe(q, cells)
        safety_live = ~src_unsafe
        returns = np.zeros(n)
        violated = np.zeros(n, dtype=bool)
        for t in range(T + 1):
            a = epsilon_greedy(Q_task, t, cells, learner.epsilon, rng)
            qn, cn, un = stepper.advance(q, cells, a)
            entered = un & ~src_unsafe
            r_task = task_reward(env, q, a, qn, task_cfg) - penalty * entered
            r_safe = np.full(n, np.nan)
            live = safety_live
            r_safe[live] = np.where(entered[live], crossing_penalty(t, params.gamma),
                                    l_shape_array(env.distance(q[live]), params))
            cols = dict(t=np.full(n, t), q=q, cell=cells, u=a, q_next=qn, next_cell=cn,
                        r_task=r_task, r_safe=r_safe, entered_unsafe=entered,
                        episode_done=entered | (t + 1 == T + 1), source_unsafe=src_unsafe)
            task_buf.append(**cols)
            safe_buf.append(**{k: np.asarray(v)[live] for k, v in cols.items()})
            np.add.at(visits, (cells[live], a[live]), 1)
            safety_live = safety_live & ~entered
            returns += r_task
            violated |= entered
            q, cells, src_unsafe = qn, cn, un
        for i in range(n):
            log.append({"episode": done_eps + i, "return": float(returns[i]),
                        "violated": int(violated[i]), "safety_buffer": len(safe_buf)})
        done_eps += n
        for _ in range(learner.sweeps_per_batch):
            for table, buf, r_name in ((Q_task, task_buf, "r_task"), (Q_safe, safe_buf, "r_safe")):
                if len(buf) == 0:
                    continue
                b = buf.order()
                touched = replay_sweep(table, buf.t[b], buf.cell[b], buf.u[b], buf.next_cell[b],
                                       getattr(buf, r_name)[b], buf.entered_unsafe[b], learner.alpha,
                                       relabel=learner.relabel_time)
                if table is Q_safe:
                    pin_unsafe(Q_safe, env, params=params, unsafe_mask=unsafe_cells,
                               cells=touched // env.n_actions)
    return TrainResult(Q_task, Q_safe, task_buf, safe_buf, log, visits)


def penalty_constant(params: SafetyRewardParams) -> float:
    return 2.0 * (1.0 - params.gamma ** (params.T + 1)) / (1.0 - params.gamma)


def reward_penalty_baseline(env: EnvModel, grid: GridSpec, params: SafetyRewardParams,
                            learner: LearnerConfig, start_cells: np.ndarray, C: float | None = None,
                            task_cfg: TaskRewardConfig = TaskRewardConfig(), mdp=None):
    """Task agent trained on ``r_task - C * [entered unsafe]``; evaluated unfiltered.

    Returns ``(policy, Q_task)``.
    """
    C = penalty_constant(params) if C is None else C
    if C < 0:
        raise UsageError("penalty must be non-negative")
    res = dual_train(env, grid, params, learner, start_cells, task_cfg, penalty=C, mdp=mdp)
    return GreedyTablePolicy(res.Q_task), res.Q_task
