import numpy as np
import pytest

from qsafe.core import ContractViolation, UsageError
from qsafe.envs import discretize
from qsafe.analysis import safe_start_cells
from qsafe.solvers import LearnerConfig
from qsafe.training import (AdversarialPolicy, GreedyTablePolicy, RandomPolicy, ReplayBuffer, ScriptedGoalPolicy,
                            TaskRewardConfig, dual_train, make_policy, penalty_constant, reward_penalty_baseline,
                            run_episode, task_reward)


def test_task_reward_examples(di, dubins):
    assert task_reward(di, [0.0, 0.0], 2, [1.8, 0.0]) == pytest.approx(10.0)
    assert task_reward(di, [1.8, 0.0], 2, [1.8, 0.0]) == pytest.approx(0.0)  # no bonus without entering
    assert task_reward(di, [-3.9, 0.0], 2, [-4.0, 0.0]) == pytest.approx(-1.0)
    assert task_reward(dubins, [0, 0, 0], 2, [1.8, 1.8, 0]) == pytest.approx(10.0)
    assert task_reward(dubins, [0, 0, 0], 2, [-2.0, -2.0, 0]) == pytest.approx(-1.0)


def test_task_reward_increases_along_approach(dubins):
    pts = np.linspace([-1.9, -1.9, 0.0], [1.2, 1.2, 0.0], 25)
    r = task_reward(dubins, pts, 0, pts)
    assert np.all(np.diff(r) > 0)


def test_task_reward_constants():
    cfg = TaskRewardConfig(goal_bonus=3.0, shaping_scale=2.0)
    from qsafe.envs import DoubleIntegratorEnv
    env = DoubleIntegratorEnv()
    assert task_reward(env, [0.0, 0.0], 0, [1.8, 0.0], cfg) == pytest.approx(3.0)
    assert task_reward(env, [0.0, 0.0], 0, [-4.0, 0.0], cfg) == pytest.approx(-2.0)


def test_safe_policy_episode_runs_full_length(di_small, rng):
    grid, table = di_small["grid"], di_small["table"]
    start = grid.centers[discretize(grid, [0.0, 0.0])]
    rec = run_episode(di_small["env"], grid, GreedyTablePolicy(table), rng, start=start, params=di_small["params"],
                      stepper=None)
    assert rec.length == 101 and not rec.violated
    assert [tr.x.t for tr in rec.trajectory] == list(range(101))
    assert rec.trajectory[-1].episode_done and not any(tr.episode_done for tr in rec.trajectory[:-1])
    assert all(tr.r_safe > 0 for tr in rec.trajectory)


def test_max_accel_from_irrecoverable_state_crashes(di, rng):
    grid = di.default_grid()
    rec = run_episode(di, grid, lambda t, q, r: np.full(len(q), 4), rng, start=[1.9, 2.9], snap=False)
    assert rec.violated and rec.length <= 3
    assert rec.trajectory[-1].entered_unsafe and rec.trajectory[-1].episode_done


def test_horizon_zero_gives_one_step(di, rng):
    rec = run_episode(di, di.default_grid(), RandomPolicy(5), rng, start=[0.0, 0.0], T=0)
    assert rec.length == 1


def test_run_episode_needs_a_start(di, rng):
    with pytest.raises(UsageError):
        run_episode(di, di.default_grid(), RandomPolicy(5), rng)
    with pytest.raises(ContractViolation):
        run_episode(di, di.default_grid(), RandomPolicy(5), rng, start=[3.0, 0.0])


def test_filtered_episode_counts_interventions(di_full, rng):
    grid = di_full["grid"]
    start = grid.centers[discretize(grid, [0.0, 0.0])]
    rec = run_episode(di_full["env"], grid, AdversarialPolicy(di_full["env"]), rng, start=start,
                      Q_safe=di_full["table"], eps2=0.0)
    assert not rec.violated and rec.interventions > 0


def test_scripted_and_adversarial_policies(di, dubins, rng):
    q = np.array([[0.0, 0.0], [1.8, 0.0], [3.0, 0.0]])
    a = ScriptedGoalPolicy(di)(np.zeros(3), q, rng)
    assert di.action_set[a[0]] > 0 and di.action_set[a[1]] == 0 and di.action_set[a[2]] < 0
    a = AdversarialPolicy(di)(np.zeros(2), np.array([[0.5, 0.0], [-0.5, 0.0]]), rng)
    assert list(di.action_set[a]) == [2.0, -2.0]
    # heading away from the origin: turn towards it
    a = AdversarialPolicy(dubins)(np.zeros(1), np.array([[1.5, 0.0, 0.0]]), rng)
    assert dubins.action_set[a[0]] != 0
    with pytest.raises(UsageError):
        make_policy("cotrained", di)
    with pytest.raises(UsageError):
        make_policy("unknown", di)


def _cols(n, t=0, source_unsafe=False):
    z = np.zeros(n)
    return dict(t=np.full(n, t), q=np.zeros((n, 2)), cell=np.arange(n), u=np.zeros(n, int), q_next=np.zeros((n, 2)),
                next_cell=np.arange(n), r_task=z, r_safe=z, entered_unsafe=z.astype(bool),
                episode_done=z.astype(bool), source_unsafe=np.full(n, source_unsafe))


def test_replay_buffer_fifo_eviction():
    buf = ReplayBuffer(5, 2, "task")
    buf.append(**_cols(3, t=0))
    buf.append(**_cols(4, t=1))
    assert len(buf) == 5 and buf.total_appended == 7
    o = buf.order()
    assert list(buf.t[o]) == [0, 1, 1, 1, 1]
    assert list(buf.cell[o]) == [2, 0, 1, 2, 3]


def test_replay_buffer_gating():
    buf = ReplayBuffer(5, 2, "safety")
    with pytest.raises(ContractViolation):
        buf.append(**_cols(2, source_unsafe=True))
    assert len(buf) == 0
    task = ReplayBuffer(5, 2, "task")
    task.append(**_cols(2, source_unsafe=True))
    assert len(task) == 2
    with pytest.raises(UsageError):
        ReplayBuffer(5, 2, "critic")
    with pytest.raises(UsageError):
        ReplayBuffer(0, 2, "task")


def test_replay_buffer_transitions_view():
    buf = ReplayBuffer(4, 2, "task")
    buf.append(**_cols(2, t=3))
    trs = buf.transitions()
    assert len(trs) == 2 and trs[0].x.t == 3 and trs[0].x_next.t == 4


@pytest.fixture(scope="module")
def small_run(di_small):
    env, grid, p = di_small["env"], di_small["grid"], di_small["params"]
    cfg = LearnerConfig(episodes=64, n_envs=16, seed=3)
    starts = safe_start_cells(di_small["partition"])
    return dual_train(env, grid, p, cfg, starts, mdp=di_small["mdp"]), cfg


def test_dual_train_stream_routing(small_run):
    res, cfg = small_run
    T = res.Q_safe.T
    assert len(res.task_buffer) == cfg.episodes * (T + 1)
    sb = res.safety_buffer
    o = sb.order()
    assert not sb.source_unsafe[o].any()
    violated = sum(r["violated"] for r in res.log)
    assert int(sb.entered_unsafe[o].sum()) == violated
    assert not np.isnan(sb.r_safe[o]).any()
    # every safety row is also a task row with the same (t, x, u, x')
    key = lambda b, i: set(zip(b.t[i], b.cell[i], b.u[i], b.next_cell[i]))
    assert key(sb, o) <= key(res.task_buffer, res.task_buffer.order())
    assert res.safety_visits.sum() == len(sb)


def test_dual_train_log(small_run):
    res, cfg = small_run
    assert [r["episode"] for r in res.log] == list(range(cfg.episodes))
    assert set(res.log[0]) == {"episode", "return", "violated", "safety_buffer"}


def test_dual_train_zero_episodes(di_small):
    env, grid, p = di_small["env"], di_small["grid"], di_small["params"]
    res = dual_train(env, grid, p, LearnerConfig(episodes=0), safe_start_cells(di_small["partition"]),
                     mdp=di_small["mdp"])
    assert not res.Q_task.values.any()
    unsafe = di_small["mdp"].unsafe
    assert not res.Q_safe.values[:, ~unsafe].any()
    assert np.all(res.Q_safe.values[:, unsafe] == p.pin_value)
    assert len(res.task_buffer) == len(res.safety_buffer) == 0


def test_dual_train_is_seed_deterministic(di_small, small_run):
    res, cfg = small_run
    again = dual_train(di_small["env"], di_small["grid"], di_small["params"], cfg,
                       safe_start_cells(di_small["partition"]), mdp=di_small["mdp"])
    assert np.array_equal(res.Q_safe.values, again.Q_safe.values)
    assert np.array_equal(res.Q_task.values, again.Q_task.values)
    assert res.log == again.log


def test_pinned_unsafe_cells_stay_pinned(small_run, di_small):
    res, _ = small_run
    unsafe = di_small["mdp"].unsafe
    assert np.all(res.Q_safe.values[:, unsafe] == di_small["params"].pin_value)
    assert np.isfinite(res.Q_safe.values).all() and np.isfinite(res.Q_task.values).all()


def test_reward_penalty_baseline(di_small, small_run):
    res, cfg = small_run
    env, grid, p = di_small["env"], di_small["grid"], di_small["params"]
    starts = safe_start_cells(di_small["partition"])
    _, q0 = reward_penalty_baseline(env, grid, p, cfg, starts, C=0.0, mdp=di_small["mdp"])
    assert np.array_equal(q0.values, res.Q_task.values)
    _, qa = reward_penalty_baseline(env, grid, p, cfg, starts, mdp=di_small["mdp"])
    _, qb = reward_penalty_baseline(env, grid, p, cfg, starts, mdp=di_small["mdp"])
    assert np.array_equal(qa.values, qb.values)
    assert penalty_constant(p) == pytest.approx(2 * (1 - 0.95 ** 101) / 0.05)
    with pytest.raises(UsageError):
        reward_penalty_baseline(env, grid, p, cfg, starts, C=-1.0, mdp=di_small["mdp"])
