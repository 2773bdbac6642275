import numpy as np
import pytest

from qsafe.analysis import (PartitionMap, analytical_di_safe_set, check_properties, distance_to_analytical_boundary,
                            evaluate, export_partition, export_trajectory, export_value_field, forward_invariance,
                            read_value_field, recoverability_oracle, safe_start_cells, safety_rate, summarize,
                            threshold_sweep, trend_ok, write_eval_csv, write_train_log)
from qsafe.core import RegionLabel, UsageError
from qsafe.envs import DiscreteMDP, GridSpec, discretize
from qsafe.reward import SafetyRewardParams
from qsafe.solvers import TimedQTable
from qsafe.training import EpisodeRecord, GreedyTablePolicy, RandomPolicy, Stepper, make_policy, run_episode


def test_oracle_examples(di_full):
    pm, grid, mdp = di_full["partition"], di_full["grid"], di_full["mdp"]
    assert np.all(pm.labels[mdp.unsafe] == RegionLabel.UNSAFE)
    np.testing.assert_array_equal(pm.labels == RegionLabel.UNSAFE, di_full["env"].unsafe(grid.centers))
    assert pm.labels[discretize(grid, [1.9, 2.9])] == RegionLabel.IRRECOVERABLE
    for T in (0, 10, 100):
        short = recoverability_oracle(di_full["env"], grid, T=T, mdp=mdp)
        assert short.labels[discretize(grid, [0.0, 0.0])] == RegionLabel.SAFE
        assert short.T == T


def test_oracle_labels_shrink_with_horizon(di_small):
    env, grid, mdp = di_small["env"], di_small["grid"], di_small["mdp"]
    safe = [recoverability_oracle(env, grid, T=T, mdp=mdp).labels == RegionLabel.SAFE for T in (1, 5, 20, 100)]
    for a, b in zip(safe, safe[1:]):
        assert not np.any(b & ~a)


def test_partition_counts_sum(di_full):
    c = di_full["partition"].counts()
    assert sum(c.values()) == di_full["grid"].n_cells
    assert set(c) == {"safe", "irrecoverable", "unsafe"}


def test_dp_and_oracle_agree_on_sign(di_small):
    V0, pm = di_small["table"].V(0), di_small["partition"]
    np.testing.assert_array_equal(V0 > 0, pm.labels == RegionLabel.SAFE)


@pytest.mark.parametrize("q,expected", [([0, 0], True), ([1.9, 1.0], False), ([-1.9, 1.0], True),
                                        ([0, 3.0], False), ([-0.5, -2.0], True), ([-1.5, -2.0], False)])
def test_analytical_safe_set(q, expected):
    assert analytical_di_safe_set(q) is expected


def test_distance_to_analytical_boundary(di):
    d = distance_to_analytical_boundary(di, np.array([[0.0, 0.0], [1.0, 0.0], [-1.5, 0.0]]))
    np.testing.assert_allclose(d, [2.0, 1.0, 0.5], atol=1e-3)


def test_check_properties_clean_on_dp(di_small):
    rep = check_properties(di_small["table"], di_small["partition"], di_small["params"])
    assert rep.ok and rep.source == "dp" and rep.checked > di_small["grid"].n_cells
    assert "0 violations" in rep.summary()


def test_check_properties_fault_injection(di_small):
    t = di_small["table"].copy()
    c = int(np.flatnonzero(di_small["mdp"].unsafe)[0])
    t.values[0, c, 2] = 1.0
    rep = check_properties(t, di_small["partition"], di_small["params"])
    assert len(rep.violations) == 1
    v = rep.violations[0]
    assert (v.t, v.cell, v.rule, v.label) == (0, c, "unsafe-value", "unsafe")
    assert "unsafe-value" in str(v)


def test_check_properties_sign_at_later_times(di_small):
    t = di_small["table"].copy()
    pm = di_small["partition"]
    c = int(pm.cells(RegionLabel.SAFE)[0])
    t.values[50, c, :] = -1.0
    rep = check_properties(t, pm, di_small["params"])
    assert [(v.t, v.rule) for v in rep.violations] == [(50, "sign")]
    assert check_properties(t, pm, di_small["params"], all_t=False).ok


def test_check_properties_grid_mismatch(di_small, di_full):
    with pytest.raises(UsageError):
        check_properties(di_small["table"], di_full["partition"], di_small["params"])


def test_safety_rate_examples():
    ok = [EpisodeRecord(0.0, False, 101) for _ in range(100)]
    assert safety_rate(ok, 100) == 1.0
    mixed = [EpisodeRecord(0.0, i < 12, 101 if i >= 12 else 5) for i in range(100)]
    assert safety_rate(mixed, 100) == pytest.approx(0.88)
    with pytest.raises(UsageError):
        safety_rate([], 100)


def test_forward_invariance_adversarial(di_full):
    fi = forward_invariance(di_full["table"], di_full["mdp"], make_policy("adversarial", di_full["env"]),
                            safe_start_cells(di_full["partition"]))
    assert fi["unsafe_entries"] == 0 and fi["nonpositive_value_visits"] == 0 and fi["safety_rate"] == 1.0


def test_threshold_sweep_sentinels(di_full):
    env, grid, mdp, table = di_full["env"], di_full["grid"], di_full["mdp"], di_full["table"]
    st = Stepper(env, grid, True, mdp)
    starts = safe_start_cells(di_full["partition"])
    pol = RandomPolicy(env.n_actions)
    res = threshold_sweep(st, table, pol, [np.inf, 3.0, -np.inf], starts, episodes=20, seeds=range(2))
    assert list(res.column("eps2")) == [-np.inf, 3.0, np.inf]
    free = summarize(evaluate(st, pol, starts, 20, range(2)), 100)
    lo = res.rows[0]
    assert (lo.safety_rate, lo.mean_return, lo.std_return, lo.intervention_rate) == \
        (free.safety_rate, free.mean_return, free.std_return, 0.0)
    hi = res.rows[-1]
    assert hi.intervention_rate == 1.0
    safe_only = summarize(evaluate(st, GreedyTablePolicy(table), starts, 20, range(2)), 100)
    assert (hi.safety_rate, hi.mean_return) == (safe_only.safety_rate, safe_only.mean_return)
    with pytest.raises(UsageError):
        threshold_sweep(st, table, pol, [], starts)


def test_trend_ok():
    assert trend_ok([0.1, 0.5, 0.5, 1.0], increasing=True)
    assert trend_ok([0.1, 0.5, 0.49, 1.0], increasing=True)
    assert not trend_ok([0.1, 0.5, 0.4, 1.0], increasing=True)
    assert not trend_ok([0.1, 0.5, 0.49, 0.6, 0.59], increasing=True)
    assert trend_ok([3, 2, 2.01, 1], increasing=False)


def test_value_field_export_three_cells(tmp_path):
    grid = GridSpec((-1.0,), (1.0,), (3,), (False,))
    vals = np.array([[[0.1, -2.0], [1.0 / 3.0, 0.2], [-7.123456789012345, -8.0]]])
    t = TimedQTable(vals, grid, 0.9)
    pm = PartitionMap(grid, np.array([2, 0, 1], np.int8), np.array([[False, True, False]] * 2),
                      np.array([True, False, False]))
    pm.labels = pm.labels_at(0)
    path = export_value_field(t, 0, tmp_path / "v.csv", pm)
    lines = path.read_text().splitlines()
    assert lines[0] == "cell,q0,value,label" and len(lines) == 4
    q, v, labels = read_value_field(path)
    np.testing.assert_array_equal(v, vals[0].max(axis=-1))
    np.testing.assert_array_equal(q[:, 0], [-1.0, 0.0, 1.0])
    assert labels == ["unsafe", "safe", "irrecoverable"]
    with pytest.raises(UsageError):
        export_value_field(t, 5, tmp_path / "bad.csv")


def test_export_error_has_path_context(tmp_path, di_small):
    with pytest.raises(OSError, match="missing"):
        export_partition(di_small["partition"], tmp_path / "missing" / "p.csv")


def test_di_value_field_zero_level_inside_analytical_set(di_full, tmp_path):
    path = export_value_field(di_full["table"], 0, tmp_path / "v0.csv", di_full["partition"])
    q, v, _ = read_value_field(path)
    inside = analytical_di_safe_set(q[v > 0])
    far = distance_to_analytical_boundary(di_full["env"], q[v > 0]) > di_full["grid"].diagonal
    assert np.all(inside | ~far)


def test_trajectory_and_eval_exports(tmp_path, di_full, rng):
    rec = run_episode(di_full["env"], di_full["grid"], RandomPolicy(5), rng,
                      start_cells=safe_start_cells(di_full["partition"]), params=di_full["params"])
    path = export_trajectory(rec, tmp_path / "traj.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "t,q0,q1,u,r_task,r_safe,entered_unsafe" and len(lines) == rec.length + 1
    with pytest.raises(UsageError):
        export_trajectory(EpisodeRecord(0.0, False, 0), tmp_path / "x.csv")
    rows = [{"seed": 1, "episode": 0, "return": 0.5, "length": 101, "violated": 0, "interventions": 3}]
    assert write_eval_csv(rows, tmp_path / "e.csv").read_text() == \
        "seed,episode,return,length,violated,interventions\n1,0,0.5,101,0,3\n"
    log = [{"episode": 0, "return": -1.25, "violated": 1, "safety_buffer": 7}]
    assert write_train_log(log, tmp_path / "l.csv").read_text() == "episode,return,violated,safety_buffer\n0,-1.25,1,7\n"


def test_sweep_csv_schema(tmp_path, di_small):
    st = Stepper(di_small["env"], di_small["grid"], True, di_small["mdp"])
    res = threshold_sweep(st, di_small["table"], RandomPolicy(5), [1.0, 0.0],
                          safe_start_cells(di_small["partition"]), episodes=5, seeds=[0])
    lines = res.write_csv(tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "eps2,safety_rate,mean_return,std_return,intervention_rate"
    assert [l.split(",")[0] for l in lines[1:]] == ["0.0", "1.0"]
