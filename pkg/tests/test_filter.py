import numpy as np
import pytest

from qsafe.core import TimedState, UsageError
from qsafe.envs import GridSpec
from qsafe.filter import FilterConfig, filter_action, filter_batch, safe_policy
from qsafe.solvers import TimedQTable


def _table(rows):
    rows = np.asarray(rows, dtype=float)
    grid = GridSpec((0.0,), (1.0,), (rows.shape[0],), (False,))
    return TimedQTable(rows[None], grid, 0.9)


ROW = _table([[-3, 4, 1], [0.5, 0.2, 0.2]])


@pytest.mark.parametrize("u,eps2,expected", [(1, 0.0, (1, False)), (0, 0.0, (1, True)), (2, 0.0, (2, False)),
                                             (2, 2.0, (1, True))])
def test_filter_action_examples(u, eps2, expected):
    assert filter_action(ROW, (0, 0), u, FilterConfig(eps2)) == expected


def test_equality_intervenes():
    assert filter_action(ROW, (0, 0), 2, FilterConfig(1.0)) == (1, True)


def test_filter_reads_timed_state():
    x = TimedState.make(40, [0.0])  # t beyond the table is clamped
    assert filter_action(ROW, x, 0, FilterConfig()) == (1, True)


def test_safe_policy_examples():
    tab = _table([[0.5, 0.2], [1, 1]])
    assert safe_policy(tab, (0, 0)) == 0
    assert safe_policy(tab, (0, 1)) == 0


def test_infinite_thresholds():
    assert filter_action(ROW, (0, 0), 0, FilterConfig(-np.inf)) == (0, False)
    assert filter_action(ROW, (0, 0), 1, FilterConfig(np.inf)) == (1, True)


def test_filter_config_validation():
    with pytest.raises(UsageError):
        FilterConfig(float("nan"))
    with pytest.raises(UsageError):
        FilterConfig(0.0, tie_break="random")


def test_filter_batch_matches_scalar(rng):
    tab = TimedQTable(rng.normal(size=(3, 10, 4)), GridSpec((0.0,), (1.0,), (10,), (False,)), 0.9)
    cells = rng.integers(0, 10, 50)
    u = rng.integers(0, 4, 50)
    t = rng.integers(0, 5, 50)
    a, hit = filter_batch(tab, t, cells, u, 0.3)
    for i in range(50):
        assert (a[i], hit[i]) == filter_action(tab, (t[i], cells[i]), u[i], FilterConfig(0.3))


def test_nested_conservatism_exhaustive(di_small):
    tab = di_small["table"]
    levels = np.linspace(-5, 19, 25)
    passes = [tab.values > e for e in levels]
    for lo, hi in zip(passes, passes[1:]):
        assert not np.any(hi & ~lo)


def test_minimal_interference(di_small):
    """When every task action clears the threshold the filter is a no-op."""
    tab = di_small["table"]
    cells = np.flatnonzero(tab.V(0) > 0)
    best = tab.values[0, cells].argmax(axis=-1)
    a, hit = filter_batch(tab, 0, cells, best, 0.0)
    np.testing.assert_array_equal(a, best)
    assert not hit.any()
