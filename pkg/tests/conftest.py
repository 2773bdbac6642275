import numpy as np
import pytest

from qsafe.analysis import recoverability_oracle
from qsafe.envs import DiscreteMDP, DoubleIntegratorEnv, DubinsCarEnv, GridSpec
from qsafe.reward import SafetyRewardParams
from qsafe.solvers import value_iteration_safe


@pytest.fixture(scope="session")
def di():
    return DoubleIntegratorEnv()


@pytest.fixture(scope="session")
def dubins():
    return DubinsCarEnv()


@pytest.fixture(scope="session")
def di_small(di):
    """21x21 double-integrator grid with its MDP, params, DP table and oracle."""
    lo, hi = di.absolute_bounds
    grid = GridSpec(tuple(lo), tuple(hi), (21, 21), (False, False))
    mdp = DiscreteMDP(di, grid)
    params = SafetyRewardParams.for_grid(di, grid, 0.95)
    table = value_iteration_safe(di, grid, params, mdp)
    partition = recoverability_oracle(di, grid, mdp=mdp)
    return {"env": di, "grid": grid, "mdp": mdp, "params": params, "table": table, "partition": partition}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def di_full(di):
    """Default double-integrator grid with its MDP, params, DP table and oracle."""
    grid = di.default_grid()
    mdp = DiscreteMDP(di, grid)
    params = SafetyRewardParams.for_grid(di, grid, 0.95)
    table = value_iteration_safe(di, grid, params, mdp)
    partition = recoverability_oracle(di, grid, mdp=mdp)
    return {"env": di, "grid": grid, "mdp": mdp, "params": params, "table": table, "partition": partition}
