"""Tabular Q-value safety filter with a time-dependent safety reward."""

from .core import ContractViolation, RegionLabel, TimedState, Transition, UsageError
from .envs import DiscreteMDP, DoubleIntegratorEnv, DubinsCarEnv, GridSpec, discretize, make_env
from .filter import FilterConfig, filter_action, safe_policy
from .reward import SafetyRewardParams, r_safe, v_bounds
from .solvers import LearnerConfig, TimedQTable, value_iteration_safe

__version__ = "0.1.0"
