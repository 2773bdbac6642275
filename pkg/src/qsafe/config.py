"""INI run configuration.

Every key below has a default, so an empty or missing file is a valid
configuration. Unknown sections or keys are rejected.

    [run]
    env = double-integrator        ; or dubins
    seed = 0

    [safety]
    gamma = 0.95
    T = 100                        ; horizon; also sets the environment horizon

    [grid]
    counts =                       ; e.g. "81, 101"; empty means the environment default

    [double-integrator]            ; constructor keywords of DoubleIntegratorEnv
    pos_bound = 2.0
    ...

    [dubins]                       ; constructor keywords of DubinsCarEnv
    goal = 1.8, 1.8
    ...

    [learner]                      ; LearnerConfig fields (seed comes from [run])
    [task]                         ; TaskRewardConfig fields
    [eval]
    episodes = 100                 ; episodes per seed
    seeds = 10                     ; seeds seed .. seed + seeds - 1
    eps2 = 0.0
    eps2_list = 0, 2, 4, 6, 8, 10, 12, 14, 16, 18
    penalty =                      ; reward-penalty constant; empty means twice the safe value bound

Environment sections only apply to their own environment.
"""

from __future__ import annotations

import configparser
import dataclasses
import inspect
from dataclasses import dataclass, field
from pathlib import Path

from .core import EnvModel, UsageError
from .envs import DoubleIntegratorEnv, DubinsCarEnv, GridSpec, make_env
from .reward import SafetyRewardParams
from .solvers import LearnerConfig
from .training import TaskRewardConfig, penalty_constant

ENV_CLASSES = {"double-integrator": DoubleIntegratorEnv, "dubins": DubinsCarEnv}

RUN_DEFAULTS = {"env": "double-integrator", "seed": 0}
SAFETY_DEFAULTS = {"gamma": 0.95, "T": 100}
GRID_DEFAULTS = {"counts": ""}
EVAL_DEFAULTS = {"episodes": 100, "seeds": 10, "eps2": 0.0,
                 "eps2_list": "0, 2, 4, 6, 8, 10, 12, 14, 16, 18", "penalty": ""}


def _env_defaults(cls) -> dict:
    sig = inspect.signature(cls.__init__)
    return {k: p.default for k, p in sig.parameters.items() if k not in ("self", "horizon")}


def _dataclass_defaults(cls, skip=()) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls) if f.name not in skip}


def default_sections() -> dict[str, dict]:
    out = {
        "run": dict(RUN_DEFAULTS),
        "safety": dict(SAFETY_DEFAULTS),
        "grid": dict(GRID_DEFAULTS),
        "learner": _dataclass_defaults(LearnerConfig, skip=("seed",)),
        "task": _dataclass_defaults(TaskRewardConfig),
        "eval": dict(EVAL_DEFAULTS),
    }
    for name, cls in ENV_CLASSES.items():
        out[name] = _env_defaults(cls)
    return out


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _coerce(default, text: str, where: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            vals = _float_list(text)
            if len(vals) != len(default):
                raise ValueError(text)
            return tuple(vals)
        return text.strip()
    except ValueError:
        raise UsageError(f"bad value {text!r} for {where}") from None


@dataclass
class RunConfig:
    sections: dict[str, dict] = field(default_factory=default_sections)

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def set(self, section: str, key: str, value) -> None:
        if key not in self.sections.get(section, {}):
            raise UsageError(f"unknown config key [{section}] {key}")
        self.sections[section][key] = value

    @property
    def env_name(self) -> str:
        return self.get("run", "env")

    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    def build_env(self) -> EnvModel:
        name = self.env_name
        if name not in ENV_CLASSES:
            raise UsageError(f"unknown environment {name!r}")
        return make_env(name, horizon=self.get("safety", "T"), **self.sections[name])

    def build_grid(self, env: EnvModel) -> GridSpec:
        grid = env.default_grid()
        text = self.get("grid", "counts").strip()
        if not text:
            return grid
        counts = tuple(int(v) for v in _float_list(text))
        if len(counts) != env.dim:
            raise UsageError(f"grid counts need {env.dim} entries, got {len(counts)}")
        return GridSpec(grid.lower, grid.upper, counts, grid.periodic)

    def safety_params(self, env: EnvModel, grid: GridSpec) -> SafetyRewardParams:
        return SafetyRewardParams.for_grid(env, grid, self.get("safety", "gamma"), self.get("safety", "T"))

    def learner(self) -> LearnerConfig:
        return LearnerConfig(seed=self.seed, **self.sections["learner"])

    def task(self) -> TaskRewardConfig:
        return TaskRewardConfig(**self.sections["task"])

    def eval_seeds(self) -> range:
        return range(self.seed, self.seed + self.get("eval", "seeds"))

    def eps2_list(self) -> list[float]:
        vals = _float_list(self.get("eval", "eps2_list"))
        if not vals:
            raise UsageError("eps2_list must not be empty")
        return vals

    def penalty(self, params: SafetyRewardParams) -> float:
        text = self.get("eval", "penalty").strip()
        return penalty_constant(params) if not text else float(text)

    def to_ini(self) -> str:
        lines = []
        for sec, keys in self.sections.items():
            lines.append(f"[{sec}]")
            for k, v in keys.items():
                if isinstance(v, tuple):
                    v = ", ".join(repr(x) for x in v)
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def load_config(path=None) -> RunConfig:
    """Defaults overridden by ``path`` (if given). Unknown sections and keys are errors."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keep "T" case-sensitive
    try:
        with open(Path(path)) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    for sec in parser.sections():
        if sec not in cfg.sections:
            raise UsageError(f"unknown config section [{sec}]")
        for key, text in parser.items(sec, raw=True):
            if key not in cfg.sections[sec]:
                raise UsageError(f"unknown config key [{sec}] {key}")
            cfg.sections[sec][key] = _coerce(cfg.sections[sec][key], text, f"[{sec}] {key}")
    if parser.defaults():
        raise UsageError("keys outside a section are not allowed")
    return cfg
