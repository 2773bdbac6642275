"""Command-line entry point: ``qsafe <command> [options]``.

Files land in ``--out`` (default ``out``):

    solve   -> safe_dp.qtab
    oracle  -> partition.csv
    train   -> q_task.qtab, q_safe.qtab, train_log.csv  (or q_penalty.qtab, train_log_penalty.csv)
    eval    -> eval.csv
    sweep   -> sweep.csv
    export  -> value_t<t>.csv, partition.csv or trajectory.csv

Exit codes: 0 success, 1 property check failed, 2 usage error, 3 contract violation.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .analysis import (check_properties, evaluate, export_partition, export_trajectory, export_value_field,
                       recoverability_oracle, safe_start_cells, summarize, threshold_sweep, write_eval_csv,
                       write_train_log)
from .config import ENV_CLASSES, RunConfig, load_config
from .core import ContractViolation, UsageError
from .envs import DiscreteMDP
from .solvers import TimedQTable, value_iteration_safe
from .training import Stepper, dual_train, make_policy, run_episode

POLICIES = ("cotrained", "random", "scripted", "penalty", "adversarial")
TASK_TABLES = {"cotrained": "q_task.qtab", "penalty": "q_penalty.qtab"}


class Context:
    """Config-derived objects shared by the subcommands."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.env = cfg.build_env()
        self.grid = cfg.build_grid(self.env)
        self.params = cfg.safety_params(self.env, self.grid)
        self._mdp = None
        self._partition = None

    @property
    def mdp(self) -> DiscreteMDP:
        if self._mdp is None:
            self._mdp = DiscreteMDP(self.env, self.grid)
        return self._mdp

    @property
    def partition(self):
        if self._partition is None:
            self._partition = recoverability_oracle(self.env, self.grid, self.params.T, mdp=self.mdp)
        return self._partition

    def starts(self) -> np.ndarray:
        return safe_start_cells(self.partition)

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def load_table(self, path) -> TimedQTable:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"table file {path} not found")
        table = TimedQTable.load(path)
        if table.grid.to_dict() != self.grid.to_dict() or table.n_actions != self.env.n_actions:
            raise UsageError(f"{path} was built on a different grid or action set")
        if table.env_name and table.env_name != self.env.name:
            raise UsageError(f"{path} belongs to environment {table.env_name!r}, not {self.env.name!r}")
        if table.T != self.params.T:
            raise UsageError(f"{path} has horizon {table.T}, config says {self.params.T}")
        return table


def _policy(ctx: Context, name: str, task_table: str | None):
    table = None
    if name in TASK_TABLES:
        table = ctx.load_table(task_table or ctx.out / TASK_TABLES[name])
    return make_policy(name, ctx.env, table)


def _safe_table(ctx: Context, args) -> TimedQTable:
    return ctx.load_table(args.safe_table or ctx.out / "q_safe.qtab")


def cmd_solve(ctx: Context, args) -> int:
    t0 = time.perf_counter()
    table = value_iteration_safe(ctx.env, ctx.grid, ctx.params, ctx.mdp)
    path = table.save(ctx.path("safe_dp.qtab"))
    V0 = table.V(0)
    print(f"value iteration on {ctx.grid.n_cells} cells x {table.T + 1} steps "
          f"in {time.perf_counter() - t0:.2f}s; V_0 > 0 on {int(np.sum(V0 > 0))} cells")
    print(f"wrote {path}")
    return 0


def cmd_oracle(ctx: Context, args) -> int:
    path = export_partition(ctx.partition, ctx.path("partition.csv"))
    counts = ctx.partition.counts()
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"wrote {path}")
    return 0


def cmd_train(ctx: Context, args) -> int:
    learner = ctx.cfg.learner()
    if args.episodes is not None:
        learner = type(learner)(**{**learner.__dict__, "episodes": args.episodes})
    penalty = ctx.cfg.penalty(ctx.params) if args.penalty else 0.0
    t0 = time.perf_counter()
    res = dual_train(ctx.env, ctx.grid, ctx.params, learner, ctx.starts(), ctx.cfg.task(),
                     penalty=penalty, mdp=ctx.mdp)
    elapsed = time.perf_counter() - t0
    if args.penalty:
        paths = [res.Q_task.save(ctx.path("q_penalty.qtab")),
                 write_train_log(res.log, ctx.path("train_log_penalty.csv"))]
    else:
        paths = [res.Q_task.save(ctx.path("q_task.qtab")), res.Q_safe.save(ctx.path("q_safe.qtab")),
                 write_train_log(res.log, ctx.path("train_log.csv"))]
    viol = np.mean([r["violated"] for r in res.log]) if res.log else 0.0
    print(f"{learner.episodes} episodes in {elapsed:.1f}s; training violation rate {viol:.3f}; "
          f"safety buffer {len(res.safety_buffer)}")
    for p in paths:
        print(f"wrote {p}")
    return 0


def _eval_args(ctx: Context, args):
    episodes = args.episodes if args.episodes is not None else ctx.cfg.get("eval", "episodes")
    seeds = ctx.cfg.eval_seeds() if args.seeds is None else range(ctx.cfg.seed, ctx.cfg.seed + args.seeds)
    if episodes < 1 or len(seeds) < 1:
        raise UsageError("need at least one episode and one seed")
    return episodes, seeds


def cmd_eval(ctx: Context, args) -> int:
    episodes, seeds = _eval_args(ctx, args)
    policy = _policy(ctx, args.policy, args.task_table)
    Q_safe = _safe_table(ctx, args) if args.filter else None
    eps2 = args.eps2 if args.eps2 is not None else ctx.cfg.get("eval", "eps2")
    stepper = Stepper(ctx.env, ctx.grid, ctx.cfg.get("learner", "snap_to_grid"), ctx.mdp)
    rows = evaluate(stepper, policy, ctx.starts(), episodes, seeds, Q_safe, eps2, ctx.cfg.task())
    path = write_eval_csv(rows, ctx.path("eval.csv"))
    s = summarize(rows, ctx.params.T)
    tag = f"filtered eps2={eps2:g}" if args.filter else "unfiltered"
    print(f"{args.policy} ({tag}): safety_rate={s.safety_rate:.4f} mean_return={s.mean_return:.3f} "
          f"std_return={s.std_return:.3f} intervention_rate={s.intervention_rate:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_sweep(ctx: Context, args) -> int:
    episodes, seeds = _eval_args(ctx, args)
    policy = _policy(ctx, args.policy, args.task_table)
    Q_safe = _safe_table(ctx, args)
    eps2 = ([float(v) for v in args.eps2_list.replace(",", " ").split()] if args.eps2_list
            else ctx.cfg.eps2_list())
    stepper = Stepper(ctx.env, ctx.grid, ctx.cfg.get("learner", "snap_to_grid"), ctx.mdp)
    result = threshold_sweep(stepper, Q_safe, policy, eps2, ctx.starts(), episodes, seeds, ctx.cfg.task())
    path = result.write_csv(ctx.path("sweep.csv"))
    print("eps2  safety_rate  mean_return  intervention_rate")
    for r in result.rows:
        print(f"{r.eps2:<6g}{r.safety_rate:>11.4f}{r.mean_return:>13.3f}{r.intervention_rate:>19.4f}")
    print(f"wrote {path}")
    return 0


def cmd_check(ctx: Context, args) -> int:
    path = Path(args.table) if args.table else ctx.out / "safe_dp.qtab"
    table = ctx.load_table(path)
    report = check_properties(table, ctx.partition, ctx.params, all_t=not args.t0_only)
    print(report.summary())
    for v in report.violations[: args.show]:
        print(f"  {v}")
    if table.source != "dp":
        print("learned table: violations are diagnostics only")
        return 0
    return 0 if report.ok else 1


def cmd_export(ctx: Context, args) -> int:
    if args.what == "value":
        table = ctx.load_table(args.table or ctx.out / "safe_dp.qtab")
        path = export_value_field(table, args.t, ctx.path(f"value_t{args.t}.csv"), ctx.partition)
    elif args.what == "partition":
        path = export_partition(ctx.partition, ctx.path("partition.csv"))
    else:
        policy = _policy(ctx, args.policy, args.task_table)
        Q_safe = _safe_table(ctx, args) if args.filter else None
        eps2 = args.eps2 if args.eps2 is not None else ctx.cfg.get("eval", "eps2")
        rec = run_episode(ctx.env, ctx.grid, policy, np.random.default_rng(ctx.cfg.seed),
                          start_cells=ctx.starts(), Q_safe=Q_safe, eps2=eps2, params=ctx.params,
                          snap=ctx.cfg.get("learner", "snap_to_grid"), task_cfg=ctx.cfg.task())
        path = export_trajectory(rec, ctx.path("trajectory.csv"))
    print(f"wrote {path}")
    return 0


def _add_policy_args(p, with_filter=True):
    p.add_argument("--policy", choices=POLICIES, default="cotrained")
    p.add_argument("--task-table", default=None, help="task table for cotrained/penalty policies")
    p.add_argument("--safe-table", default=None, help="safety table (default <out>/q_safe.qtab)")
    if with_filter:
        p.add_argument("--filter", action="store_true", help="wrap the policy in the Q-value filter")
        p.add_argument("--eps2", type=float, default=None, help="filter threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsafe", description="Q-value safety filter toolkit")
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--seed", type=int, default=None, help="base seed (overrides [run] seed)")
    parser.add_argument("--env", choices=sorted(ENV_CLASSES), default=None)
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("solve", help="value iteration on the grid MDP")
    sub.add_parser("oracle", help="safe/irrecoverable/unsafe partition")

    p = sub.add_parser("train", help="co-train task and safety tables")
    p.add_argument("--episodes", type=int, default=None, help="override [learner] episodes")
    p.add_argument("--penalty", action="store_true", help="train the reward-penalty baseline instead")

    p = sub.add_parser("eval", help="evaluation episodes, one CSV row each")
    _add_policy_args(p)
    p.add_argument("--episodes", type=int, default=None, help="episodes per seed")
    p.add_argument("--seeds", type=int, default=None, help="number of seeds")

    p = sub.add_parser("sweep", help="filtered evaluation over a list of thresholds")
    _add_policy_args(p, with_filter=False)
    p.add_argument("--eps2-list", default=None, help="comma-separated thresholds")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seeds", type=int, default=None)

    p = sub.add_parser("check", help="value-bound and sign checks against the oracle")
    p.add_argument("--table", default=None, help="table file (default <out>/safe_dp.qtab)")
    p.add_argument("--t0-only", action="store_true", help="skip the sign check at t > 0")
    p.add_argument("--show", type=int, default=20, help="violations to print")

    p = sub.add_parser("export", help="CSV exports for plotting")
    p.add_argument("what", choices=("value", "partition", "trajectory"))
    p.add_argument("--table", default=None, help="table for the value export (default <out>/safe_dp.qtab)")
    p.add_argument("--t", type=int, default=0)
    _add_policy_args(p)
    return parser


COMMANDS = {"solve": cmd_solve, "oracle": cmd_oracle, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "check": cmd_check, "export": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise UsageError("--seed must be an unsigned 64-bit integer")
            cfg.set("run", "seed", args.seed)
        if args.env is not None:
            cfg.set("run", "env", args.env)
        ctx = Context(cfg, Path(args.out))
        return COMMANDS[args.command](ctx, args)
    except UsageError as exc:
        print(f"qsafe: error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"qsafe: contract violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
