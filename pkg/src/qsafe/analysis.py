"""Ground-truth partition, property checks, metrics, threshold sweeps and CSV exports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RegionLabel, UsageError
from .envs import DiscreteMDP, DoubleIntegratorEnv, GridSpec
from .reward import SafetyRewardParams, v_bounds
from .solvers import TimedQTable
from .training import EpisodeRecord, Policy, Stepper, TaskRewardConfig, rollout_batch, sample_starts


@dataclass
class PartitionMap:
    """Region labels per cell.

    ``labels`` holds the t=0 labels. ``avoid`` is the boolean table
    ``can_avoid[t, cell]`` for ``t`` in ``0..T+1`` from which labels at any
    other time follow.
    """

    grid: GridSpec
    labels: np.ndarray
    avoid: np.ndarray
    unsafe: np.ndarray

    @property
    def T(self) -> int:
        return self.avoid.shape[0] - 2

    def labels_at(self, t: int) -> np.ndarray:
        lab = np.full(self.grid.n_cells, RegionLabel.IRRECOVERABLE, dtype=np.int8)
        lab[self.avoid[t]] = RegionLabel.SAFE
        lab[self.unsafe] = RegionLabel.UNSAFE
        return lab

    def cells(self, label: RegionLabel) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def counts(self) -> dict[str, int]:
        return {lab.name.lower(): int(np.sum(self.labels == lab)) for lab in RegionLabel}


def recoverability_oracle(env, grid: GridSpec, T: int | None = None,
                          mdp: DiscreteMDP | None = None) -> PartitionMap:
    """Backward induction of ``can_avoid`` on the grid MDP.

    ``can_avoid(T+1, x)`` holds for every non-unsafe cell, and
    ``can_avoid(t, x)`` iff ``x`` is not unsafe and some action leads to a
    cell with ``can_avoid(t+1, .)``.
    """
    mdp = mdp if mdp is not None else DiscreteMDP(env, grid)
    T = env.horizon if T is None else T
    ok = ~mdp.unsafe
    avoid = np.empty((T + 2, mdp.n_cells), dtype=bool)
    avoid[T + 1] = ok
    for t in range(T, -1, -1):
        avoid[t] = ok & avoid[t + 1][mdp.next_cell].any(axis=1)
    pm = PartitionMap(grid, np.empty(0, dtype=np.int8), avoid, mdp.unsafe.copy())
    pm.labels = pm.labels_at(0)
    return pm


def safe_start_cells(partition: PartitionMap) -> np.ndarray:
    return partition.cells(RegionLabel.SAFE)


def analytical_di_safe_set(q, pos_bound: float = 2.0, vel_bound: float = 3.0, a_max: float = 2.0):
    """Continuous-time viability of the double integrator under maximal braking."""
    q = np.asarray(q, dtype=float)
    p, v = q[..., 0], q[..., 1]
    brake = v * v / (2.0 * a_max)
    ok = (np.abs(p) < pos_bound) & (np.abs(v) < vel_bound)
    ok &= (v <= 0) | (p + brake < pos_bound)
    ok &= (v >= 0) | (p - brake > -pos_bound)
    return bool(ok) if ok.ndim == 0 else ok


def distance_to_analytical_boundary(env: DoubleIntegratorEnv, points: np.ndarray, resolution: int = 4001) -> np.ndarray:
    """Euclidean distance in (p, v) from each point to the boundary of the analytical safe set.

    The boundary is the rectangle ``|p| <= pos_bound, |v| <= vel_bound`` cut
    by the two braking parabolas; it is sampled densely and the nearest
    sample is taken.
    """
    pb, vb, a = env.pos_bound, env.vel_bound, env.accel_max
    v = np.linspace(-vb, vb, resolution)
    right = np.stack([np.minimum(pb - np.maximum(v, 0) ** 2 / (2 * a), pb), v], -1)
    left = np.stack([np.maximum(-pb + np.minimum(v, 0) ** 2 / (2 * a), -pb), v], -1)
    p = np.linspace(-pb, pb, resolution)
    top = np.stack([p, np.full_like(p, vb)], -1)
    bottom = np.stack([p, np.full_like(p, -vb)], -1)
    boundary = np.concatenate([right, left, top, bottom])
    out = np.empty(len(points))
    for i in range(0, len(points), 256):
        chunk = points[i:i + 256]
        d2 = ((chunk[:, None, :] - boundary[None, :, :]) ** 2).sum(-1)
        out[i:i + 256] = np.sqrt(d2.min(axis=1))
    return out


# --- property checks ----------------------------------------------------------

@dataclass
class Violation:
    t: int
    cell: int
    coords: tuple[float, ...]
    label: str
    value: float
    rule: str

    def __str__(self) -> str:
        q = ", ".join(f"{v:.4g}" for v in self.coords)
        return f"{self.rule}: t={self.t} cell={self.cell} ({q}) {self.label} V={self.value:.6g}"


@dataclass
class PropertyReport:
    source: str
    checked: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        by_rule: dict[str, int] = {}
        for v in self.violations:
            by_rule[v.rule] = by_rule.get(v.rule, 0) + 1
        parts = ", ".join(f"{k}={n}" for k, n in sorted(by_rule.items())) or "none"
        return f"{self.source} table: {len(self.violations)} violations over {self.checked} checks ({parts})"


def check_properties(table: TimedQTable, partition: PartitionMap, params: SafetyRewardParams,
                     all_t: bool = True, tol: float = 1e-9) -> PropertyReport:
    """Check the value bounds at t=0 and the value sign at every t.

    At t=0: safe cells satisfy ``0 < V <= safe_upper``, irrecoverable cells
    ``irrec_lower <= V < 0``, unsafe cells ``V == unsafe_value`` (all up to
    ``tol``). For every t the labels at that time must agree with the sign
    of ``V_t``. For learned tables the same report is a diagnostic.
    """
    if table.grid != partition.grid:
        raise UsageError("Q-table and partition map were built on different grids")
    if table.T != partition.T:
        raise UsageError(f"Q-table horizon {table.T} differs from partition horizon {partition.T}")
    b = v_bounds(params.gamma, params.T)
    V0 = table.V(0)
    lab = partition.labels
    report = PropertyReport(table.source)
    centers = table.grid.centers

    def add(mask, t, V, rule, labels):
        for c in np.flatnonzero(mask):
            report.violations.append(Violation(
                t, int(c), tuple(float(v) for v in centers[c]),
                RegionLabel(int(labels[c])).name.lower(), float(V[c]), rule))

    safe = lab == RegionLabel.SAFE
    irrec = lab == RegionLabel.IRRECOVERABLE
    unsafe = lab == RegionLabel.UNSAFE
    add(safe & ~((V0 > 0) & (V0 <= b.safe_upper + tol)), 0, V0, "safe-bounds", lab)
    add(irrec & ~((V0 >= b.irrec_lower - tol) & (V0 < 0)), 0, V0, "irrecoverable-bounds", lab)
    add(unsafe & ~(np.abs(V0 - b.unsafe_value) <= tol), 0, V0, "unsafe-value", lab)
    report.checked = int(lab.size)
    if all_t:
        V = table.V()
        for t in range(table.T + 1):
            lt = partition.labels_at(t)
            s_t = lt == RegionLabel.SAFE
            i_t = lt == RegionLabel.IRRECOVERABLE
            add((s_t & ~(V[t] > 0)) | (i_t & ~(V[t] < 0)), t, V[t], "sign", lt)
            report.checked += int(np.sum(s_t | i_t))
    return report


def forward_invariance(table: TimedQTable, mdp: DiscreteMDP, policy: Policy, start_cells: np.ndarray,
                       eps2: float = 0.0, seed: int = 0) -> dict:
    """Filtered grid rollouts from every start cell.

    Counts unsafe entries and visits to states with ``V_t <= 0``.
    """
    stepper = Stepper(mdp.env, mdp.grid, snap=True, mdp=mdp)
    low_value = 0

    def watch(t, q, cells, actions, idx):
        nonlocal low_value
        low_value += int(np.sum(table.values[t, cells].max(axis=-1) <= 0))

    res = rollout_batch(stepper, policy, mdp.centers[start_cells], np.random.default_rng(seed),
                        Q_safe=table, eps2=eps2, on_step=watch)
    return {
        "episodes": len(start_cells),
        "unsafe_entries": int(res["violated"].sum()),
        "nonpositive_value_visits": low_value,
        "safety_rate": safety_rate_arrays(res["length"], res["violated"], table.T),
        "interventions": int(res["interventions"].sum()),
    }


# --- metrics -----------------------------------------------------------------

def safety_rate(records: list[EpisodeRecord], T: int) -> float:
    """Fraction of episodes that ran all ``T + 1`` steps without a violation."""
    if not records:
        raise UsageError("safety_rate needs at least one episode")
    good = sum(1 for r in records if r.length == T + 1 and not r.violated)
    return good / len(records)


def safety_rate_arrays(length, violated, T: int) -> float:
    length = np.asarray(length)
    if length.size == 0:
        raise UsageError("safety_rate needs at least one episode")
    return float(np.mean((length == T + 1) & ~np.asarray(violated)))


@dataclass
class SweepRow:
    eps2: float
    safety_rate: float
    mean_return: float
    std_return: float
    intervention_rate: float


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def write_csv(self, path) -> Path:
        return _write_rows(path, ["eps2", "safety_rate", "mean_return", "std_return", "intervention_rate"],
                           ([_fmt(r.eps2), _fmt(r.safety_rate), _fmt(r.mean_return), _fmt(r.std_return),
                             _fmt(r.intervention_rate)] for r in self.rows))


def evaluate(stepper: Stepper, policy: Policy, start_cells: np.ndarray, episodes: int, seeds,
             Q_safe: TimedQTable | None = None, eps2: float = 0.0,
             task_cfg: TaskRewardConfig = TaskRewardConfig()) -> list[dict]:
    """Seeded evaluation; one dict per episode (seed, episode, return, length, violated, interventions)."""
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        starts = sample_starts(stepper.grid, start_cells, episodes, rng)
        res = rollout_batch(stepper, policy, starts, rng, Q_safe=Q_safe, eps2=eps2, task_cfg=task_cfg)
        for i in range(episodes):
            rows.append({"seed": int(seed), "episode": i, "return": float(res["returns"][i]),
                         "length": int(res["length"][i]), "violated": int(res["violated"][i]),
                         "interventions": int(res["interventions"][i])})
    return rows


def summarize(rows: list[dict], T: int) -> SweepRow:
    ret = np.array([r["return"] for r in rows])
    length = np.array([r["length"] for r in rows])
    violated = np.array([r["violated"] for r in rows], dtype=bool)
    hits = np.array([r["interventions"] for r in rows])
    return SweepRow(math.nan, safety_rate_arrays(length, violated, T), float(ret.mean()),
                    float(ret.std()), float(hits.sum() / max(length.sum(), 1)))


def threshold_sweep(stepper: Stepper, Q_safe: TimedQTable, task_policy: Policy, eps2_list,
                    start_cells: np.ndarray, episodes: int = 100, seeds=range(10),
                    task_cfg: TaskRewardConfig = TaskRewardConfig()) -> SweepResult:
    """Filtered evaluation at each threshold; the same seeds (and hence the
    same start states) are reused for every threshold."""
    eps2_list = sorted(float(e) for e in eps2_list)
    if not eps2_list:
        raise UsageError("eps2 list must not be empty")
    rows = []
    for e in eps2_list:
        ev = evaluate(stepper, task_policy, start_cells, episodes, seeds, Q_safe, e, task_cfg)
        row = summarize(ev, Q_safe.T)
        row.eps2 = e
        rows.append(row)
    return SweepResult(rows)


def trend_ok(values, increasing: bool, max_inversions: int = 1, tol: float = 0.02) -> bool:
    """Monotone up to at most ``max_inversions`` adjacent reversals, each no larger than ``tol``."""
    d = np.diff(np.asarray(values, dtype=float))
    bad = -d if increasing else d
    inv = bad[bad > 0]
    return inv.size <= max_inversions and bool(np.all(inv <= tol))


# --- exports -----------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_rows(path, header, rows) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _coord_names(grid: GridSpec) -> list[str]:
    return [f"q{k}" for k in range(grid.ndim)]


def export_value_field(table: TimedQTable, t: int, path, partition: PartitionMap | None = None) -> Path:
    """One row per cell: ``cell, q0..qk, value, label``."""
    if not 0 <= t <= table.T:
        raise UsageError(f"t={t} outside 0..{table.T}")
    V = table.V(t)
    labels = partition.labels_at(t) if partition is not None else None
    c = table.grid.centers
    header = ["cell"] + _coord_names(table.grid) + ["value", "label"]
    rows = (
        [str(i)] + [_fmt(v) for v in c[i]] + [_fmt(V[i]),
                                             RegionLabel(int(labels[i])).name.lower() if labels is not None else ""]
        for i in range(table.grid.n_cells)
    )
    return _write_rows(path, header, rows)


def export_partition(partition: PartitionMap, path) -> Path:
    c = partition.grid.centers
    header = ["cell"] + _coord_names(partition.grid) + ["label"]
    rows = ([str(i)] + [_fmt(v) for v in c[i]] + [RegionLabel(int(partition.labels[i])).name.lower()]
            for i in range(partition.grid.n_cells))
    return _write_rows(path, header, rows)


def export_trajectory(record: EpisodeRecord, path) -> Path:
    if not record.trajectory:
        raise UsageError("episode record carries no trajectory")
    dim = len(record.trajectory[0].x.q)
    header = ["t"] + [f"q{k}" for k in range(dim)] + ["u", "r_task", "r_safe", "entered_unsafe"]
    rows = ([str(tr.x.t)] + [_fmt(v) for v in tr.x.q] + [str(tr.u), _fmt(tr.r_task), _fmt(tr.r_safe),
                                                         _fmt(tr.entered_unsafe)]
            for tr in record.trajectory)
    return _write_rows(path, header, rows)


def read_value_field(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    coords = [k for k in rows[0] if k.startswith("q")] if rows else []
    q = np.array([[float(r[k]) for k in coords] for r in rows])
    v = np.array([float(r["value"]) for r in rows])
    return q, v, [r["label"] for r in rows]


def write_eval_csv(rows: list[dict], path) -> Path:
    header = ["seed", "episode", "return", "length", "violated", "interventions"]
    return _write_rows(path, header, ([_fmt(r[k]) if k == "return" else str(r[k]) for k in header] for r in rows))


def write_train_log(log: list[dict], path) -> Path:
    header = ["episode", "return", "violated", "safety_buffer"]
    return _write_rows(path, header, ([str(r["episode"]), _fmt(r["return"]), str(r["violated"]),
                                       str(r["safety_buffer"])] for r in log))
