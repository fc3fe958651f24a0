"""Forgetting, parameter displacement, analytic displacement bounds and
linear-path loss barriers.

Records are written as CSV (one row per method x seed x task) and the
aggregate as JSON; both carry ``SCHEMA_VERSION``. Column meanings are listed
in ``CSV_COLUMNS``/README.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidConfigError, NumericError
from .nn_core import ParamVector

SCHEMA_VERSION = "smmcl.records/1"
SUMMARY_SCHEMA_VERSION = "smmcl.summary/1"


def displacement(w_prev: ParamVector, w_curr: ParamVector, frozen: Iterable[str] = ()) -> float:
    """L2 distance over unfrozen segments (the norm, not its square)."""
    w_prev.check_layout(w_curr)
    diff = w_curr.values - w_prev.values
    frozen = list(frozen)
    if frozen:
        diff = np.where(w_prev.mask(frozen), 0.0, diff)
    return float(np.linalg.norm(diff))


def common_displacement(w_prev: ParamVector, w_curr: ParamVector) -> float:
    """Displacement over the segments both vectors share (e.g. before/after a
    head expansion)."""
    shared = [n for n in w_prev.names if w_curr.has(n)]
    return displacement(w_prev.restrict(shared), w_curr.restrict(shared))


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise InvalidConfigError(f"alpha must lie in (0, 1), got {alpha}")


def smm_bound(alpha: float, n_iter: int, step: float) -> tuple[float, float, float]:
    """Per-task displacement bounds for interpolated SGD at constant ``alpha``.

    Returns ``(recursion_bound, closed_form, asymptote)``:

    * ``recursion_bound = step * sum_{t=1..N} (1-alpha)^t`` is what unrolling
      ``d_t <= (1-alpha)(d_{t-1} + step)`` from ``d_0 = 0`` gives;
    * ``closed_form = step * (1 - (1-alpha)^N) / alpha`` is the commonly
      quoted closed form, larger by a factor ``1/(1-alpha)``;
    * ``asymptote = step / alpha`` bounds both for every N.
    """
    _check_alpha(alpha)
    if n_iter < 1 or step < 0:
        raise InvalidConfigError("need n_iter >= 1 and step >= 0")
    r = 1.0 - alpha
    # r (1 - r^N) / (1 - r), with expm1/log1p for accuracy near alpha -> 0 or 1
    tail = -math.expm1(n_iter * math.log(r))
    recursion = step * r * tail / alpha
    closed = step * tail / alpha
    return recursion, closed, step / alpha


def smm_schedule_bound(alphas: Sequence[float], step: float) -> float:
    """Recursion bound for a per-iteration ratio sequence:
    ``step * sum_t prod_{j>=t} (1 - alpha_j)``."""
    total = 0.0
    for a in alphas:
        total = (1.0 - a) * (total + step)
    return total


def imm_bound(alpha: float, n_iter: int, step: float) -> float:
    """Bound for fine-tune-then-average: ``step * (1 - alpha) * N``."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return step * (1.0 - alpha) * n_iter


def path_points(w_a: ParamVector, w_b: ParamVector, grid: int) -> list[ParamVector]:
    """``grid`` evenly spaced points on the segment from ``w_a`` to ``w_b``.

    Point i is ``((G-1-i) w_a + i w_b) / (G-1)``, which makes the path
    bit-symmetric under swapping the endpoints; the endpoints themselves are
    copied exactly.
    """
    w_a.check_layout(w_b)
    if grid < 3:
        raise InvalidConfigError("barrier grid needs at least 3 points")
    g = grid - 1
    inner = [w_a.with_values(((g - i) * w_a.values + i * w_b.values) / g) for i in range(1, g)]
    return [w_a.copy()] + inner + [w_b.copy()]


def loss_barrier(w_a: ParamVector, w_b: ParamVector, loss_fn: Callable[[ParamVector], float],
                 grid: int = 25, return_path: bool = False):
    """Max loss on the linear path minus the larger endpoint loss."""
    losses = []
    for i, w in enumerate(path_points(w_a, w_b, grid)):
        value = float(loss_fn(w))
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at grid index {i}")
        losses.append(value)
    barrier = max(losses) - max(losses[0], losses[-1])
    return (barrier, losses) if return_path else barrier


# --- run records -------------------------------------------------------------


@dataclass
class TaskRecord:
    task: int
    n_classes: int
    acc_base: float
    acc_tasks: list[float]  # accuracy on each novel task seen so far, in order
    acc_current: float
    acc_novel: float  # mean of acc_tasks (nan before the first novel task)
    acc_old: float  # pooled accuracy on classes learned before this task
    displacement: float = 0.0  # ||w^{n-1} - w^n|| over shared segments
    ex_displacement: float = 0.0  # ||w^n - knowledge base||
    step_max: float = 0.0  # max over iterations of lr * ||grad||
    n_iter: int = 0
    alpha_final: float = 0.0
    bound_schedule: float = 0.0  # recursion bound for the actual ratio sequence
    bound_recursion: float = float("nan")  # constant-ratio forms; nan if ratio varied
    bound_closed: float = float("nan")
    bound_asymptote: float = float("nan")
    imm_bound: float = float("nan")
    barrier: float = float("nan")
    diverged: bool = False


@dataclass
class RunRecord:
    method: str
    seed: int
    tasks: list[TaskRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    error: str | None = None

    def accuracy_matrix(self) -> list[list[float]]:
        """Row i: accuracies on [base, novel task 1, ..., novel task i]."""
        return [[t.acc_base] + list(t.acc_tasks) for t in self.tasks]

    def to_dict(self) -> dict:
        return asdict(self)


CSV_COLUMNS = [
    "schema", "method", "seed", "task", "n_classes", "acc_base", "acc_novel", "acc_current", "acc_old",
    "acc_tasks", "displacement", "ex_displacement", "step_max", "n_iter", "alpha_final",
    "bound_schedule", "bound_recursion", "bound_closed", "bound_asymptote", "imm_bound", "barrier",
    "diverged",
]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ";".join(repr(float(x)) for x in v)
    return str(v)


def records_to_csv(records: Iterable[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        for t in rec.tasks:
            row = {"schema": SCHEMA_VERSION, "method": rec.method, "seed": rec.seed, **asdict(t)}
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[RunRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out: dict[tuple[str, int], RunRecord] = {}
    float_cols = [c for c in CSV_COLUMNS if c not in ("schema", "method", "seed", "task", "n_classes",
                                                      "acc_tasks", "n_iter", "diverged")]
    for row in rows:
        if row["schema"] != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {row['schema']!r}")
        key = (row["method"], int(row["seed"]))
        rec = out.setdefault(key, RunRecord(row["method"], int(row["seed"])))
        rec.tasks.append(TaskRecord(
            task=int(row["task"]), n_classes=int(row["n_classes"]),
            acc_tasks=[float(v) for v in row["acc_tasks"].split(";") if v],
            n_iter=int(row["n_iter"]), diverged=row["diverged"] == "1",
            **{c: float(row[c]) for c in float_cols},
        ))
    return list(out.values())


def forgetting(record: RunRecord) -> float:
    """Mean over past tasks of (best accuracy before the last task) - (final accuracy).

    Past tasks include the base phase. A record with a single evaluated task
    has nothing to forget and scores 0.
    """
    mat = record.accuracy_matrix()
    if len(mat) <= 1:
        return 0.0
    final = mat[-1]
    drops = []
    for j in range(len(final) - 1):
        best = max(row[j] for row in mat[:-1] if len(row) > j)
        drops.append(max(best - final[j], 0.0))
    return float(np.mean(drops)) if drops else 0.0


def _mean_std(values: Sequence[float]) -> dict:
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def summarize(records: Iterable[RunRecord]) -> dict:
    """Per-method seed statistics of the final model plus displacement trajectory."""
    by_method: dict[str, list[RunRecord]] = {}
    for rec in records:
        by_method.setdefault(rec.method, []).append(rec)
    methods = {}
    for name, recs in by_method.items():
        done = [r for r in recs if r.tasks and r.error is None]
        finals = [r.tasks[-1] for r in done]
        n_tasks = max((len(r.tasks) for r in done), default=0)
        trajectory = []
        for i in range(n_tasks):
            vals = [r.tasks[i].displacement for r in done if len(r.tasks) > i]
            trajectory.append(float(np.mean(vals)))
        barriers = [t.barrier for r in done for t in r.tasks[1:]]
        methods[name] = {
            "n_runs": len(recs),
            "n_failed": len(recs) - len(done),
            "final_base_acc": _mean_std([t.acc_base for t in finals]),
            "final_novel_acc": _mean_std([t.acc_novel for t in finals]),
            "final_old_acc": _mean_std([t.acc_old for t in finals]),
            "forgetting": _mean_std([forgetting(r) for r in done]),
            "barrier": _mean_std(barriers),
            "displacement_trajectory": trajectory,
        }
    return {"schema": SUMMARY_SCHEMA_VERSION, "methods": methods}


def paired_differences(records: Iterable[RunRecord], better: str, worse: str, metric: str) -> list[float]:
    """Per-seed ``metric(better) - metric(worse)`` of the final task, seeds matched."""
    final = {(r.method, r.seed): r.tasks[-1] for r in records if r.tasks and r.error is None}
    seeds = sorted({s for (m, s) in final if m == better} & {s for (m, s) in final if m == worse})
    return [getattr(final[(better, s)], metric) - getattr(final[(worse, s)], metric) for s in seeds]
