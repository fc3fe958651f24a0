"""Continual few-shot learners built on the cosine classifier.

Every incremental task runs a classifier phase (imprint the new rows, then
train only those rows on frozen features; the result is the task's
*knowledge base*) and, for the dynamic strategies, a representation phase
in which the extractor is unfrozen:

* ``naive``   plain SGD in the representation phase;
* ``imm``     the naive phase followed by one end-of-task average with the
  knowledge base;
* ``smm``     after every SGD step the weights are pulled back towards the
  knowledge base by a ratio that ramps up over epochs and tasks, plus an
  L2 anchor to the knowledge base;
* ``smm+cr``  additionally replays stored old-class embeddings through the
  cross-entropy;
* ``smm+cr+sep`` adds the inter-task separation hinge;
* ``static``  the classifier phase only; the extractor never moves;
* ``dbf``     runs ``static`` and ``smm+cr+sep`` side by side and takes
  base-class scores from the first and novel-class scores from the second.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .embedding_store import EmbeddingStore, collect, imprint
from .errors import (DivergenceError, InvalidConfigError, InvalidInputError, NumericError,
                     StreamIntegrityError, StructuralError)
from .losses import LossSpec, MarginConfig, cross_entropy_batch
from .metrics import (RunRecord, TaskRecord, common_displacement, displacement, imm_bound,
                      loss_barrier, smm_bound, smm_schedule_bound)
from .nn_core import Batch, CosineClassifierNet, Gradients, ParamVector, apply_step, backward
from .taskgen import Task, TaskStream


@dataclass(frozen=True)
class AlphaSchedule:
    """Interpolation ratio ``(r_step * n + r_base) * q / n_epoch``, clamped."""

    r_base: float = 0.3
    r_step: float = 0.02
    n_epoch: int = 20
    lo: float = 0.0
    hi: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.lo <= self.hi < 1.0:
            raise InvalidConfigError(f"alpha clamp must satisfy 0 <= lo <= hi < 1, got [{self.lo}, {self.hi}]")
        if self.n_epoch < 1:
            raise InvalidConfigError("n_epoch must be a positive integer")
        if self.r_base < 0 or self.r_step < 0:
            raise InvalidConfigError("r_base and r_step must be non-negative")


def alpha(n: int, q: int, sched: AlphaSchedule) -> float:
    if n < 1 or not 0 <= q <= sched.n_epoch:
        raise InvalidInputError(f"need task n >= 1 and 0 <= epoch q <= {sched.n_epoch}")
    raw = (sched.r_step * n + sched.r_base) * q / sched.n_epoch
    return min(max(raw, sched.lo), sched.hi)


def interpolate(w_b: ParamVector, w_t: ParamVector, a: float, frozen: Sequence[str] = ()) -> ParamVector:
    """``a * w_b + (1 - a) * w_t``; frozen segments are copied from ``w_b``.

    Evaluated as ``w_t + a * (w_b - w_t)`` so that equal inputs come back
    bit-identical for every ``a``.
    """
    w_b.check_layout(w_t)
    if not 0.0 <= a <= 1.0:
        raise InvalidConfigError(f"interpolation ratio must lie in [0, 1], got {a}")
    if a == 0.0:
        values = w_t.values.copy()
    elif a == 1.0:
        values = w_b.values.copy()
    else:
        values = w_t.values + a * (w_b.values - w_t.values)
    if frozen:
        keep = w_b.mask(frozen)
        values[keep] = w_b.values[keep]
    return ParamVector(values, w_b.layout)


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int | None = 64
    scale: float = 16.0
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.1
    pretrain_batch: int = 64
    fc_epochs: int = 10
    fc_lr: float = 0.1
    ex_lr: float = 0.05
    batch_size: int = 10
    alpha: AlphaSchedule = AlphaSchedule()
    margin: MarginConfig = MarginConfig()
    imm_alpha: float = 0.5
    capacity: int = 20
    base_representatives: bool = True
    barrier_grid: int = 25
    measure_barrier: bool = True
    fusion: str = "logits"

    def __post_init__(self):
        if not 0.0 <= self.imm_alpha <= 1.0:
            raise InvalidConfigError("imm_alpha must lie in [0, 1]")
        for name in ("pretrain_lr", "fc_lr", "ex_lr", "scale"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"{name} must be positive")
        for name in ("pretrain_epochs", "fc_epochs", "batch_size", "pretrain_batch", "capacity"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be at least 1")
        if self.barrier_grid < 3:
            raise InvalidConfigError("barrier_grid must be at least 3")


@dataclass(frozen=True)
class StrategySpec:
    name: str
    dynamic: bool = True
    interpolate: bool = False
    anchor: bool = False
    replay: bool = False
    margin: bool = False
    merge: bool = False
    dbf: bool = False

    @property
    def uses_store(self) -> bool:
        return self.replay or self.margin


STRATEGIES = {
    "naive": StrategySpec("naive"),
    "static": StrategySpec("static", dynamic=False),
    "imm": StrategySpec("imm", merge=True),
    "smm": StrategySpec("smm", interpolate=True, anchor=True),
    "smm+cr": StrategySpec("smm+cr", interpolate=True, anchor=True, replay=True),
    "smm+cr+sep": StrategySpec("smm+cr+sep", interpolate=True, anchor=True, replay=True, margin=True),
    "dbf": StrategySpec("dbf", interpolate=True, anchor=True, replay=True, margin=True, dbf=True),
}
ALIASES = {"smm+margin": "smm+cr+sep", "dbf+smm+cr+sep": "dbf", "frcn-ft": "naive", "tfa": "static"}


def get_strategy(name: str) -> StrategySpec:
    key = ALIASES.get(name.lower(), name.lower())
    if key not in STRATEGIES:
        raise InvalidConfigError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}")
    return STRATEGIES[key]


@dataclass
class KnowledgeBase:
    params: ParamVector
    task_index: int


@dataclass
class StrategyState:
    net: CosineClassifierNet
    task_index: int = 0
    knowledge_base: KnowledgeBase | None = None
    store: EmbeddingStore | None = None
    base_classes: tuple[int, ...] = ()
    step_log: list[float] = field(default_factory=list)  # lr * ||grad|| per iteration
    alpha_log: list[float] = field(default_factory=list)
    displacement_log: list[float] = field(default_factory=list)  # ||w_t - w_b|| per iteration


def _minibatches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def pretrain(base: Task, cfg: TrainConfig, rng: np.random.Generator) -> CosineClassifierNet:
    """Train extractor and base-class rows from scratch on the base phase."""
    net = CosineClassifierNet.create(base.x_train.shape[1], cfg.hidden, cfg.embed_dim, scale=cfg.scale, rng=rng)
    rows = rng.normal(size=(len(base.classes), net.embed_dim))
    net = net.add_classes(base.classes, rows / np.linalg.norm(rows, axis=1, keepdims=True))
    spec = LossSpec("ce")
    for _ in range(cfg.pretrain_epochs):
        for idx in _minibatches(len(base.x_train), cfg.pretrain_batch, rng):
            _, g, _ = backward(net, Batch(base.x_train[idx], base.y_train[idx]), spec)
            net = net.with_params(apply_step(net.params, g, cfg.pretrain_lr))
    return net


def init_state(net: CosineClassifierNet, base: Task, cfg: TrainConfig, strategy: StrategySpec,
               rng: np.random.Generator) -> StrategyState:
    store = None
    if strategy.uses_store:
        store = EmbeddingStore(net.embed_dim, cfg.capacity)
        if cfg.base_representatives:
            store.finalize(collect(net, base.x_train, base.y_train, cfg.capacity, 0, rng))
    return StrategyState(net=net, store=store, base_classes=tuple(base.classes))


def phase_fc(state: StrategyState, task: Task, cfg: TrainConfig, rng: np.random.Generator) -> KnowledgeBase:
    """Imprint new rows, train only them with cross-entropy on frozen
    features, and record the result as the task's knowledge base."""
    net = state.net
    clash = set(task.classes) & set(net.class_ids)
    if clash or len(set(task.classes)) != len(task.classes):
        raise StreamIntegrityError(f"task {task.index} reuses class ids {sorted(clash) or task.classes}")
    emb = net.embed(task.x_train)
    rows = [imprint(emb[task.y_train == c]) for c in task.classes]
    net = net.add_classes(task.classes, np.array(rows))
    frozen = net.extractor_names + net.head_names([c for c in net.class_ids if c not in task.classes])
    spec = LossSpec("ce")
    for _ in range(cfg.fc_epochs):
        for idx in _minibatches(len(task.x_train), cfg.batch_size, rng):
            _, g, _ = backward(net, Batch(task.x_train[idx], task.y_train[idx]), spec, frozen)
            net = net.with_params(apply_step(net.params, g, cfg.fc_lr))
    state.net = net
    state.task_index = task.index
    state.knowledge_base = KnowledgeBase(net.params.copy(), task.index)
    return state.knowledge_base


def phase_ex_step(state: StrategyState, batch: Batch, lr: float, a: float, spec: LossSpec,
                  frozen: Sequence[str] = ()) -> StrategyState:
    """One SGD step on the total loss, then interpolation towards the knowledge base.

    Head rows are not renormalized here: the forward pass normalizes them
    anyway, and keeping the update affine is what makes the displacement
    recursion hold exactly.
    """
    if state.knowledge_base is None:
        raise StructuralError("representation phase needs a finalized knowledge base")
    it = len(state.step_log)
    try:
        loss, g, _ = backward(state.net, batch, spec, frozen)
    except NumericError as exc:
        raise DivergenceError(it, str(exc)) from exc
    if not (np.isfinite(loss) and np.all(np.isfinite(g.values))):
        raise DivergenceError(it)
    stepped = apply_step(state.net.params, g, lr, renormalize=False)
    kb = state.knowledge_base.params
    new = interpolate(kb, stepped, a, frozen)
    state.net = state.net.with_params(new)
    state.step_log.append(lr * g.norm())
    state.alpha_log.append(a)
    state.displacement_log.append(displacement(kb, new))
    return state


def phase_ex(state: StrategyState, task: Task, cfg: TrainConfig, strategy: StrategySpec,
             rng: np.random.Generator, sample_rng: np.random.Generator) -> None:
    net = state.net
    kb = state.knowledge_base.params
    frozen = net.head_names([c for c in net.class_ids if c not in task.classes])
    margin = replace(cfg.margin,
                     lambda_margin=cfg.margin.lambda_margin if strategy.margin else 0.0,
                     lambda_reg=cfg.margin.lambda_reg if strategy.anchor else 0.0)
    spec = LossSpec("total", margin, kb if strategy.anchor else None, strategy.replay)
    per_class = int(min(np.sum(task.y_train == c) for c in task.classes))
    store = state.store if strategy.uses_store else None
    old = frozenset(store.class_ids) if store is not None else frozenset()
    for q in range(cfg.alpha.n_epoch):
        a = alpha(task.index, q, cfg.alpha) if strategy.interpolate else 0.0
        for idx in _minibatches(len(task.x_train), cfg.batch_size, rng):
            if store is not None and len(store):
                s_x, s_y = store.sample_old(per_class, sample_rng)
            else:
                s_x = s_y = None
            batch = Batch(task.x_train[idx], task.y_train[idx], s_x, s_y,
                          frozenset(task.classes), old)
            phase_ex_step(state, batch, cfg.ex_lr, a, spec, frozen)


def _task_metrics(state: StrategyState, n_iter: int, strategy: StrategySpec, cfg: TrainConfig) -> dict:
    steps = state.step_log[-n_iter:] if n_iter else []
    alphas = state.alpha_log[-n_iter:] if n_iter else []
    s = max(steps, default=0.0)
    out = {"step_max": s, "n_iter": n_iter, "alpha_final": alphas[-1] if alphas else 0.0,
           "bound_schedule": smm_schedule_bound(alphas, s)}
    if alphas and all(a == alphas[0] for a in alphas) and 0.0 < alphas[0] < 1.0:
        out["bound_recursion"], out["bound_closed"], out["bound_asymptote"] = smm_bound(alphas[0], n_iter, s)
    if strategy.merge:
        out["imm_bound"] = imm_bound(cfg.imm_alpha, n_iter, s)
    return out


def run_task(state: StrategyState, task: Task, cfg: TrainConfig, strategy: StrategySpec,
             rng: np.random.Generator, sample_rng: np.random.Generator) -> tuple[StrategyState, dict]:
    """Learn one incremental task; returns the state and per-task measurements."""
    prev = state.net.params
    kb = phase_fc(state, task, cfg, rng)
    n_before = len(state.step_log)
    if strategy.dynamic:
        phase_ex(state, task, cfg, strategy, rng, sample_rng)
    n_iter = len(state.step_log) - n_before
    info = _task_metrics(state, n_iter, strategy, cfg)
    info["ex_displacement"] = displacement(kb.params, state.net.params)
    if strategy.merge:
        state.net = state.net.with_params(interpolate(kb.params, state.net.params, cfg.imm_alpha))
    info["displacement"] = common_displacement(prev, state.net.params)
    if strategy.uses_store:
        state.store.finalize(collect(state.net, task.x_train, task.y_train, cfg.capacity, task.index, sample_rng))
    return state, info


def run_task_smm(state, task, cfg, rng, sample_rng, strategy: str = "smm"):
    return run_task(state, task, cfg, get_strategy(strategy), rng, sample_rng)


def run_task_imm(state, task, cfg, rng, sample_rng):
    return run_task(state, task, cfg, STRATEGIES["imm"], rng, sample_rng)


def run_task_static(state, task, cfg, rng, sample_rng):
    return run_task(state, task, cfg, STRATEGIES["static"], rng, sample_rng)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def dbf_scores(static_net: CosineClassifierNet, dynamic_net: CosineClassifierNet, x,
               base_classes: Sequence[int], fusion: str = "logits") -> np.ndarray:
    """Scores over all classes: base columns from the static branch, the rest
    from the dynamic branch, in the shared class order.

    ``fusion="logits"`` slices the scaled cosines directly; ``"softmax"``
    slices each branch's class-probability vector instead.
    """
    if fusion not in ("logits", "softmax"):
        raise InvalidConfigError(f"unknown fusion {fusion!r}")
    if static_net.class_ids != dynamic_net.class_ids:
        raise StructuralError("branches disagree on class bookkeeping")
    base = np.isin(np.asarray(static_net.class_ids), list(base_classes))
    if not base.any() and len(base_classes):
        raise StructuralError("base classes missing from the head")
    x = np.atleast_2d(x)
    s = static_net.forward(x)[1]
    if base.all():
        return s if fusion == "logits" else _softmax(s)
    d = dynamic_net.forward(x)[1]
    if fusion == "softmax":
        s, d = _softmax(s), _softmax(d)
    return np.where(base[None, :], s, d)


def dbf_predict(static_net, dynamic_net, x, base_classes, fusion: str = "logits") -> np.ndarray:
    scores = dbf_scores(static_net, dynamic_net, x, base_classes, fusion)
    return np.asarray(static_net.class_ids)[np.argmax(scores, axis=1)]


def _accuracy(predict: Callable, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(x) == y))


def evaluate(predict: Callable, stream: TaskStream, upto: int) -> dict:
    """Final-model accuracies after task ``upto`` over every seen class."""
    tasks = stream.all_tasks()[: upto + 1]
    preds = {t.index: predict(t.x_test) for t in tasks}
    acc = {i: float(np.mean(preds[i] == t.y_test)) for i, t in zip(preds, tasks)}
    old_hits = [preds[t.index] == t.y_test for t in tasks[:-1]]
    novel = [acc[t.index] for t in tasks[1:]]
    return {
        "acc_base": acc[0],
        "acc_tasks": novel,
        "acc_current": acc[upto],
        "acc_novel": float(np.mean(novel)) if novel else float("nan"),
        "acc_old": float(np.mean(np.concatenate(old_hits))) if old_hits else float("nan"),
    }


def eval_loss_fn(net: CosineClassifierNet, stream: TaskStream, upto: int) -> Callable[[ParamVector], float]:
    """Mean test cross-entropy over every class seen up to task ``upto``."""
    tasks = stream.all_tasks()[: upto + 1]
    x = np.vstack([t.x_test for t in tasks])
    y = np.concatenate([t.y_test for t in tasks])

    def loss(w: ParamVector) -> float:
        probe = net.with_params(w)
        return cross_entropy_batch(probe.forward(x)[1], probe.class_index(y))[0]

    return loss


@dataclass(frozen=True)
class Seeds:
    """Independent generators derived from one run seed."""

    init: np.random.Generator
    train: np.random.Generator
    sample: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Seeds":
        init, train, sample = np.random.SeedSequence(seed).spawn(3)
        return cls(np.random.default_rng(init), np.random.default_rng(train), np.random.default_rng(sample))


def run_stream(stream: TaskStream, strategy: str | StrategySpec, cfg: TrainConfig, seed: int,
               pretrained: CosineClassifierNet | None = None) -> RunRecord:
    """Full sequential run of one strategy; a divergence ends the run but is
    recorded rather than raised."""
    spec = get_strategy(strategy) if isinstance(strategy, str) else strategy
    seeds = Seeds.from_seed(seed)
    t0 = time.perf_counter()
    net = pretrained if pretrained is not None else pretrain(stream.base, cfg, seeds.init)
    record = RunRecord(spec.name, seed)

    if spec.dbf:
        dyn = init_state(net, stream.base, cfg, replace(spec, dbf=False), seeds.sample)
        static_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
        sta = init_state(net, stream.base, cfg, STRATEGIES["static"], static_rng)
        predict = lambda x: dbf_predict(sta.net, dyn.net, x, dyn.base_classes, cfg.fusion)  # noqa: E731
    else:
        dyn = init_state(net, stream.base, cfg, spec, seeds.sample)
        predict = lambda x: dyn.net.predict(x)  # noqa: E731

    record.tasks.append(TaskRecord(task=0, n_classes=net.n_classes, **evaluate(predict, stream, 0)))
    for task in stream.tasks:
        try:
            prev = dyn.net
            dyn, info = run_task(dyn, task, cfg, replace(spec, dbf=False), seeds.train, seeds.sample)
            if spec.dbf:
                sta, _ = run_task(sta, task, cfg, STRATEGIES["static"], static_rng, static_rng)
            if cfg.measure_barrier:
                start = dyn.knowledge_base.params
                info["barrier"] = loss_barrier(start, dyn.net.params, eval_loss_fn(dyn.net, stream, task.index),
                                               cfg.barrier_grid)
        except NumericError as exc:
            record.tasks.append(TaskRecord(task=task.index, n_classes=prev.n_classes, acc_base=float("nan"),
                                           acc_tasks=[], acc_current=float("nan"), acc_novel=float("nan"),
                                           acc_old=float("nan"), diverged=True))
            record.error = f"task {task.index}: {exc}"
            break
        record.tasks.append(TaskRecord(task=task.index, n_classes=dyn.net.n_classes,
                                       **evaluate(predict, stream, task.index), **info))
    record.wall_clock = time.perf_counter() - t0
    return record
