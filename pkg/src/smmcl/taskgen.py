"""Synthetic base/novel task streams made of Gaussian class blobs.

Stream file format (UTF-8 text, one example per row)::

    # smmcl-stream v1 protocol=<per_class|per_group> group_size=<g> seed=<s> d_in=<d>
    <split>,<task>,<label>,<x_0>,...,<x_{d-1}>

``split`` is one of ``train``/``test``; task 0 is the base phase. Floats use
``repr`` so save/load is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, ParseError, StreamIntegrityError

STREAM_MAGIC = "smmcl-stream v1"
PROTOCOLS = ("per_class", "per_group")


@dataclass(frozen=True)
class Task:
    index: int
    classes: tuple[int, ...]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Task):
            return NotImplemented
        return (self.index == other.index and self.classes == other.classes
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("x_train", "y_train", "x_test", "y_test")))


@dataclass(frozen=True)
class TaskStream:
    base: Task
    tasks: tuple[Task, ...]
    protocol: str = "per_class"
    group_size: int = 1
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def input_dim(self) -> int:
        return self.base.x_train.shape[1]

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def all_tasks(self) -> tuple[Task, ...]:
        return (self.base,) + self.tasks

    def seen_classes(self, n: int) -> list[int]:
        """Class set after task ``n`` (base is task 0)."""
        out = []
        for t in self.all_tasks()[: n + 1]:
            out.extend(t.classes)
        return out

    def validate(self) -> None:
        """Raise StreamIntegrityError on overlapping classes or bad k-shot counts."""
        seen: set[int] = set()
        for t in self.all_tasks():
            if seen & set(t.classes):
                raise StreamIntegrityError(f"task {t.index} repeats classes {sorted(seen & set(t.classes))}")
            seen |= set(t.classes)
            for y in (t.y_train, t.y_test):
                if not set(np.unique(y).tolist()) <= set(t.classes):
                    raise StreamIntegrityError(f"task {t.index} has labels outside its class set")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _split_groups(classes: list[int], protocol: str, group_size: int) -> list[list[int]]:
    if protocol == "per_class":
        return [[c] for c in classes]
    if protocol == "per_group":
        if group_size < 1 or len(classes) % group_size:
            raise InvalidConfigError(f"{len(classes)} novel classes do not split into groups of {group_size}")
        return [classes[i:i + group_size] for i in range(0, len(classes), group_size)]
    raise InvalidConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def make_blob_stream(n_base: int = 10, n_novel: int = 20, k: int = 10, d_in: int = 16,
                     spread: float = 0.25, protocol: str = "per_class", group_size: int = 5,
                     seed: int = 0, *, hard_confusion: bool = False, confusion_angle: float = 0.5,
                     n_base_train: int = 200, n_base_test: int = 50, n_test: int = 50) -> TaskStream:
    """Gaussian clusters with unit-sphere means and isotropic std ``spread``.

    Base classes get ``n_base_train`` training examples each; every novel
    task gets exactly ``k`` training and ``n_test`` test examples per class.
    With ``hard_confusion`` each novel mean sits ``confusion_angle`` radians
    from a randomly chosen base mean.
    """
    if d_in < 2:
        raise InvalidConfigError("d_in must be at least 2")
    if n_base < 1 or n_novel < 1 or k < 1:
        raise InvalidConfigError("n_base, n_novel and k must all be at least 1")
    if spread <= 0:
        raise InvalidConfigError("spread must be positive")
    rng = np.random.default_rng(seed)
    base_means = _unit(rng.normal(size=(n_base, d_in)))
    if hard_confusion:
        anchors = base_means[rng.integers(0, n_base, size=n_novel)]
        ortho = rng.normal(size=(n_novel, d_in))
        ortho = _unit(ortho - np.sum(ortho * anchors, axis=1, keepdims=True) * anchors)
        novel_means = np.cos(confusion_angle) * anchors + np.sin(confusion_angle) * ortho
    else:
        novel_means = _unit(rng.normal(size=(n_novel, d_in)))

    def draw(means, ids, n):
        x = np.concatenate([m + spread * rng.normal(size=(n, d_in)) for m in means])
        return x, np.repeat(np.asarray(ids, dtype=np.int64), n)

    base_ids = list(range(n_base))
    xb, yb = draw(base_means, base_ids, n_base_train)
    xbt, ybt = draw(base_means, base_ids, n_base_test)
    base = Task(0, tuple(base_ids), xb, yb, xbt, ybt)

    tasks = []
    novel_ids = list(range(n_base, n_base + n_novel))
    for n, group in enumerate(_split_groups(novel_ids, protocol, group_size), start=1):
        means = novel_means[[c - n_base for c in group]]
        x, y = draw(means, group, k)
        xt, yt = draw(means, group, n_test)
        tasks.append(Task(n, tuple(group), x, y, xt, yt))
    stream = TaskStream(base, tuple(tasks), protocol, group_size if protocol == "per_group" else 1, seed,
                        meta={"spread": spread, "hard_confusion": hard_confusion})
    stream.validate()
    return stream


def save_stream(stream: TaskStream, path) -> None:
    lines = [f"# {STREAM_MAGIC} protocol={stream.protocol} group_size={stream.group_size} "
             f"seed={stream.seed} d_in={stream.input_dim}"]
    for t in stream.all_tasks():
        for split, xs, ys in (("train", t.x_train, t.y_train), ("test", t.x_test, t.y_test)):
            for x, y in zip(xs, ys):
                lines.append(",".join([split, str(t.index), str(int(y))] + [repr(float(v)) for v in x]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_stream(path) -> TaskStream:
    """Parse a stream file; any malformed row raises ParseError with its line number."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith(f"# {STREAM_MAGIC}"):
        raise ParseError(1, "missing stream header")
    try:
        meta = dict(kv.split("=") for kv in text[0][len(f"# {STREAM_MAGIC}"):].split())
        protocol, group_size = meta["protocol"], int(meta["group_size"])
        seed, d_in = int(meta["seed"]), int(meta["d_in"])
    except (ValueError, KeyError):
        raise ParseError(1, "malformed stream header") from None

    data: dict[int, dict[str, tuple[list, list]]] = {}
    order: list[int] = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 3 + d_in:
            raise ParseError(lineno, f"expected {3 + d_in} fields, found {len(fields)}")
        split = fields[0]
        if split not in ("train", "test"):
            raise ParseError(lineno, f"unknown split {split!r}")
        try:
            task, label = int(fields[1]), int(fields[2])
            x = [float(v) for v in fields[3:]]
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        if task not in data:
            data[task] = {"train": ([], []), "test": ([], [])}
            order.append(task)
        data[task][split][0].append(x)
        data[task][split][1].append(label)

    if order != list(range(len(order))) or not order:
        raise ParseError(len(text), "tasks must be numbered 0..n in order")

    def build(i):
        (xtr, ytr), (xte, yte) = data[i]["train"], data[i]["test"]
        ytr_a = np.array(ytr, dtype=np.int64)
        yte_a = np.array(yte, dtype=np.int64)
        classes = tuple(dict.fromkeys(ytr + yte))
        return Task(i, classes, np.array(xtr, dtype=np.float64).reshape(-1, d_in), ytr_a,
                    np.array(xte, dtype=np.float64).reshape(-1, d_in), yte_a)

    stream = TaskStream(build(0), tuple(build(i) for i in order[1:]), protocol, group_size, seed)
    stream.validate()
    return stream
