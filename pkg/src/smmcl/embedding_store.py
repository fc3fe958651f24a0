"""Stored class representatives and weight imprinting.

Old classes are represented by a handful of unit-norm penultimate
embeddings captured when their task finished, instead of raw inputs.

Snapshot file format (UTF-8 text)::

    # smmcl-store v1 dim=<d> capacity=<c> seed=<s>
    <class_id>,<task_index>,<e_0>,...,<e_{d-1}>

one row per stored embedding, floats written with ``repr`` so a save/load
round trip is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DegenerateImprintError, InvalidInputError, ParseError, StructuralError
from .nn_core import EPS, CosineClassifierNet, normalize_rows

STORE_MAGIC = "smmcl-store v1"


def imprint(shots) -> np.ndarray:
    """Unit weight vector for a new class: normalized mean of normalized shots."""
    shots = np.atleast_2d(np.asarray(shots, dtype=np.float64))
    if shots.shape[0] == 0:
        raise InvalidInputError("imprinting needs at least one shot")
    unit, _, _ = normalize_rows(shots)
    mean = unit.mean(axis=0)
    n = np.linalg.norm(mean)
    if n < EPS:
        raise DegenerateImprintError("shot embeddings average to the zero vector")
    return mean / n


@dataclass(frozen=True)
class ClassRepresentatives:
    class_id: int
    task_index: int
    embeddings: np.ndarray
    capacity: int

    def __post_init__(self):
        if len(self.embeddings) > self.capacity:
            raise StructuralError(f"class {self.class_id}: more representatives than capacity")
        self.embeddings.setflags(write=False)


def collect(net: CosineClassifierNet, x, y, capacity: int, task_index: int,
            rng: np.random.Generator) -> dict[int, ClassRepresentatives]:
    """Normalized embeddings of ``x`` under ``net``, at most ``capacity`` per class.

    Classes with more examples are subsampled uniformly without replacement;
    classes are visited in ascending id order so the draw is reproducible.
    """
    if capacity < 1:
        raise InvalidInputError("capacity must be at least 1")
    y = np.asarray(y).reshape(-1)
    unit, _, live = normalize_rows(net.embed(x))
    out = {}
    for c in np.unique(y):
        rows = np.flatnonzero((y == c) & live)
        if len(rows) > capacity:
            rows = np.sort(rng.choice(rows, size=capacity, replace=False))
        out[int(c)] = ClassRepresentatives(int(c), task_index, unit[rows].copy(), capacity)
    return out


class EmbeddingStore:
    """Per-class representatives, finalized task by task and never rewritten."""

    def __init__(self, dim: int, capacity: int = 20, seed: int = 0):
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.seed = int(seed)
        self._reps: dict[int, ClassRepresentatives] = {}

    def __len__(self) -> int:
        return len(self._reps)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._reps

    def __getitem__(self, class_id) -> ClassRepresentatives:
        return self._reps[int(class_id)]

    @property
    def class_ids(self) -> list[int]:
        return list(self._reps)

    def finalize(self, reps: dict[int, ClassRepresentatives]) -> None:
        clash = set(reps) & set(self._reps)
        if clash:
            raise StructuralError(f"representatives already finalized for classes {sorted(clash)}")
        for c, r in reps.items():
            if r.embeddings.size and r.embeddings.shape[1] != self.dim:
                raise StructuralError(f"class {c}: embedding dimension mismatch")
        self._reps.update(reps)

    def sample_old(self, count_per_class: int, rng: np.random.Generator,
                   classes: Iterable[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Class-balanced draw: the same number of embeddings from every class.

        The per-class count is ``count_per_class`` capped by the smallest
        class's availability.
        """
        if count_per_class < 1:
            raise InvalidInputError("count_per_class must be at least 1")
        ids = self.class_ids if classes is None else [int(c) for c in classes]
        ids = [c for c in ids if len(self._reps[c].embeddings)]
        if not ids:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=np.int64)
        n = min(count_per_class, min(len(self._reps[c].embeddings) for c in ids))
        xs, ys = [], []
        for c in ids:
            emb = self._reps[c].embeddings
            pick = rng.choice(len(emb), size=n, replace=False)
            xs.append(emb[pick])
            ys.append(np.full(n, c, dtype=np.int64))
        return np.vstack(xs), np.concatenate(ys)

    def save(self, path) -> None:
        lines = [f"# {STORE_MAGIC} dim={self.dim} capacity={self.capacity} seed={self.seed}"]
        for c, r in self._reps.items():
            for e in r.embeddings:
                lines.append(",".join([str(c), str(r.task_index)] + [repr(float(v)) for v in e]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        text = Path(path).read_text(encoding="utf-8").splitlines()
        if not text or not text[0].startswith(f"# {STORE_MAGIC}"):
            raise ParseError(1, "missing store header")
        try:
            meta = dict(kv.split("=") for kv in text[0][len(f"# {STORE_MAGIC}"):].split())
            store = cls(int(meta["dim"]), int(meta["capacity"]), int(meta["seed"]))
        except (ValueError, KeyError):
            raise ParseError(1, "malformed store header") from None
        rows: dict[int, tuple[int, list]] = {}
        for lineno, line in enumerate(text[1:], start=2):
            if not line.strip():
                continue
            fields = line.split(",")
            if len(fields) != 2 + store.dim:
                raise ParseError(lineno, f"expected {2 + store.dim} fields, found {len(fields)}")
            try:
                c, t = int(fields[0]), int(fields[1])
                vec = [float(v) for v in fields[2:]]
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            task, vecs = rows.setdefault(c, (t, []))
            if task != t:
                raise ParseError(lineno, f"class {c} listed under two task indices")
            vecs.append(vec)
        store.finalize({
            c: ClassRepresentatives(c, t, np.array(v, dtype=np.float64).reshape(-1, store.dim),
                                    max(store.capacity, len(v)))
            for c, (t, v) in rows.items()
        })
        return store


def sample_balanced(store: EmbeddingStore, new_emb, new_labels, count_per_class: int,
                    rng: np.random.Generator):
    """Balanced old/new draw for the separation loss.

    Every old class and every new class contributes the same number of
    embeddings, capped by the scarcest class on either side. Returns
    ``(x_old, y_old, x_new, y_new)``; the old arrays are empty when the
    store is.
    """
    if count_per_class < 1:
        raise InvalidInputError("count_per_class must be at least 1")
    new_emb = np.atleast_2d(np.asarray(new_emb, dtype=np.float64))
    new_labels = np.asarray(new_labels).reshape(-1)
    classes, counts = np.unique(new_labels, return_counts=True)
    n = min(count_per_class, int(counts.min())) if len(classes) else count_per_class
    old_ids = [c for c in store.class_ids if len(store[c].embeddings)]
    if old_ids:
        n = min(n, min(len(store[c].embeddings) for c in old_ids))
    x_old, y_old = store.sample_old(n, rng) if old_ids else (np.zeros((0, store.dim)), np.zeros(0, dtype=np.int64))
    picks = [rng.choice(np.flatnonzero(new_labels == c), size=n, replace=False) for c in classes]
    picks = np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)
    return x_old, y_old, new_emb[picks], new_labels[picks]
