"""Dense feed-forward extractor with a cosine classifier head.

Parameters live in a single flat float64 vector (:class:`ParamVector`) whose
segments are named ``layer{i}.weight``, ``layer{i}.bias`` and one
``head.{class_id}`` row per class. Keeping everything flat makes weight
interpolation, anchoring and displacement measurements plain vector algebra.

Head rows are stored raw; the forward pass normalizes both the embedding and
every class row, so logits are exact scaled cosines whatever the stored norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import losses
from .errors import InvalidInputError, InvalidLabelError, StructuralError

EPS = 1e-12
HEAD_PREFIX = "head."
ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def length(self) -> int:
        return math.prod(self.shape)

    @property
    def stop(self) -> int:
        return self.offset + self.length


class ParamVector:
    """Flat parameter vector with an ordered, contiguous segment layout."""

    def __init__(self, values, layout: Iterable[Segment]):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise StructuralError("parameter values must be a flat vector")
        layout = tuple(layout)
        offset = 0
        seen = set()
        for seg in layout:
            if seg.offset != offset:
                raise StructuralError(f"segment {seg.name!r} is not contiguous with its predecessor")
            if seg.name in seen:
                raise StructuralError(f"duplicate segment {seg.name!r}")
            seen.add(seg.name)
            offset = seg.stop
        if offset != values.size:
            raise StructuralError(f"layout covers {offset} values, vector has {values.size}")
        self.values = values
        self.layout = layout
        self._index = {seg.name: seg for seg in layout}

    @classmethod
    def from_arrays(cls, items: Iterable[tuple[str, np.ndarray]]) -> "ParamVector":
        layout, chunks, offset = [], [], 0
        for name, arr in items:
            arr = np.asarray(arr, dtype=np.float64)
            layout.append(Segment(name, offset, tuple(arr.shape)))
            chunks.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"{type(self).__name__}(n={self.values.size}, segments={len(self.layout)})"

    @property
    def names(self) -> list[str]:
        return [seg.name for seg in self.layout]

    def has(self, name: str) -> bool:
        return name in self._index

    def segment(self, name: str) -> np.ndarray:
        """Writable view of one segment in its natural shape."""
        seg = self._index[name]
        return self.values[seg.offset:seg.stop].reshape(seg.shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def check_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise StructuralError("parameter layouts differ")

    def mask(self, names: Iterable[str]) -> np.ndarray:
        out = np.zeros(self.values.size, dtype=bool)
        for name in names:
            if name not in self._index:
                raise StructuralError(f"unknown segment {name!r}")
            seg = self._index[name]
            out[seg.offset:seg.stop] = True
        return out

    def restrict(self, names: Iterable[str]) -> "ParamVector":
        """Sub-vector holding only ``names``, kept in this vector's order."""
        wanted = set(names)
        missing = wanted - set(self._index)
        if missing:
            raise StructuralError(f"unknown segments {sorted(missing)}")
        return ParamVector.from_arrays(
            (seg.name, self.segment(seg.name)) for seg in self.layout if seg.name in wanted
        )


class Gradients(ParamVector):
    """Gradient vector sharing a ParamVector layout; frozen segments are zeroed."""

    def __init__(self, values, layout: Iterable[Segment], frozen: Iterable[str] = ()):
        super().__init__(np.array(values, dtype=np.float64), layout)
        self.frozen = frozenset(frozen)
        if self.frozen:
            self.values[self.mask(self.frozen)] = 0.0

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise StructuralError("dense layer weight/bias shapes disagree")


@dataclass
class CosineHead:
    """Effective classifier: unit-norm class rows, scale and class bookkeeping."""

    class_weights: np.ndarray  # (C, d), unit rows
    scale: float
    class_ids: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.scale <= 0:
            raise InvalidInputError("cosine scale must be positive")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise StructuralError("class ids must be unique")
        if self.class_weights.shape[0] != len(self.class_ids):
            raise StructuralError("one weight row per class id expected")


def normalize_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-normalize ``a``; rows with norm below EPS map to zero.

    Returns the normalized rows, the (safe) norms and the liveness mask that
    :func:`normalize_rows_backward` needs.
    """
    n = np.linalg.norm(a, axis=1)
    live = n > EPS
    safe = np.where(live, n, 1.0)
    u = a / safe[:, None]
    u[~live] = 0.0
    return u, safe, live


def normalize_rows_backward(u, safe, live, du):
    out = (du - u * np.sum(u * du, axis=1, keepdims=True)) / safe[:, None]
    out[~live] = 0.0
    return out


def cosine_scores(emb: np.ndarray, rows: np.ndarray, scale: float):
    u, un, ul = normalize_rows(emb)
    v, vn, vl = normalize_rows(rows)
    return scale * (u @ v.T), (u, un, ul, v, vn, vl)


def cosine_scores_backward(cache, dlogits: np.ndarray, scale: float):
    """Gradients of the scaled cosine scores w.r.t. raw embeddings and raw rows."""
    u, un, ul, v, vn, vl = cache
    du = scale * (dlogits @ v)
    dv = scale * (dlogits.T @ u)
    return normalize_rows_backward(u, un, ul, du), normalize_rows_backward(v, vn, vl, dv)


class CosineClassifierNet:
    """MLP feature extractor followed by an expandable cosine classifier.

    Instances are treated as values: methods that change parameters or the
    class set return a new network.
    """

    def __init__(self, params: ParamVector, activations: Sequence[str], input_dim: int,
                 class_ids: Sequence[int] = (), scale: float = 16.0):
        self.params = params
        self.activations = tuple(activations)
        self.input_dim = int(input_dim)
        self.class_ids = tuple(int(c) for c in class_ids)
        self.scale = float(scale)
        if self.scale <= 0:
            raise InvalidInputError("cosine scale must be positive")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise StructuralError("class ids must be unique")
        self._class_pos = {c: i for i, c in enumerate(self.class_ids)}

        fan_in = self.input_dim
        for i, act in enumerate(self.activations):
            if act not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {act!r}")
            w = params.segment(f"layer{i}.weight")
            b = params.segment(f"layer{i}.bias")
            if w.ndim != 2 or w.shape[1] != fan_in or b.shape != (w.shape[0],):
                raise StructuralError(f"layer {i} shapes inconsistent")
            fan_in = w.shape[0]
        self.embed_dim = fan_in
        expected = self.extractor_names + self.head_names()
        if params.names != expected:
            raise StructuralError("parameter layout does not match the architecture")
        for c in self.class_ids:
            if params.segment(f"{HEAD_PREFIX}{c}").shape != (fan_in,):
                raise StructuralError(f"head row for class {c} has the wrong size")
        self._head_offset = params.layout[len(self.extractor_names)].offset if self.class_ids else len(params)

    @classmethod
    def create(cls, input_dim: int, hidden: Sequence[int] = (64, 64), embed_dim: int | None = 64, *,
               scale: float = 16.0, activation: str = "relu",
               rng: np.random.Generator | None = None) -> "CosineClassifierNet":
        """Extractor with an empty head: ``hidden`` layers using ``activation``
        followed, unless ``embed_dim`` is None, by a linear embedding layer.

        A linear last layer spreads embeddings over the whole sphere; with a
        relu there they all share one orthant and new cosine rows end up
        close to every old class.
        """
        rng = np.random.default_rng() if rng is None else rng
        widths = list(hidden) + ([embed_dim] if embed_dim is not None else [])
        acts = [activation] * len(hidden) + (["identity"] if embed_dim is not None else [])
        items = []
        fan_in = input_dim
        for i, (width, act) in enumerate(zip(widths, acts)):
            std = np.sqrt(2.0 / fan_in) if act == "relu" else np.sqrt(1.0 / fan_in)
            items.append((f"layer{i}.weight", rng.normal(0.0, std, size=(width, fan_in))))
            items.append((f"layer{i}.bias", np.zeros(width)))
            fan_in = width
        return cls(ParamVector.from_arrays(items), acts, input_dim, (), scale)

    # --- structure -----------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def extractor_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names

    def head_names(self, class_ids: Iterable[int] | None = None) -> list[str]:
        ids = self.class_ids if class_ids is None else class_ids
        return [f"{HEAD_PREFIX}{int(c)}" for c in ids]

    @property
    def layers(self) -> list[DenseLayer]:
        return [
            DenseLayer(self.params.segment(f"layer{i}.weight"), self.params.segment(f"layer{i}.bias"), act)
            for i, act in enumerate(self.activations)
        ]

    @property
    def head_rows(self) -> np.ndarray:
        """Raw stored class rows, (C, d) view."""
        return self.params.values[self._head_offset:].reshape(self.n_classes, self.embed_dim)

    @property
    def head(self) -> CosineHead:
        rows, _, _ = normalize_rows(self.head_rows)
        return CosineHead(rows, self.scale, self.class_ids)

    def class_index(self, labels) -> np.ndarray:
        labels = np.asarray(labels).reshape(-1)
        try:
            return np.array([self._class_pos[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise InvalidLabelError(f"label {exc.args[0]} is not a head class") from None

    def with_params(self, params: ParamVector) -> "CosineClassifierNet":
        self.params.check_layout(params)
        return CosineClassifierNet(params, self.activations, self.input_dim, self.class_ids, self.scale)

    def add_classes(self, class_ids: Sequence[int], rows: np.ndarray) -> "CosineClassifierNet":
        rows = np.asarray(rows, dtype=np.float64).reshape(len(class_ids), self.embed_dim)
        clash = set(map(int, class_ids)) & set(self.class_ids)
        if clash:
            raise StructuralError(f"classes already in head: {sorted(clash)}")
        items = [(seg.name, self.params.segment(seg.name)) for seg in self.params.layout]
        items += [(f"{HEAD_PREFIX}{int(c)}", r) for c, r in zip(class_ids, rows)]
        return CosineClassifierNet(ParamVector.from_arrays(items), self.activations, self.input_dim,
                                   self.class_ids + tuple(int(c) for c in class_ids), self.scale)

    # --- computation ---------------------------------------------------

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.input_dim:
            raise InvalidInputError(f"expected inputs of dimension {self.input_dim}, got shape {x.shape}")
        return x2, single

    def _extract(self, x: np.ndarray):
        hs, zs = [x], []
        h = x
        for layer in self.layers:
            z = h @ layer.weights.T + layer.bias
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
            zs.append(z)
            hs.append(h)
        return hs, zs

    def embed(self, x) -> np.ndarray:
        """Penultimate activations f(x), unnormalized."""
        x2, single = self._check_input(x)
        emb = self._extract(x2)[0][-1]
        return emb[0] if single else emb

    def forward(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(embedding, logits)`` for one input vector or a batch."""
        if not self.class_ids:
            raise StructuralError("cosine head has no classes")
        x2, single = self._check_input(x)
        emb = self._extract(x2)[0][-1]
        logits, _ = cosine_scores(emb, self.head_rows, self.scale)
        return (emb[0], logits[0]) if single else (emb, logits)

    def head_logits(self, embeddings: np.ndarray) -> np.ndarray:
        """Scores of already-extracted embeddings against the current head."""
        return cosine_scores(np.atleast_2d(embeddings), self.head_rows, self.scale)[0]

    def predict(self, x) -> np.ndarray:
        logits = self.forward(np.atleast_2d(x))[1]
        return np.asarray(self.class_ids)[np.argmax(logits, axis=1)]

    def forward_cached(self, x):
        x2, _ = self._check_input(x)
        hs, zs = self._extract(x2)
        logits, ccache = cosine_scores(hs[-1], self.head_rows, self.scale)
        return logits, (hs, zs, ccache)

    def backward_from_logits(self, cache, dlogits: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Accumulate d(loss)/d(params) into ``out`` given d(loss)/d(logits)."""
        hs, zs, ccache = cache
        grad = np.zeros_like(self.params.values) if out is None else out
        demb, drows = cosine_scores_backward(ccache, dlogits, self.scale)
        grad[self._head_offset:] += drows.ravel()
        g = ParamVector(grad, self.params.layout)
        for i in reversed(range(self.n_layers)):
            dz = demb * (zs[i] > 0) if self.activations[i] == "relu" else demb
            g.segment(f"layer{i}.weight")[...] += dz.T @ hs[i]
            g.segment(f"layer{i}.bias")[...] += dz.sum(axis=0)
            if i:
                demb = dz @ self.params.segment(f"layer{i}.weight")
        return grad

    def head_backward(self, embeddings: np.ndarray, dlogits: np.ndarray, out: np.ndarray) -> np.ndarray:
        """Accumulate head-row gradients for scores of fixed (stored) embeddings."""
        _, ccache = cosine_scores(embeddings, self.head_rows, self.scale)
        _, drows = cosine_scores_backward(ccache, dlogits, self.scale)
        out[self._head_offset:] += drows.ravel()
        return out


def forward(net: CosineClassifierNet, x) -> tuple[np.ndarray, np.ndarray]:
    return net.forward(x)


@dataclass
class Batch:
    """A minibatch of live inputs plus optional stored class representatives.

    ``new_classes``/``old_classes`` define the two groups the separation loss
    contrasts; both may be empty when that loss is unused.
    """

    x: np.ndarray
    labels: np.ndarray
    stored_embeddings: np.ndarray | None = None
    stored_labels: np.ndarray | None = None
    new_classes: frozenset = frozenset()
    old_classes: frozenset = frozenset()

    @property
    def has_stored(self) -> bool:
        return self.stored_embeddings is not None and len(self.stored_embeddings) > 0


def backward(net: CosineClassifierNet, batch: Batch, spec: "losses.LossSpec",
             frozen: Iterable[str] = ()) -> tuple[float, Gradients, dict[str, float]]:
    """Mean batch loss named by ``spec`` and its exact gradient.

    Returns ``(loss, gradients, parts)`` where ``parts`` holds the individual
    terms (``ce``, ``mgn``, ``reg``) that were evaluated.
    """
    if len(batch.x) == 0:
        raise InvalidInputError("empty batch")
    frozen = frozenset(frozen)
    idx = net.class_index(batch.labels)
    logits, cache = net.forward_cached(batch.x)
    grad = np.zeros_like(net.params.values)
    dlogits = np.zeros_like(logits)
    parts: dict[str, float] = {}
    stored = batch.has_stored
    if stored:
        s_emb = np.asarray(batch.stored_embeddings, dtype=np.float64)
        s_idx = net.class_index(batch.stored_labels)
        s_logits = net.head_logits(s_emb)
        ds_logits = np.zeros_like(s_logits)

    name = spec.name
    if name in ("ce", "total"):
        ce, d = losses.cross_entropy_batch(logits, idx)
        dlogits += d
        if spec.replay and stored:
            ce_s, d_s = losses.cross_entropy_batch(s_logits, s_idx)
            ce += ce_s
            ds_logits += d_s
        parts["ce"] = ce

    if name in ("mgn", "total") and (name == "mgn" or spec.margin.lambda_margin > 0):
        weight = 1.0 if name == "mgn" else spec.margin.lambda_margin
        all_logits = np.vstack([logits, s_logits]) if stored else logits
        all_idx = np.concatenate([idx, s_idx]) if stored else idx
        all_labels = np.concatenate([np.asarray(batch.labels).reshape(-1),
                                     np.asarray(batch.stored_labels).reshape(-1)]) if stored \
            else np.asarray(batch.labels).reshape(-1)
        mgn, d_all = losses.separation_from_logits(
            all_logits, all_idx, all_labels, net.class_ids,
            batch.new_classes, batch.old_classes, spec.margin.margin)
        dlogits += weight * d_all[: len(logits)]
        if stored:
            ds_logits += weight * d_all[len(logits):]
        parts["mgn"] = mgn

    net.backward_from_logits(cache, dlogits, out=grad)
    if stored:
        net.head_backward(s_emb, ds_logits, out=grad)

    if name in ("reg", "total") and spec.anchor is not None:
        weight = 1.0 if name == "reg" else spec.margin.lambda_reg
        reg, g_reg = losses.l2_anchor(net.params, spec.anchor, frozen)
        grad += weight * g_reg.values
        parts["reg"] = reg

    if name == "total":
        loss = losses.total_loss(parts, spec.margin)
    else:
        loss = parts.get({"ce": "ce", "mgn": "mgn", "reg": "reg"}[name], 0.0)
    return float(loss), Gradients(grad, net.params.layout, frozen), parts


def apply_step(w: ParamVector, g: Gradients, lr: float, renormalize: bool = True) -> ParamVector:
    """One SGD step ``w - lr * g``.

    Frozen segments are copied verbatim. With ``renormalize`` the unfrozen
    head rows are projected back onto the unit sphere afterwards.
    """
    w.check_layout(g)
    if not lr > 0:
        raise InvalidInputError("learning rate must be positive")
    values = w.values - lr * g.values
    if g.frozen:
        keep = w.mask(g.frozen)
        values[keep] = w.values[keep]
    out = ParamVector(values, w.layout)
    if renormalize:
        for seg in w.layout:
            if seg.name.startswith(HEAD_PREFIX) and seg.name not in g.frozen:
                row = out.segment(seg.name)
                n = np.linalg.norm(row)
                if n > EPS:
                    row /= n
    return out
