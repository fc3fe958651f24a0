"""Training objectives: cosine cross-entropy, inter-task separation hinge,
L2 anchor to the knowledge base, and their weighted total.

Everything here is a pure function of arrays. Losses that act on a network
are expressed on logits so one backward pass through the cosine head serves
all of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidConfigError, InvalidLabelError, NumericError, StructuralError

if TYPE_CHECKING:
    from .nn_core import CosineHead, ParamVector

LOSS_NAMES = ("ce", "mgn", "reg", "total")


@dataclass(frozen=True)
class MarginConfig:
    """Margin ``m`` (in scaled-cosine units) and the weights of the margin and
    anchor terms in the total objective."""

    margin: float = 0.5
    lambda_margin: float = 1.0
    lambda_reg: float = 0.01

    def __post_init__(self):
        for name in ("margin", "lambda_margin", "lambda_reg"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidConfigError(f"{name} must be a finite non-negative number, got {value}")


@dataclass(frozen=True)
class LossSpec:
    name: str = "total"
    margin: MarginConfig = MarginConfig()
    anchor: "ParamVector | None" = None
    replay: bool = False  # cross-entropy on stored class representatives too

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise InvalidConfigError(f"unknown loss {self.name!r}; expected one of {LOSS_NAMES}")


def _check_finite(logits: np.ndarray) -> None:
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")


def cross_entropy(logits, label: int, class_ids: Sequence[int] | None = None) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy of one logit vector and its gradient.

    ``label`` is a position in ``logits`` unless ``class_ids`` is given, in
    which case it is looked up there.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if class_ids is not None:
        ids = list(class_ids)
        if label not in ids:
            raise InvalidLabelError(f"label {label} not among class ids")
        label = ids.index(label)
    if not 0 <= label < logits.size:
        raise InvalidLabelError(f"label index {label} out of range")
    loss, d = cross_entropy_batch(logits[None, :], np.array([label]))
    return loss, d[0]


def cross_entropy_batch(logits: np.ndarray, idx: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    _check_finite(logits)
    b = logits.shape[0]
    rows = np.arange(b)
    top = np.argmax(logits, axis=1)
    m = logits[rows, top]
    shifted = np.exp(logits - m[:, None])
    rest = shifted.sum(axis=1) - 1.0  # sum over all but the max entry
    # log1p keeps precision when the true class dominates
    losses = np.log1p(rest) + m - logits[rows, idx]
    probs = shifted / (1.0 + rest)[:, None]
    d = probs
    d[rows, idx] -= 1.0
    return float(losses.mean()), d / b


def separation_hinge(logits: np.ndarray, pos_idx: np.ndarray, opposite: np.ndarray,
                     margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row hinge ``max(m - z_pos + max_{c in opposite} z_c, 0)``.

    ``opposite`` is a boolean (B, C) mask of admissible negatives. Rows with
    no admissible negative contribute zero. At the kink the zero subgradient
    is used.
    """
    _check_finite(logits)
    b = logits.shape[0]
    rows = np.arange(b)
    masked = np.where(opposite, logits, -np.inf)
    has_neg = opposite.any(axis=1)
    neg = np.argmax(masked, axis=1)
    values = np.zeros(b)
    values[has_neg] = margin - logits[rows, pos_idx][has_neg] + masked[rows, neg][has_neg]
    active = has_neg & (values > 0)
    losses = np.where(active, values, 0.0)
    d = np.zeros_like(logits)
    d[rows[active], pos_idx[active]] -= 1.0
    d[rows[active], neg[active]] += 1.0
    return losses, d


def _group_masks(labels, class_ids, new_classes, old_classes):
    new_classes = frozenset(int(c) for c in new_classes)
    old_classes = frozenset(int(c) for c in old_classes)
    if new_classes & old_classes:
        raise StructuralError("old and new class groups overlap")
    ids = np.asarray(class_ids)
    in_new = np.isin(ids, list(new_classes))
    in_old = np.isin(ids, list(old_classes))
    labels = np.asarray(labels).reshape(-1)
    sample_new = np.isin(labels, list(new_classes))
    sample_old = np.isin(labels, list(old_classes))
    opposite = np.where(sample_new[:, None], in_old[None, :],
                        np.where(sample_old[:, None], in_new[None, :], False))
    return opposite, sample_new | sample_old


def separation_from_logits(logits, idx, labels, class_ids, new_classes, old_classes,
                           margin: float) -> tuple[float, np.ndarray]:
    """Batch-mean separation loss given precomputed scaled-cosine logits.

    Samples whose label is in neither group are ignored; the mean runs over
    the samples that belong to a group.
    """
    opposite, member = _group_masks(labels, class_ids, new_classes, old_classes)
    count = int(member.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    per, d = separation_hinge(logits, idx, opposite, margin)
    return float(per.sum() / count), d / count


def inter_task_separation(new_emb, new_labels, old_emb, old_labels, head: "CosineHead",
                          cfg: MarginConfig, new_classes: Iterable[int] | None = None,
                          old_classes: Iterable[int] | None = None):
    """Margin loss pushing each sample's own-class score above the best
    score of the opposite group (old vs new).

    Embeddings and head rows are normalized before the cosine is taken.
    Returns ``(loss, d_new_emb, d_old_emb, d_class_weights)``; the loss is the
    mean over all new and old samples.
    """
    from .nn_core import cosine_scores, cosine_scores_backward

    new_emb = np.atleast_2d(np.asarray(new_emb, dtype=np.float64))
    old_emb = np.asarray(old_emb, dtype=np.float64).reshape(-1, new_emb.shape[1])
    new_labels = np.asarray(new_labels).reshape(-1)
    old_labels = np.asarray(old_labels).reshape(-1)
    ids = list(head.class_ids)
    new_classes = set(map(int, new_labels)) if new_classes is None else set(map(int, new_classes))
    old_classes = set(ids) - new_classes if old_classes is None else set(map(int, old_classes))
    if not set(map(int, new_labels)) <= new_classes or not set(map(int, old_labels)) <= old_classes:
        raise InvalidLabelError("a sample label is outside its declared group")

    emb = np.vstack([new_emb, old_emb])
    labels = np.concatenate([new_labels, old_labels])
    pos = {c: i for i, c in enumerate(ids)}
    try:
        idx = np.array([pos[int(c)] for c in labels], dtype=np.int64)
    except KeyError as exc:
        raise InvalidLabelError(f"label {exc.args[0]} is not a head class") from None
    logits, cache = cosine_scores(emb, head.class_weights, head.scale)
    loss, dlogits = separation_from_logits(logits, idx, labels, ids, new_classes, old_classes, cfg.margin)
    demb, drows = cosine_scores_backward(cache, dlogits, head.scale)
    n = len(new_emb)
    return loss, demb[:n], demb[n:], drows


def l2_anchor(w: "ParamVector", w_b: "ParamVector", frozen: Iterable[str] = ()):
    """Squared distance to the anchor over unfrozen segments, with gradient."""
    from .nn_core import ParamVector

    w.check_layout(w_b)
    diff = w.values - w_b.values
    frozen = list(frozen)
    if frozen:
        diff = np.where(w.mask(frozen), 0.0, diff)
    return float(diff @ diff), ParamVector(2.0 * diff, w.layout)


def total_loss(parts: Mapping[str, float], cfg: MarginConfig) -> float:
    """``ce + lambda_margin * mgn + lambda_reg * reg``; missing parts count as 0."""
    ce, mgn, reg = (float(parts.get(k, 0.0)) for k in ("ce", "mgn", "reg"))
    if not all(np.isfinite([ce, mgn, reg])):
        raise NumericError("non-finite loss component")
    return ce + cfg.lambda_margin * mgn + cfg.lambda_reg * reg
