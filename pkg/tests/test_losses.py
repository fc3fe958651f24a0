import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_diff, gradient_error, loss_instance, rel_err
from smmcl.errors import InvalidConfigError, InvalidLabelError, NumericError, StructuralError
from smmcl.losses import (MarginConfig, cross_entropy, cross_entropy_batch, inter_task_separation, l2_anchor,
                          separation_hinge, total_loss)
from smmcl.nn_core import CosineHead, ParamVector


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def brute_force_separation(emb, labels, rows, ids, scale, margin, new_classes, old_classes):
    """Loop oracle: per sample, margin minus own score plus best opposite-group score."""
    total = 0.0
    for e, y in zip(emb, labels):
        e = unit(e)
        scores = {c: scale * float(e @ unit(r)) for c, r in zip(ids, rows)}
        opposite = old_classes if y in new_classes else new_classes
        best = max((scores[c] for c in opposite), default=None)
        if best is not None:
            total += max(margin - scores[y] + best, 0.0)
    return total / len(labels)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros(4), 2)
        assert loss == pytest.approx(math.log(4), rel=1e-12)

    def test_confident_correct_prediction(self):
        loss, _ = cross_entropy(np.array([50.0, 0.0, 0.0]), 0)
        assert 0 <= loss < 1e-20

    def test_gradient_is_softmax_minus_onehot(self):
        z = np.array([0.3, -1.2, 2.0])
        _, d = cross_entropy(z, 1)
        p = np.exp(z) / np.exp(z).sum()
        assert np.allclose(d, p - np.eye(3)[1], atol=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.normal(scale=4, size=int(rng.integers(2, 6)))
            label = int(rng.integers(0, len(z)))
            _, d = cross_entropy(z, label)
            num = central_diff(lambda v: cross_entropy(v, label)[0], z)
            assert np.max(rel_err(d, num)) < 1e-4

    def test_class_id_lookup(self):
        assert cross_entropy(np.array([1.0, 2.0]), 7, class_ids=[3, 7])[0] == cross_entropy(np.array([1.0, 2.0]), 1)[0]
        with pytest.raises(InvalidLabelError):
            cross_entropy(np.array([1.0, 2.0]), 5, class_ids=[3, 7])
        with pytest.raises(InvalidLabelError):
            cross_entropy(np.array([1.0, 2.0]), 2)

    def test_non_finite_logits(self):
        with pytest.raises(NumericError):
            cross_entropy(np.array([np.nan, 0.0]), 0)
        with pytest.raises(NumericError):
            cross_entropy(np.array([np.inf, 0.0]), 0)

    def test_batch_is_mean_of_rows(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(5, 3))
        idx = rng.integers(0, 3, size=5)
        loss, d = cross_entropy_batch(z, idx)
        singles = [cross_entropy(z[i], int(idx[i])) for i in range(5)]
        assert loss == pytest.approx(np.mean([s[0] for s in singles]), rel=1e-12)
        assert np.allclose(d, np.array([s[1] for s in singles]) / 5, atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.data())
    def test_non_negative(self, logits, data):
        label = data.draw(st.integers(0, len(logits) - 1))
        assert cross_entropy(np.array(logits), label)[0] >= 0.0


class TestSeparation:
    def head(self, rows, scale):
        rows = np.array([unit(r) for r in rows])
        return CosineHead(rows, scale, tuple(range(len(rows))))

    def test_satisfied_margin_gives_zero(self):
        # own score 10, best opposite score 2, margin 5
        head = self.head([[1.0, 0.0], [0.2, math.sqrt(1 - 0.04)]], 10.0)
        loss, *_ = inter_task_separation(np.array([[1.0, 0.0]]), [0], np.zeros((0, 2)), [], head,
                                         MarginConfig(margin=5.0), new_classes=[0], old_classes=[1])
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_violated_margin(self):
        # own score 3, best opposite score 2, margin 5 -> 5 - 3 + 2
        head = self.head([[0.3, math.sqrt(1 - 0.09)], [0.2, -math.sqrt(1 - 0.04)]], 10.0)
        loss, *_ = inter_task_separation(np.array([[1.0, 0.0]]), [0], np.zeros((0, 2)), [], head,
                                         MarginConfig(margin=5.0), new_classes=[0], old_classes=[1])
        assert loss == pytest.approx(4.0, rel=1e-12)

    def test_empty_opposite_group(self):
        head = self.head([[1.0, 0.0], [0.0, 1.0]], 10.0)
        loss, d_new, _, d_rows = inter_task_separation(np.array([[0.5, 0.5]]), [0], np.zeros((0, 2)), [], head,
                                                       MarginConfig(margin=5.0), new_classes=[0, 1],
                                                       old_classes=[])
        assert loss == 0.0
        assert np.all(d_new == 0.0) and np.all(d_rows == 0.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            d = int(rng.integers(2, 6))
            rows = rng.normal(size=(6, d))
            head = CosineHead(np.array([unit(r) for r in rows]), float(rng.uniform(1, 20)), tuple(range(6)))
            old, new = [0, 1, 2], [3, 4, 5]
            n_new, n_old = int(rng.integers(1, 5)), int(rng.integers(0, 5))
            e_new, y_new = rng.normal(size=(n_new, d)), rng.choice(new, n_new)
            e_old, y_old = rng.normal(size=(n_old, d)), rng.choice(old, n_old)
            m = float(rng.uniform(0, 10))
            loss, *_ = inter_task_separation(e_new, y_new, e_old, y_old, head, MarginConfig(margin=m), new, old)
            ref = brute_force_separation(np.vstack([e_new, e_old]), list(y_new) + list(y_old), rows, range(6),
                                         head.scale, m, set(new), set(old))
            assert loss == pytest.approx(ref, rel=1e-12, abs=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            rows = rng.normal(size=(4, 3))
            head = CosineHead(np.array([unit(r) for r in rows]), 5.0, (0, 1, 2, 3))
            e_new, e_old = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
            y_new, y_old = [2, 3], [0, 1]
            cfg = MarginConfig(margin=float(rng.uniform(0.5, 4)))
            _, d_new, d_old, _ = inter_task_separation(e_new, y_new, e_old, y_old, head, cfg, [2, 3], [0, 1])
            flat = np.concatenate([e_new.ravel(), e_old.ravel()])

            def f(v):
                return inter_task_separation(v[:6].reshape(2, 3), y_new, v[6:].reshape(2, 3), y_old, head, cfg,
                                             [2, 3], [0, 1])[0]

            num = central_diff(f, flat)
            assert np.max(rel_err(np.concatenate([d_new.ravel(), d_old.ravel()]), num)) < 1e-4

    def test_groups_must_be_disjoint(self):
        head = self.head([[1.0, 0.0], [0.0, 1.0]], 1.0)
        with pytest.raises(StructuralError):
            inter_task_separation(np.ones((1, 2)), [0], np.zeros((0, 2)), [], head, MarginConfig(), [0], [0, 1])

    def test_kink_uses_zero_subgradient(self):
        z = np.array([[2.0, 1.5]])
        losses, d = separation_hinge(z, np.array([0]), np.array([[False, True]]), 0.5)
        assert losses[0] == 0.0 and np.all(d == 0.0)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.floats(0, 5), st.floats(0, 5))
    def test_non_negative_and_monotone_in_margin(self, z, m1, m2):
        z = np.array([z])
        lo, hi = sorted((m1, m2))
        mask = np.array([[False, False, True, True]])
        a, _ = separation_hinge(z, np.array([0]), mask, lo)
        b, _ = separation_hinge(z, np.array([0]), mask, hi)
        assert 0.0 <= a[0] <= b[0]


class TestAnchorAndTotal:
    def test_anchor_examples(self):
        w = ParamVector.from_arrays([("a", np.array([1.0, 2.0]))])
        assert l2_anchor(w, w)[0] == 0.0
        loss, g = l2_anchor(w, w.with_values(np.array([0.0, 0.0])))
        assert loss == 5.0
        assert np.array_equal(g.values, [2.0, 4.0])

    def test_anchor_ignores_frozen(self):
        w = ParamVector.from_arrays([("a", np.array([1.0])), ("b", np.array([3.0]))])
        loss, g = l2_anchor(w, w.with_values(np.zeros(2)), frozen=["b"])
        assert loss == 1.0 and g.values[1] == 0.0

    def test_total_is_weighted_sum(self):
        cfg = MarginConfig(margin=1.0, lambda_margin=0.5, lambda_reg=0.1)
        assert total_loss({"ce": 1.0, "mgn": 2.0, "reg": 3.0}, cfg) == pytest.approx(2.3, rel=1e-12)

    def test_total_without_old_classes(self):
        cfg = MarginConfig(lambda_margin=0.7, lambda_reg=0.2)
        assert total_loss({"ce": 1.5, "reg": 2.0}, cfg) == pytest.approx(1.9, rel=1e-12)

    def test_total_rejects_non_finite(self):
        with pytest.raises(NumericError):
            total_loss({"ce": float("nan")}, MarginConfig())

    def test_config_validation(self):
        with pytest.raises(InvalidConfigError):
            MarginConfig(margin=-1.0)
        with pytest.raises(InvalidConfigError):
            MarginConfig(lambda_reg=float("inf"))

    @pytest.mark.parametrize("name", ["ce", "mgn", "reg", "total"])
    def test_network_gradients(self, name):
        for i in range(10):
            net, batch, spec = loss_instance(name, np.random.default_rng(900 + i))
            assert gradient_error(net, batch, spec) < 1e-4


def test_brute_force_oracle_sanity():
    # two classes per group, one sample each way, every score pair enumerated by hand
    rows = np.eye(4)[:, :4]
    emb = [unit([1.0, 0.5, 0.0, 0.0]), unit([0.0, 0.0, 1.0, 0.2])]
    scale, m = 2.0, 1.0
    scores = [[scale * float(e @ r) for r in rows] for e in emb]
    expected = 0.0
    for s, own, opp in zip(scores, [0, 2], [[2, 3], [0, 1]]):
        expected += max(m - s[own] + max(s[c] for c in opp), 0.0)
    expected /= 2
    got = brute_force_separation(np.array(emb), [0, 2], rows, range(4), scale, m, {2, 3}, {0, 1})
    assert got == pytest.approx(expected, rel=1e-12)
    head = CosineHead(rows, scale, (0, 1, 2, 3))
    loss, *_ = inter_task_separation(np.array([emb[1]]), [2], np.array([emb[0]]), [0], head, MarginConfig(margin=m),
                                     [2, 3], [0, 1])
    assert loss == pytest.approx(expected, rel=1e-12)

