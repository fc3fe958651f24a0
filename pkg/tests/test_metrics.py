import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smmcl.errors import InvalidConfigError, NumericError, StructuralError
from smmcl.metrics import (CSV_COLUMNS, RunRecord, TaskRecord, common_displacement, displacement, forgetting,
                           imm_bound, loss_barrier, paired_differences, path_points, records_from_csv,
                           records_to_csv, smm_bound, smm_schedule_bound, summarize)
from smmcl.nn_core import ParamVector


def vec(*values):
    return ParamVector.from_arrays([("w", np.array(values, dtype=float))])


def task(n, base, tasks, **kw):
    novel = float(np.mean(tasks)) if tasks else float("nan")
    return TaskRecord(task=n, n_classes=2 + n, acc_base=base, acc_tasks=list(tasks), acc_current=(tasks or [base])[-1],
                      acc_novel=novel, acc_old=base, **kw)


class TestDisplacement:
    def test_identical(self):
        assert displacement(vec(1.0, 2.0), vec(1.0, 2.0)) == 0.0

    def test_three_four_five(self):
        assert displacement(vec(0.0, 0.0), vec(3.0, 4.0)) == 5.0

    def test_random_pairs_match_direct_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.normal(size=30), rng.normal(size=30)
            assert displacement(vec(*a), vec(*b)) == pytest.approx(math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))),
                                                                   rel=0, abs=1e-12)

    def test_frozen_segments_ignored(self):
        a = ParamVector.from_arrays([("x", np.zeros(2)), ("y", np.zeros(1))])
        b = a.with_values(np.array([3.0, 4.0, 100.0]))
        assert displacement(a, b, frozen=["y"]) == 5.0

    def test_layout_mismatch(self):
        with pytest.raises(StructuralError):
            displacement(vec(1.0), ParamVector.from_arrays([("v", np.ones(1))]))

    def test_common_segments_after_head_growth(self):
        a = ParamVector.from_arrays([("x", np.zeros(2))])
        b = ParamVector.from_arrays([("x", np.array([3.0, 4.0])), ("head.9", np.ones(3))])
        assert common_displacement(a, b) == 5.0


class TestBounds:
    def test_half_two(self):
        rec, closed, asym = smm_bound(0.5, 2, 1.0)
        assert (rec, closed, asym) == pytest.approx((0.75, 1.5, 2.0), rel=1e-12)

    def test_large_n_limit(self):
        rec, _, _ = smm_bound(0.5, 10 ** 6, 1.0)
        assert rec == pytest.approx(1.0, rel=1e-12)

    def test_alpha_near_one_single_step(self):
        # one step keeps only (1 - alpha) of it; the closed form and asymptote stay near s
        rec, closed, asym = smm_bound(0.999, 1, 1.0)
        assert rec == pytest.approx(0.001, rel=1e-9)
        assert closed == pytest.approx(1.0, rel=1e-9)
        assert asym == pytest.approx(1.0 / 0.999, rel=1e-12)

    def test_recursion_matches_explicit_sum(self):
        for a in (0.05, 0.3, 0.77):
            for n in (1, 7, 50):
                rec, _, _ = smm_bound(a, n, 2.5)
                assert rec == pytest.approx(2.5 * sum((1 - a) ** t for t in range(1, n + 1)), rel=1e-12)

    def test_schedule_bound_reduces_to_constant(self):
        assert smm_schedule_bound([0.3] * 12, 1.7) == pytest.approx(smm_bound(0.3, 12, 1.7)[0], rel=1e-12)

    def test_invalid_alpha(self):
        for a in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(InvalidConfigError):
                smm_bound(a, 3, 1.0)

    def test_imm_examples(self):
        assert imm_bound(0.5, 10, 1.0) == 5.0
        assert imm_bound(1.0, 10, 1.0) == 0.0

    def test_dense_grid_ordering(self):
        for a in np.linspace(0.01, 0.99, 99):
            for n in (1, 2, 5, 10, 100, 1000, 10 ** 5):
                rec, closed, asym = smm_bound(float(a), n, 1.0)
                assert rec <= closed <= asym
                assert asym == smm_bound(float(a), 1, 1.0)[2]

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0.01, 0.99), st.integers(1, 10 ** 4), st.floats(1e-6, 10.0))
    def test_imm_exceeds_asymptote_past_threshold(self, a, n, s):
        if n > 1.0 / ((1.0 - a) * a):
            assert imm_bound(a, n, s) > smm_bound(a, n, s)[2]


class TestBarrier:
    def test_equal_endpoints(self):
        w = vec(1.0, -2.0)
        assert loss_barrier(w, w, lambda p: float(np.sum(p.values ** 2) + np.sin(p.values[0]))) == 0.0

    def test_convex_loss_has_no_barrier(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = vec(*rng.normal(size=4)), vec(*rng.normal(size=4))
            assert loss_barrier(a, b, lambda p: float(np.sum((p.values - 0.3) ** 2))) <= 0.0

    def test_bump_is_detected(self):
        # double well: both endpoints at the minima, the midpoint on the ridge
        barrier = loss_barrier(vec(-1.0), vec(1.0), lambda p: float((p.values[0] ** 2 - 1) ** 2), grid=25)
        assert barrier == pytest.approx(1.0, rel=1e-12)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(3)
        f = lambda p: float(np.sum(np.cos(3 * p.values)))  # noqa: E731
        for _ in range(20):
            a, b = vec(*rng.normal(size=5)), vec(*rng.normal(size=5))
            assert loss_barrier(a, b, f) == loss_barrier(b, a, f)

    def test_path_includes_endpoints(self):
        a, b = vec(0.1, 0.2), vec(0.7, -0.3)
        pts = path_points(a, b, 25)
        assert len(pts) == 25
        assert np.array_equal(pts[0].values, a.values) and np.array_equal(pts[-1].values, b.values)

    def test_non_finite_reports_grid_index(self):
        with pytest.raises(NumericError, match="grid index 12"):
            loss_barrier(vec(-1.0), vec(1.0), lambda p: float("inf") if abs(p.values[0]) < 1e-9 else 0.0)

    def test_grid_too_small(self):
        with pytest.raises(InvalidConfigError):
            loss_barrier(vec(0.0), vec(1.0), lambda p: 0.0, grid=2)


class TestRecords:
    def fixture(self):
        a = RunRecord("smm", 0, [task(0, 0.9, []), task(1, 0.8, [0.6]), task(2, 0.7, [0.5, 0.4])])
        b = RunRecord("smm", 1, [task(0, 1.0, []), task(1, 0.9, [0.8]), task(2, 0.6, [0.8, 0.2])])
        return [a, b]

    def test_forgetting_hand_computed(self):
        a, b = self.fixture()
        # a: base drop 0.9 -> 0.7, task1 0.6 -> 0.5 ; b: base 1.0 -> 0.6, task1 0.8 -> 0.8
        assert forgetting(a) == pytest.approx((0.2 + 0.1) / 2, rel=1e-12)
        assert forgetting(b) == pytest.approx((0.4 + 0.0) / 2, rel=1e-12)

    def test_single_task_forgets_nothing(self):
        assert forgetting(RunRecord("x", 0, [task(0, 0.5, [])])) == 0.0

    def test_forgetting_non_negative(self):
        rec = RunRecord("x", 0, [task(0, 0.2, []), task(1, 0.9, [0.1])])
        assert forgetting(rec) == 0.0

    def test_summary_hand_computed(self):
        s = summarize(self.fixture())["methods"]["smm"]
        assert s["final_base_acc"]["mean"] == pytest.approx(0.65, rel=1e-12)
        assert s["final_base_acc"]["std"] == pytest.approx(0.05, rel=1e-9)
        assert s["final_novel_acc"]["mean"] == pytest.approx((0.45 + 0.5) / 2, rel=1e-12)
        assert s["forgetting"]["mean"] == pytest.approx((0.15 + 0.2) / 2, rel=1e-12)
        assert s["n_runs"] == 2 and s["n_failed"] == 0

    def test_identical_records_identical_summaries(self):
        recs = self.fixture()
        renamed = [RunRecord("other", r.seed, r.tasks) for r in recs]
        assert summarize(recs)["methods"]["smm"] == summarize(renamed)["methods"]["other"]

    def test_failed_runs_excluded(self):
        recs = self.fixture() + [RunRecord("smm", 2, [], error="boom")]
        s = summarize(recs)["methods"]["smm"]
        assert s["n_runs"] == 3 and s["n_failed"] == 1
        assert s["final_base_acc"]["n"] == 2
        json.dumps(summarize(recs))

    def test_csv_round_trip(self):
        recs = self.fixture()
        recs[0].tasks[1].barrier = 0.1 + 0.2
        text = records_to_csv(recs)
        assert text.splitlines()[0].split(",") == CSV_COLUMNS
        back = records_from_csv(text)
        assert records_to_csv(back) == text
        assert back[0].tasks[1].barrier == 0.1 + 0.2
        assert back[1].tasks[2].acc_tasks == [0.8, 0.2]

    def test_csv_rejects_unknown_schema(self):
        text = records_to_csv(self.fixture()).replace("smmcl.records/1", "smmcl.records/9")
        with pytest.raises(ValueError):
            records_from_csv(text)

    def test_paired_differences(self):
        a = RunRecord("a", 0, [task(1, 0.5, [0.7])])
        b = RunRecord("b", 0, [task(1, 0.5, [0.4])])
        c = RunRecord("b", 1, [task(1, 0.5, [0.4])])
        assert paired_differences([a, b, c], "a", "b", "acc_novel") == [pytest.approx(0.3)]
