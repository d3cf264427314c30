import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogadapt.errors import ConfigError, DimensionError, UndefinedMetricError
from cogadapt.evalkit import metrics as mt
from cogadapt.evalkit import reporting as rp
from cogadapt.evalkit import splits as spl


def preds(y, yhat=None, scores=None, subject="s"):
    yhat = y if yhat is None else yhat
    scores = [0.5] * len(y) if scores is None else scores
    return [mt.Prediction(str(i), subject, int(a), int(b), float(s))
            for i, (a, b, s) in enumerate(zip(y, yhat, scores))]


def mann_whitney(y, s):
    pos = [b for a, b in zip(y, s) if a == 1]
    neg = [b for a, b in zip(y, s) if a == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def brute_macro_f1(y, yhat):
    out = []
    for c in (0, 1):
        tp = sum(1 for a, b in zip(y, yhat) if a == c and b == c)
        fp = sum(1 for a, b in zip(y, yhat) if a != c and b == c)
        fn = sum(1 for a, b in zip(y, yhat) if a == c and b != c)
        out.append(0.0 if 2 * tp + fp + fn == 0 or tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return (out[0] + out[1]) / 2


labels_and_preds = st.integers(1, 60).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 1), min_size=n, max_size=n),
                        st.lists(st.integers(0, 1), min_size=n, max_size=n),
                        st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 1.0]), min_size=n, max_size=n)))


class TestAccuracy:
    def test_examples(self):
        assert mt.accuracy(preds([0, 1, 1])) == 1.0
        assert mt.accuracy(preds([1, 1, 0, 0], [1, 0, 0, 0])) == 0.75
        assert mt.accuracy(preds([1, 0], [0, 1])) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            mt.accuracy([])


class TestMacroF1:
    def test_perfect(self):
        assert mt.macro_f1(preds([0, 1, 0, 1])) == 1.0

    def test_hand_trace(self):
        assert mt.macro_f1(preds([1, 1, 0, 0], [1, 0, 0, 0])) == pytest.approx((2 / 3 + 0.8) / 2)

    def test_degenerate_predictor(self):
        assert mt.macro_f1(preds([1, 1, 0, 0], [1, 1, 1, 1])) == pytest.approx(1 / 3)

    def test_single_class_perfect(self):
        assert mt.macro_f1(preds([1, 1, 1])) == 0.5

    @settings(max_examples=300, deadline=None)
    @given(labels_and_preds, st.randoms())
    def test_permutation_and_swap(self, data, rnd):
        y, yhat, _ = data
        base = mt.macro_f1(preds(y, yhat))
        assert base == brute_macro_f1(y, yhat)
        perm = list(range(len(y)))
        rnd.shuffle(perm)
        assert mt.macro_f1(preds([y[i] for i in perm], [yhat[i] for i in perm])) == pytest.approx(base, abs=1e-15)
        assert mt.accuracy(preds([y[i] for i in perm], [yhat[i] for i in perm])) == mt.accuracy(preds(y, yhat))
        assert mt.macro_f1(preds([1 - a for a in y], [1 - b for b in yhat])) == pytest.approx(base, abs=1e-15)


class TestAuroc:
    def test_separating(self):
        assert mt.auroc(preds([0, 0, 1, 1], scores=[0.1, 0.2, 0.8, 0.9])) == 1.0

    def test_hand_example(self):
        assert mt.auroc(preds([0, 0, 1, 1], scores=[0.1, 0.4, 0.35, 0.8])) == 0.75

    def test_all_ties(self):
        assert mt.auroc(preds([0, 1, 0, 1, 1], scores=[0.3] * 5)) == 0.5

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            mt.auroc(preds([1, 1, 1]))

    @settings(max_examples=300, deadline=None)
    @given(labels_and_preds)
    def test_mann_whitney_and_monotone_invariance(self, data):
        y, _, s = data
        if len(set(y)) < 2:
            return
        a = mt.auroc(preds(y, scores=s))
        assert a == mann_whitney(y, s)
        assert mt.auroc(preds(y, scores=[x ** 3 / 2 for x in s])) == a

    def test_probability_range(self):
        with pytest.raises(ValueError):
            mt.Prediction("w", "s", 1, 1, 1.5)


class TestReconstructionMetrics:
    def test_rmse_examples(self):
        x = np.random.default_rng(0).normal(size=(12, 50))
        np.testing.assert_array_equal(mt.rmse_per_lead(x, x), 0.0)
        y = x.copy()
        y[4] += 3
        np.testing.assert_allclose(mt.rmse_per_lead(y, x), np.eye(12)[4] * 3, atol=1e-12)

    def test_rmse_naive(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(12, 200)), rng.normal(size=(12, 200))
        naive = []
        for i in range(12):
            total = 0.0
            for t in range(200):
                total += (a[i, t] - b[i, t]) ** 2
            naive.append(math.sqrt(total / 200))
        np.testing.assert_allclose(mt.rmse_per_lead(a, b), naive, atol=1e-9)

    def test_batched_frames(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(5, 12, 20)), rng.normal(size=(5, 12, 20))
        flat = lambda z: z.transpose(1, 0, 2).reshape(12, -1)
        np.testing.assert_allclose(mt.rmse_per_lead(a, b), mt.rmse_per_lead(flat(a), flat(b)))

    def test_pearson(self):
        x = np.random.default_rng(5).normal(size=(3, 100))
        np.testing.assert_allclose(mt.pearson_cc_per_lead(x, x), 1.0)
        np.testing.assert_allclose(mt.pearson_cc_per_lead(-x, x), -1.0)
        np.testing.assert_allclose(mt.pearson_cc_per_lead(2 * x + 5, x), 1.0)
        y = np.random.default_rng(7).normal(size=(3, 100))
        np.testing.assert_allclose(mt.pearson_cc_per_lead(x, y),
                                   [np.corrcoef(a, b)[0, 1] for a, b in zip(x, y)], atol=1e-12)

    def test_pearson_zero_variance(self):
        x = np.random.default_rng(6).normal(size=(2, 10))
        x[1] = 1.0
        with pytest.raises(UndefinedMetricError):
            mt.pearson_cc_per_lead(x, x)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mt.rmse_per_lead(np.zeros((12, 5)), np.zeros((12, 6)))


def check_plan(plan, n, subjects=None):
    tests = np.concatenate([f.test for f in plan.folds])
    assert np.array_equal(np.sort(tests), np.arange(n))
    for f in plan.folds:
        a, b, c = set(f.train.tolist()), set(f.val.tolist()), set(f.test.tolist())
        assert not (a & b or a & c or b & c)
        assert a | b | c == set(range(n))
        if subjects is not None:
            s = lambda idx: {subjects[i] for i in idx}
            assert len(s(f.test)) == 1
            assert not (s(f.train) & s(f.val) or s(f.train) & s(f.test) or s(f.val) & s(f.test))


class TestKFold:
    def test_divisible(self):
        y = np.array([0] * 50 + [1] * 50)
        plan = spl.kfold_split(y, 10, seed=0)
        assert len(plan) == 10
        for f in plan.folds:
            assert np.bincount(y[f.test]).tolist() == [5, 5]
        check_plan(plan, 100)

    def test_deterministic(self):
        y = np.random.default_rng(0).integers(0, 2, 80)
        a, b = spl.kfold_split(y, 5, 3), spl.kfold_split(y, 5, 3)
        for fa, fb in zip(a.folds, b.folds):
            assert all(np.array_equal(getattr(fa, k), getattr(fb, k)) for k in ("train", "val", "test"))

    def test_validation_carve_out(self):
        y = np.array([0] * 50 + [1] * 50)
        for f in spl.kfold_split(y, 10).folds:
            counts = np.bincount(y[f.val], minlength=2)
            assert counts.tolist() == [4, 4] or counts.tolist() == [5, 5]
            assert set(f.val.tolist()).isdisjoint(f.test.tolist())

    def test_class_too_small(self):
        with pytest.raises(ConfigError):
            spl.kfold_split([0] * 20 + [1] * 3, 5)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 200), st.integers(0, 200), st.integers(0, 2**31))
    def test_stratification_law(self, k, extra0, extra1, seed):
        n0, n1 = k + extra0, k + extra1
        y = np.random.default_rng(seed).permutation(np.array([0] * n0 + [1] * n1))
        plan = spl.kfold_split(y, k, seed)
        check_plan(plan, len(y))
        share = n1 / len(y)
        for f in plan.folds:
            assert abs(y[f.test].mean() - share) <= 1 / len(f.test) + 1e-12


class TestLoso:
    def test_twenty_subjects(self):
        subj = [f"S{i:02d}" for i in range(20) for _ in range(3)]
        plan = spl.loso_split(subj)
        assert len(plan) == 20
        check_plan(plan, len(subj), subj)

    def test_validation_round_robin(self):
        subj = ["b", "a", "c", "a"]
        plan = spl.loso_split(subj)
        assert [f.fold_id for f in plan.folds] == ["a", "b", "c"]
        assert [subj[i] for i in plan.folds[2].val] == ["a", "a"]

    def test_too_few(self):
        with pytest.raises(ConfigError):
            spl.loso_split(["a", "b"])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 8), min_size=3, max_size=80))
    def test_partition_laws(self, raw):
        subj = [f"S{x}" for x in raw]
        if len(set(subj)) < 3:
            return
        check_plan(spl.loso_split(subj), len(subj), subj)


class TestEarlyStop:
    def test_improving_never_stops(self):
        s = spl.EarlyStopState(patience=2)
        assert all(spl.early_stop_observe(s, e, float(e)) == "continue" for e in range(1, 50))

    def test_flat_stops_at_eleventh(self):
        s = spl.EarlyStopState(patience=10)
        decisions = [spl.early_stop_observe(s, e, 0.5) for e in range(1, 13)]
        assert decisions.index("stop") == 11
        assert s.best_epoch == 1

    def test_min_epochs(self):
        s = spl.EarlyStopState(patience=2, min_epochs=20)
        decisions = [spl.early_stop_observe(s, e, 1.0) for e in range(1, 25)]
        assert decisions.index("stop") == 19

    def test_minimize(self):
        s = spl.EarlyStopState(patience=1, mode="minimize")
        spl.early_stop_observe(s, 1, 2.0)
        spl.early_stop_observe(s, 2, 1.0)
        assert s.best_epoch == 2

    def test_counter_bound(self):
        s = spl.EarlyStopState(patience=3)
        rng = np.random.default_rng(0)
        for e in range(1, 40):
            if spl.early_stop_observe(s, e, float(rng.random())) == "stop":
                break
            assert s.epochs_since_improve <= s.patience

    def test_non_finite(self):
        with pytest.raises(ValueError):
            spl.early_stop_observe(spl.EarlyStopState(), 1, math.nan)


class TestSummary:
    def test_single(self):
        s = rp.subject_summary([0.7])
        assert (s.mean, s.median, s.q1, s.q3, s.std) == (0.7, 0.7, 0.7, 0.7, 0.0)

    def test_one_to_five(self):
        s = rp.subject_summary([1, 2, 3, 4, 5])
        assert (s.median, s.q1, s.q3, s.whisker_low, s.whisker_high) == (3, 2, 4, 1, 5)

    def test_outlier(self):
        s = rp.subject_summary([1, 2, 3, 4, 5, 100])
        assert s.whisker_high == 5

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
    def test_ordering(self, v):
        s = rp.subject_summary(v)
        assert s.q1 <= s.median <= s.q3
        iqr = s.q3 - s.q1
        assert s.whisker_low in v and s.whisker_high in v
        assert s.q1 - 1.5 * iqr <= s.whisker_low <= s.median <= s.whisker_high <= s.q3 + 1.5 * iqr


class TestReports:
    def test_fold_report_rows(self, tmp_path):
        folds = {"S1": preds([0, 1], [0, 1], [0.2, 0.9], "S1"), "S2": preds([1, 1], [1, 0], [0.6, 0.4], "S2")}
        rows = rp.fold_report(folds)
        assert [r["id"] for r in rows] == ["S1", "S2", "mean", "pooled"]
        assert math.isnan(rows[1]["auroc"]) and rows[2]["auroc"] == 1.0
        assert rows[2]["accuracy"] == 0.75
        rp.write_csv(tmp_path / "r.csv", rp.REPORT_COLUMNS, rows)
        text = (tmp_path / "r.csv").read_text()
        assert text.splitlines()[0] == "id,accuracy,macro_f1,auroc"
        assert "S2,0.5," in text and ",nan" in text

    def test_distribution_rows(self):
        rows = [{"id": f"S{i}", "accuracy": a, "macro_f1": a, "auroc": math.nan}
                for i, a in enumerate([0.5, 0.6, 0.7])]
        dist = rp.distribution_rows(rows)
        assert [d["metric"] for d in dist] == ["accuracy", "macro_f1"]
        assert dist[0]["median"] == 0.6
