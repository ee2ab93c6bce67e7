from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kneeuda.errors import MetricError
from kneeuda.evaluation import (
    ConfusionMatrix,
    bootstrap_roc,
    classification_metrics,
    loocv,
    mcnemar,
    percent_display,
    roc_auc,
    split_source,
)


def brute_force_auc(scores, labels):
    """Independent oracle: average pairwise win/tie credit in exact rationals."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    credit = Fraction(0)
    for sp, sn in product(pos, neg):
        if sp > sn:
            credit += 1
        elif sp == sn:
            credit += Fraction(1, 2)
    return credit / (len(pos) * len(neg))


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_identical_scores(self):
        assert roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_worked_example(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_one_class_errors(self):
        with pytest.raises(MetricError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_against_brute_force_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 21))
            # coarse score grid to generate plenty of ties
            scores = [Fraction(int(v), 4) for v in rng.integers(0, 5, n)]
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert roc_auc(scores, labels) == float(brute_force_auc(scores, labels))

    @given(st.lists(st.tuples(st.integers(0, 64), st.integers(0, 1)),
                    min_size=4, max_size=20))
    @settings(max_examples=100, deadline=None)
    def test_invariant_under_monotone_transform(self, pairs):
        # coarse grid keeps the transform injective in float arithmetic,
        # so rank structure (including ties) is preserved exactly
        scores = [s / 64.0 for s, _ in pairs]
        labels = [y for _, y in pairs]
        if len(set(labels)) < 2:
            labels[0] = 1 - labels[0]
        transformed = [3.0 * s ** 3 + s + 1.0 for s in scores]
        assert roc_auc(scores, labels) == pytest.approx(
            roc_auc(transformed, labels), abs=1e-12)


class TestClassificationMetrics:
    def report_from_counts(self, tp, fn, tn, fp):
        preds = [1] * tp + [0] * fn + [0] * tn + [1] * fp
        labels = [1] * (tp + fn) + [0] * (tn + fp)
        return classification_metrics(preds, labels)

    def test_with_uda_cartilage_row(self):
        r = self.report_from_counts(tp=2, fn=2, tn=45, fp=1).to_json()
        assert r["sensitivity"]["percent"] == "50"
        assert r["specificity"]["percent"] == "97.83"
        assert r["accuracy"]["percent"] == "94"

    def test_with_uda_subchondral_row(self):
        r = self.report_from_counts(tp=3, fn=2, tn=30, fp=15).to_json()
        assert r["sensitivity"]["percent"] == "60"
        assert r["specificity"]["percent"] == "66.67"
        assert r["accuracy"]["percent"] == "66"

    def test_all_correct(self):
        r = self.report_from_counts(tp=3, fn=0, tn=4, fp=0).to_json()
        assert r["sensitivity"]["percent"] == "100"
        assert r["specificity"]["percent"] == "100"
        assert r["accuracy"]["percent"] == "100"

    def test_exact_rational_rates(self):
        rep = self.report_from_counts(tp=1, fn=2, tn=3, fp=4)
        assert rep.sensitivity == Fraction(1, 3)
        assert rep.specificity == Fraction(3, 7)
        assert rep.accuracy == Fraction(4, 10)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            classification_metrics([1], [1, 0])


class TestBootstrap:
    def test_deterministic_given_seed(self):
        scores = list(np.random.default_rng(0).random(20))
        labels = [1] * 8 + [0] * 12
        a = bootstrap_roc(scores, labels, seed=5, keep_curves=False)
        b = bootstrap_roc(scores, labels, seed=5, keep_curves=False)
        np.testing.assert_array_equal(a.aurocs, b.aurocs)

    def test_perfect_separation_mean_one_sd_zero(self):
        scores = [0.9] * 5 + [0.1] * 15
        labels = [1] * 5 + [0] * 15
        r = bootstrap_roc(scores, labels, seed=0, keep_curves=False)
        assert r.mean == 1.0 and r.sd == 0.0

    def test_matches_independent_resampler(self):
        # second implementation: replay the same generator protocol
        rng = np.random.default_rng(0)
        scores = np.round(rng.random(20), 3)
        labels = np.array([1] * 7 + [0] * 13)
        got = bootstrap_roc(scores, labels, n_resamples=50, seed=123,
                            keep_curves=False)
        rng2 = np.random.default_rng(123)
        expected = []
        for _ in range(50):
            while True:
                idx = rng2.integers(0, 20, size=20)
                if labels[idx].any() and (1 - labels[idx]).any():
                    break
            expected.append(float(brute_force_auc(list(scores[idx]),
                                                  list(labels[idx]))))
        expected = np.array(expected)
        assert abs(got.mean - expected.mean()) < 1e-12
        assert abs(got.sd - expected.std()) < 1e-12

    def test_one_class_input_errors(self):
        with pytest.raises(MetricError):
            bootstrap_roc([0.5, 0.6], [1, 1], seed=0)


class TestMcNemar:
    def test_no_discordance(self):
        r = mcnemar([1, 0, 1], [1, 0, 1], [1, 0, 0])
        assert r.p_value == 1.0 and r.method == "no-discordance"

    def test_b_ten_c_zero(self):
        preds_a = [1] * 10
        preds_b = [0] * 10
        labels = [1] * 10
        r = mcnemar(preds_a, preds_b, labels)
        assert r.b == 10 and r.c == 0
        assert r.p_value == pytest.approx(2 * 0.5 ** 10, abs=1e-15)

    def test_exact_matches_enumeration(self):
        # enumerate all 2^(b+c) assignments of discordant pairs
        for b, c in [(1, 8), (3, 3), (5, 2), (0, 7), (6, 6)]:
            n = b + c
            k = min(b, c)
            count = sum(1 for bits in range(2 ** n)
                        if min(bin(bits).count("1"), n - bin(bits).count("1")) <= k
                        and True)
            # direct tail enumeration instead: count outcomes with
            # #successes <= k or >= n - k
            lo = sum(1 for bits in range(2 ** n) if bin(bits).count("1") <= k)
            hi = sum(1 for bits in range(2 ** n) if bin(bits).count("1") >= n - k)
            if k == n - k:  # symmetric middle counted twice
                expected = 1.0
            else:
                expected = (lo + hi) / 2 ** n
            preds_a = [1] * b + [0] * c
            preds_b = [0] * b + [1] * c
            labels = [1] * n
            r = mcnemar(preds_a, preds_b, labels)
            assert r.p_value == pytest.approx(min(1.0, expected), abs=1e-9), (b, c)

    def test_chi2_used_above_cutoff(self):
        preds_a = [1] * 30
        preds_b = [0] * 30
        labels = [1] * 20 + [0] * 10
        r = mcnemar(preds_a, preds_b, labels)
        assert r.method == "chi2"
        assert 0.0 < r.p_value < 1.0

    def test_significance_flag(self):
        r = mcnemar([1] * 10, [0] * 10, [1] * 10)
        assert r.significant  # p ~ 0.002


class TestSplitSource:
    def test_exact_fractions_n10(self):
        tr, va, te = split_source([f"i{k}" for k in range(10)], seed=0)
        assert (len(tr), len(va), len(te)) == (7, 1, 2)

    def test_largest_remainder_n318(self):
        tr, va, te = split_source([f"i{k}" for k in range(318)], seed=0)
        assert (len(tr), len(va), len(te)) == (222, 32, 64)

    def test_partition_property(self):
        ids = [f"i{k}" for k in range(53)]
        tr, va, te = split_source(ids, seed=3)
        assert sorted(tr + va + te) == sorted(ids)
        assert not (set(tr) & set(va) or set(tr) & set(te) or set(va) & set(te))

    def test_stratified_keeps_class_balance(self):
        ids = [f"i{k}" for k in range(100)]
        labels = [k % 2 for k in range(100)]
        tr, va, te = split_source(ids, seed=0, stratify_by=labels)
        by_id = dict(zip(ids, labels))
        assert sum(by_id[i] for i in tr) == 35
        assert sum(by_id[i] for i in te) == 10

    def test_too_small_errors(self):
        with pytest.raises(ValueError):
            split_source(["a", "b"], seed=0)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split_source(list("abcdef"), fractions=(Fraction(1, 2), Fraction(1, 4),
                                                    Fraction(1, 8)), seed=0)


class TestLoocv:
    @staticmethod
    def mean_train(train, fold_seed):
        values = [v for v, _ in train]
        return sum(values) / len(values)

    @staticmethod
    def eval_above_mean(model, sample):
        value, label = sample
        return int(value > model), value - model, label

    def test_n3_each_sample_tested_once(self):
        samples = [(0.1, 0), (0.9, 1), (0.2, 0)]
        results = loocv(samples, self.mean_train, self.eval_above_mean, seed=0)
        assert [r["fold"] for r in results] == [0, 1, 2]
        assert [r["label"] for r in results] == [0, 1, 0]

    def test_n50_fold_count(self):
        rng = np.random.default_rng(0)
        samples = [(float(rng.random()), int(rng.integers(0, 2))) for _ in range(50)]
        seen = []

        def train(train_set, fold_seed):
            assert len(train_set) == 49
            seen.append(fold_seed)
            return 0.5

        results = loocv(samples, train, self.eval_above_mean, seed=1)
        assert len(results) == 50
        assert len(set(seen)) == 50  # distinct derived fold seeds

    def test_n1_errors(self):
        with pytest.raises(ValueError):
            loocv([(0.5, 1)], self.mean_train, self.eval_above_mean)


def test_percent_display_rounding():
    assert percent_display(1, 3) == "33.33"
    assert percent_display(1, 2) == "50"
    assert percent_display(45, 46) == "97.83"
    # half-up at the second decimal: 0.125% -> 0.13
    assert percent_display(1, 800) == "0.13"
