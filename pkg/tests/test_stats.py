import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from voxcam import accuracy, paired_t_test, roc_auc, summarize_runs
from voxcam.errors import (
    DegenerateDifferences,
    EmptyInput,
    LengthMismatch,
    OneClassOnly,
    TooFewFolds,
)
from voxcam.stats import (
    REPORT_HEADER,
    ExperimentReport,
    FoldMetrics,
    format_mean_std,
    regularized_incomplete_beta,
    write_report,
)

import oracles


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([0, 1, 1], [0, 1, 1]) == 1.0

    def test_counting_example(self):
        assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            accuracy([], [])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            accuracy([0, 1], [0])


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc([1, 1, 0, 0], [0.9, 0.8, 0.1, 0.2]) == 1.0

    def test_single_tie(self):
        assert roc_auc([1, 0], [0.5, 0.5]) == 0.5

    def test_four_pair_example(self):
        assert roc_auc([1, 1, 0, 0], [0.8, 0.3, 0.5, 0.1]) == 0.75

    def test_reversed_scores_give_zero(self):
        assert roc_auc([1, 1, 0, 0], [0.1, 0.2, 0.8, 0.9]) == 0.0

    def test_one_class_rejected(self):
        with pytest.raises(OneClassOnly):
            roc_auc([1, 1], [0.3, 0.4])
        with pytest.raises(OneClassOnly):
            roc_auc([0, 0], [0.3, 0.4])

    @given(st.integers(0, 2000))
    @settings(max_examples=80, deadline=None)
    def test_matches_pairwise_oracle_exactly(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 30))
        labels = r.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # quantized scores force plenty of ties
        scores = r.integers(0, 6, n) / 4.0
        assert roc_auc(labels, scores) == oracles.roc_auc_pairwise(labels, scores)

    @given(st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_complement_under_negation(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 20))
        labels = r.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = r.permutation(n).astype(np.float64)  # tie-free
        assert roc_auc(labels, scores) + roc_auc(labels, -scores) == pytest.approx(1.0)

    @given(st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_invariant_under_increasing_transform(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 20))
        labels = r.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = r.normal(0, 1, n)
        transformed = np.exp(2.0 * scores) + 1.0
        assert roc_auc(labels, scores) == pytest.approx(roc_auc(labels, transformed), abs=1e-12)


class TestIncompleteBeta:
    def test_matches_scipy_on_grid(self):
        for a in (0.5, 1.0, 1.5, 2.5, 5.0, 10.0):
            for b in (0.5, 1.0, 2.0, 4.5):
                for x in (0.0, 0.01, 0.2, 0.5, 0.8, 0.99, 1.0):
                    got = regularized_incomplete_beta(a, b, x)
                    want = float(special.betainc(a, b, x))
                    assert abs(got - want) < 1e-10, (a, b, x)


class TestPairedT:
    def test_reference_example(self):
        r = paired_t_test([1.1, 2.0, 3.2, 4.1], [1.0, 1.8, 3.0, 4.0])
        assert r.df == 3
        assert r.t == pytest.approx(5.196, abs=1e-3)
        assert r.p == pytest.approx(0.0138, abs=1e-4)
        # pin against an independent CDF
        assert r.p == pytest.approx(oracles.t_two_sided_p(r.t, r.df), abs=1e-9)

    def test_antisymmetry(self):
        a = [1.1, 2.0, 3.2, 4.1]
        b = [1.0, 1.8, 3.0, 4.0]
        fwd = paired_t_test(a, b)
        rev = paired_t_test(b, a)
        assert rev.t == pytest.approx(-fwd.t, abs=1e-12)
        assert rev.p == pytest.approx(fwd.p, abs=1e-12)
        assert rev.df == fwd.df

    def test_zero_variance_differences_rejected(self):
        with pytest.raises(DegenerateDifferences):
            paired_t_test([1.0, 3.0], [1.0, 3.0])
        with pytest.raises(DegenerateDifferences):
            paired_t_test([2.0, 3.0], [1.0, 2.0])

    def test_short_and_mismatched_inputs(self):
        with pytest.raises(EmptyInput):
            paired_t_test([1.0], [0.5])
        with pytest.raises(LengthMismatch):
            paired_t_test([1.0, 2.0], [0.5])

    def test_p_decreases_with_t_magnitude(self):
        for df in (1, 3, 9, 30):
            ps = [
                regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
                for t in (0.5, 1.0, 2.0, 4.0, 8.0)
            ]
            assert all(b < a for a, b in zip(ps, ps[1:])), df

    @given(st.integers(0, 400))
    @settings(max_examples=40, deadline=None)
    def test_matches_scipy_on_random_pairs(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 12))
        a = r.normal(0, 1, n)
        b = a + r.normal(0.3, 0.7, n)
        if np.std(a - b, ddof=1) == 0:
            return
        got = paired_t_test(a, b)
        assert got.p == pytest.approx(oracles.t_two_sided_p(got.t, got.df), abs=1e-9)


class TestSummaries:
    def test_two_fold_std(self):
        folds = [
            FoldMetrics(fold=0, accuracy=0.7, roc_auc=0.8),
            FoldMetrics(fold=1, accuracy=0.8, roc_auc=0.9),
        ]
        rep = summarize_runs(folds)
        assert rep.acc_mean == pytest.approx(0.75)
        assert rep.acc_std == pytest.approx(0.0707, abs=1e-4)
        assert math.isnan(rep.heat_score)

    def test_identical_folds_zero_std(self):
        folds = [FoldMetrics(fold=i, accuracy=0.8, roc_auc=0.85) for i in range(5)]
        rep = summarize_runs(folds)
        assert rep.acc_std == 0.0
        assert rep.roc_std == 0.0

    def test_heat_scores_pool_across_folds(self):
        folds = [
            FoldMetrics(fold=0, accuracy=1.0, roc_auc=1.0, heat=[1.0, 2.0]),
            FoldMetrics(fold=1, accuracy=1.0, roc_auc=1.0, heat=[6.0]),
        ]
        assert summarize_runs(folds).heat_score == pytest.approx(3.0)

    def test_single_fold_rejected(self):
        with pytest.raises(TooFewFolds):
            summarize_runs([FoldMetrics(fold=0, accuracy=1.0, roc_auc=1.0)])

    def test_mean_std_rendering(self):
        assert format_mean_std(0.803, 0.070) == "0.803 ± 0.070"
        assert format_mean_std(0.75, 0.0707) == "0.750 ± 0.071"

    def test_report_csv_contract(self, tmp_path):
        rep = ExperimentReport(
            model="resnet18", tl="none", modality="phantom",
            acc_mean=0.9, acc_std=0.05, roc_mean=0.95, roc_std=0.02, heat_score=2.94,
        )
        path = tmp_path / "report.csv"
        write_report([rep], path)
        lines = path.read_text(encoding="ascii").splitlines()
        assert lines[0] == REPORT_HEADER
        assert lines[0] == "model,tl,modality,acc_mean,acc_std,roc_mean,roc_std,heat_score"
        fields = lines[1].split(",")
        assert fields[:3] == ["resnet18", "none", "phantom"]
        assert fields[3] == "0.900000"
        assert fields[7] == "2.940000"
