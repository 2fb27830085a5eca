"""
Tests for the confusion matrix and the derived metrics.
"""

import numpy as np
import pytest


class TestConfusion:
    def test_basic(self):
        from mgcn.metrics import ConfusionMatrix, confusion

        assert confusion([0.9, 0.2], [1, 0]) == ConfusionMatrix(tp=1, fp=0, tn=1, fn=0)

    def test_tie_is_positive(self):
        from mgcn.metrics import confusion

        cm = confusion([0.5], [0], threshold=0.5)
        assert cm.fp == 1

    def test_all_correct_conserves_count(self):
        from mgcn.metrics import confusion

        labels = np.array([1, 0, 1, 1, 0, 0, 0])
        cm = confusion(labels * 0.8 + 0.1, labels)
        assert cm.tp + cm.tn == len(labels)
        assert cm.total == len(labels)

    def test_accepts_tensors(self):
        from mgcn.metrics import confusion
        from mgcn.tensor import Tensor

        cm = confusion(Tensor([0.7, 0.1, 0.6]), Tensor([1.0, 1.0, 0.0]))
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == (1, 1, 0, 1)

    def test_length_mismatch(self):
        from mgcn.errors import ShapeError
        from mgcn.metrics import confusion

        with pytest.raises(ShapeError):
            confusion([0.1, 0.2], [1])

    def test_empty(self):
        from mgcn.errors import ShapeError
        from mgcn.metrics import confusion

        with pytest.raises(ShapeError):
            confusion([], [])

    @pytest.mark.parametrize("threshold", [0.0, 1.0, 1.5])
    def test_threshold_range(self, threshold):
        from mgcn.metrics import confusion

        with pytest.raises(ValueError):
            confusion([0.5], [1], threshold)


class TestReport:
    def test_worked_example(self):
        from mgcn.metrics import ConfusionMatrix, report

        r = report(ConfusionMatrix(tp=3, fp=1, tn=4, fn=2))
        assert r.accuracy == pytest.approx(0.7)
        assert r.precision == 0.75
        assert r.recall == 0.6
        assert r.f1 == pytest.approx(0.9 / 1.35)
        assert r.misclassification_rate == pytest.approx(0.3)
        assert r.degenerate_flags == frozenset()

    def test_no_positive_predictions(self):
        from mgcn.metrics import ConfusionMatrix, report

        r = report(ConfusionMatrix(tp=0, fp=0, tn=5, fn=0))
        assert r.accuracy == 1.0
        assert r.precision == 0.0
        assert "precision" in r.degenerate_flags
        assert "recall" in r.degenerate_flags
        assert "f1" in r.degenerate_flags

    def test_perfect_classifier(self):
        from mgcn.metrics import ConfusionMatrix, report

        r = report(ConfusionMatrix(tp=6, fp=0, tn=4, fn=0))
        assert (r.accuracy, r.precision, r.recall, r.f1, r.misclassification_rate) == (1.0, 1.0, 1.0, 1.0, 0.0)

    def test_empty_matrix(self):
        from mgcn.metrics import ConfusionMatrix, report

        with pytest.raises(ValueError):
            report(ConfusionMatrix())

    def test_negative_counts_rejected(self):
        from mgcn.metrics import ConfusionMatrix

        with pytest.raises(ValueError):
            ConfusionMatrix(tp=-1)


class TestProperties:
    """Randomized checks against a brute-force tally."""

    @staticmethod
    def _brute_force(scores, labels, threshold):
        tp = fp = tn = fn = 0
        for s, y in zip(scores, labels):
            positive = s >= threshold
            if positive and y == 1:
                tp += 1
            elif positive:
                fp += 1
            elif y == 1:
                fn += 1
            else:
                tn += 1
        return tp, fp, tn, fn

    def test_oracle_equivalence(self):
        from mgcn.metrics import confusion, report

        rng = np.random.default_rng(2024)
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            scores = rng.random(n)
            labels = rng.integers(0, 2, size=n)
            threshold = float(rng.uniform(0.05, 0.95))

            tp, fp, tn, fn = self._brute_force(scores.tolist(), labels.tolist(), threshold)
            cm = confusion(scores, labels, threshold)
            assert (cm.tp, cm.fp, cm.tn, cm.fn) == (tp, fp, tn, fn)

            r = report(cm)
            p = tp / (tp + fp) if tp + fp else 0.0
            rc = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * p * rc / (p + rc) if p + rc else 0.0
            assert r.precision == p
            assert r.recall == rc
            assert r.f1 == f1
            # the larger of the two is divided directly; its complement may sit one ulp away
            acc, mis = (tp + tn) / n, (fp + fn) / n
            if acc >= mis:
                assert r.accuracy == acc
                assert abs(r.misclassification_rate - mis) <= np.spacing(1.0)
            else:
                assert r.misclassification_rate == mis
                assert abs(r.accuracy - acc) <= np.spacing(1.0)

    def test_accuracy_and_misclassification_sum_to_one(self):
        from mgcn.metrics import ConfusionMatrix, report

        rng = np.random.default_rng(7)
        for _ in range(2000):
            cm = ConfusionMatrix(*(int(v) for v in rng.integers(0, 1000, size=4)))
            if cm.total == 0:
                continue
            r = report(cm)
            assert r.accuracy + r.misclassification_rate == 1.0

    def test_recall_ignores_fp_and_tn(self):
        from mgcn.metrics import ConfusionMatrix, report

        rng = np.random.default_rng(8)
        for _ in range(200):
            tp, fn = (int(v) for v in rng.integers(1, 50, size=2))
            base = report(ConfusionMatrix(tp=tp, fn=fn)).recall
            fp, tn = (int(v) for v in rng.integers(0, 50, size=2))
            assert report(ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)).recall == base

    def test_f1_bounded_by_arithmetic_mean(self):
        from mgcn.metrics import ConfusionMatrix, report

        rng = np.random.default_rng(9)
        for _ in range(500):
            cm = ConfusionMatrix(*(int(v) for v in rng.integers(1, 100, size=4)))
            r = report(cm)
            assert r.f1 <= (r.precision + r.recall) / 2 + 1e-15
            assert abs(r.f1 - 2 * r.precision * r.recall / (r.precision + r.recall)) <= 4 * np.spacing(r.f1)
