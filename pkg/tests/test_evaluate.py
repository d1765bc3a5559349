import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_cm, brute_force_metrics
from stroketriage.evaluate import (
    EvalReport,
    EvaluationError,
    confusion_matrix,
    metrics_from_cm,
    micro_scores,
    read_metrics,
    render_report,
    write_metrics,
)

LABELS = [0, 0, 1, 1, 2, 2]
PREDS = [0, 1, 1, 1, 2, 0]

pairs = st.integers(1, 50).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 2), min_size=n, max_size=n),
        st.lists(st.integers(0, 2), min_size=n, max_size=n),
    )
)


class TestConfusion:
    def test_example(self):
        np.testing.assert_array_equal(confusion_matrix(PREDS, LABELS), [[1, 1, 0], [0, 2, 0], [1, 0, 1]])

    def test_perfect(self):
        cm = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2])
        np.testing.assert_array_equal(cm, np.diag([1, 1, 2]))

    def test_single(self):
        cm = confusion_matrix([0], [2])
        assert cm[2, 0] == 1 and cm.sum() == 1

    @pytest.mark.parametrize("preds,labels", [([0, 1], [0]), ([], []), ([3], [0]), ([0], [-1])])
    def test_errors(self, preds, labels):
        with pytest.raises(EvaluationError):
            confusion_matrix(np.array(preds, dtype=int), np.array(labels, dtype=int))

    @given(pairs, st.randoms(use_true_random=False))
    def test_permutation_invariance(self, pl, rnd):
        preds, labels = pl
        idx = list(range(len(preds)))
        rnd.shuffle(idx)
        a = confusion_matrix(preds, labels)
        b = confusion_matrix([preds[i] for i in idx], [labels[i] for i in idx])
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, brute_force_cm(preds, labels))
        assert a.sum() == len(preds)


class TestMetrics:
    def test_example(self):
        r = metrics_from_cm(confusion_matrix(PREDS, LABELS))
        assert r.accuracy == pytest.approx(4 / 6)
        assert r.per_class[1] == pytest.approx((2 / 3, 1.0, 0.8))
        assert r.macro[2] == pytest.approx((0.5 + 0.8 + 2 / 3) / 3)
        assert round(r.macro[2], 4) == 0.6556

    def test_perfect(self):
        r = metrics_from_cm(np.diag([3, 4, 5]))
        assert r.accuracy == 1.0 and r.macro == (1.0, 1.0, 1.0)

    def test_absent_class_zero(self):
        r = metrics_from_cm(np.array([[3, 0, 0], [1, 2, 0], [0, 0, 0]]))
        assert r.per_class[2] == (0.0, 0.0, 0.0)

    def test_empty(self):
        with pytest.raises(EvaluationError):
            metrics_from_cm(np.zeros((3, 3), int))

    @given(pairs)
    def test_oracle_and_ranges(self, pl):
        preds, labels = pl
        r = metrics_from_cm(confusion_matrix(preds, labels))
        acc, per_class, macro = brute_force_metrics(preds, labels)
        assert abs(r.accuracy - acc) <= 1e-12
        for c in range(3):
            assert np.max(np.abs(np.subtract(r.per_class[c], per_class[c]))) <= 1e-12
        assert np.max(np.abs(np.subtract(r.macro, macro))) <= 1e-12
        values = [r.accuracy, *r.macro, *r.weighted, *np.ravel(list(r.per_class.values()))]
        assert all(0.0 <= v <= 1.0 for v in values)
        p, rec = micro_scores(r.cm)
        assert p == pytest.approx(r.accuracy, abs=1e-12) and rec == pytest.approx(r.accuracy, abs=1e-12)


class TestReport:
    def test_formatting(self):
        r = metrics_from_cm(np.diag([49, 0, 0]) + np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]]), loss=0.1073, model_tag="MaxViT", augmentation_tag="cGAN")
        r.accuracy = 0.98
        text = render_report([r])
        header = text.splitlines()[0]
        for col in ("Accuracy", "Loss Value", "F1-score", "Recall", "Precision"):
            assert col in header
        assert "| MaxViT + cGAN | 0.9800 | 0.1073 |" in text

    def test_order_preserved(self):
        a = metrics_from_cm(np.eye(3, dtype=int), model_tag="B")
        b = metrics_from_cm(np.eye(3, dtype=int), model_tag="A")
        rows = render_report([a, b]).splitlines()[2:]
        assert rows[0].startswith("| B ") and rows[1].startswith("| A ")

    def test_json_round_trip(self, tmp_path):
        r = metrics_from_cm(confusion_matrix(PREDS, LABELS), loss=0.25, model_tag="ViT")
        parsed = json.loads(render_report([r], format="json"))
        back = EvalReport.from_dict(parsed[0])
        assert back.accuracy == r.accuracy and back.per_class == r.per_class
        np.testing.assert_array_equal(back.cm, r.cm)
        write_metrics(r, tmp_path)
        again = read_metrics(tmp_path / "metrics.json")
        assert again.to_dict() == r.to_dict()
        assert (tmp_path / "confusion_matrix.csv").read_text().splitlines()[1] == "normal,1,1,0"

    def test_empty(self):
        with pytest.raises(EvaluationError):
            render_report([])
