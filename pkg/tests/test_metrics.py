import importlib.util
from pathlib import Path

import numpy as np
import pytest

from aggronet.metrics import (
    aggregate_check,
    confusion,
    f1_score,
    report_from_confusion,
    roc_all,
    roc_one_vs_rest,
)
from aggronet.models import ConfusionMatrix, MetricError
from aggronet.report_io import percent_half_up

# precision, recall, f1, support of the published tomato-leaf report
LEAF_ROWS = [
    (0.96, 0.96, 0.96, 50),
    (0.82, 0.82, 0.82, 22),
    (0.94, 0.97, 0.95, 92),
    (0.93, 0.93, 0.93, 104),
    (0.99, 0.98, 0.98, 95),
    (0.88, 1.00, 0.94, 37),
    (1.00, 0.75, 0.86, 8),
    (0.96, 0.85, 0.90, 53),
]


def test_confusion_perfect_predictor():
    labels = [0, 1, 1, 2, 2, 2]
    cm = confusion(labels, labels, 3)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 2, 3]))
    assert cm.support.tolist() == [1, 2, 3]
    assert cm.total == 6


def test_confusion_constant_predictor():
    cm = confusion([0] * 5, [0, 1, 2, 1, 0], 3)
    assert cm.counts[:, 0].tolist() == [2, 2, 1]
    assert not cm.counts[:, 1:].any()


def test_confusion_matches_tally():
    rng = np.random.default_rng(0)
    preds, labels = rng.integers(0, 4, 30), rng.integers(0, 4, 30)
    expected = np.zeros((4, 4), dtype=np.int64)
    for p, t in zip(preds, labels, strict=True):
        expected[t, p] += 1
    np.testing.assert_array_equal(confusion(preds, labels, 4).counts, expected)


@pytest.mark.parametrize(
    "preds, labels, class_count, names",
    [
        pytest.param([0, 3], [0, 1], 3, None, id="prediction out of range"),
        pytest.param([0, 1], [-1, 1], 3, None, id="negative label"),
        pytest.param([0, 1], [0], 3, None, id="length mismatch"),
        pytest.param([0, 1], [0, 1], 2, ["only"], id="name count"),
    ],
)
def test_confusion_rejects_invalid_input(preds, labels, class_count, names):
    with pytest.raises(MetricError):
        confusion(preds, labels, class_count, names)


@pytest.mark.parametrize(
    "precision, recall, expected_f1, printed",
    [
        pytest.param(0.88, 1.00, 0.936, 94, id="Nitrogen deficiency row"),
        pytest.param(1.00, 0.75, 0.857, 86, id="Potassium deficiency row"),
        pytest.param(0.0, 0.0, 0.0, 0, id="Undefined"),
    ],
)
def test_f1_from_published_rows(precision, recall, expected_f1, printed):
    f1 = f1_score(precision, recall)
    assert f1 == pytest.approx(expected_f1, abs=5e-4)
    assert percent_half_up(f1) == printed


def test_report_perfect_two_class():
    report = report_from_confusion(ConfusionMatrix(np.eye(2, dtype=np.int64), ("a", "b")))
    assert report.accuracy == 1.0
    for c in report.classes:
        assert (c.precision, c.recall, c.f1) == (1.0, 1.0, 1.0)
    assert report.macro == report.weighted


def test_report_zero_denominators():
    counts = np.array([[3, 0, 0], [2, 0, 0], [0, 0, 0]], dtype=np.int64)
    report = report_from_confusion(ConfusionMatrix(counts, ("a", "b", "c")))
    b, c = report.classes[1], report.classes[2]
    assert (b.precision, b.recall, b.f1) == (0.0, 0.0, 0.0)
    assert (c.precision, c.recall, c.f1, c.support) == (0.0, 0.0, 0.0, 0)
    assert report.classes[0].precision == pytest.approx(0.6)


def test_report_rejects_empty_matrix():
    with pytest.raises(MetricError):
        report_from_confusion(ConfusionMatrix(np.zeros((2, 2), dtype=np.int64), ("a", "b")))


def test_report_accuracy_matches_prediction_accuracy():
    rng = np.random.default_rng(1)
    preds, labels = rng.integers(0, 5, 200), rng.integers(0, 5, 200)
    report = report_from_confusion(confusion(preds, labels, 5))
    assert report.accuracy == float(np.mean(preds == labels))


def test_weighted_recall_equals_accuracy():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        k = int(rng.integers(2, 11))
        counts = rng.integers(0, 5, size=(k, k))
        counts[0, 0] += 1
        report = report_from_confusion(ConfusionMatrix(counts, tuple(map(str, range(k)))))
        assert report.weighted.recall == pytest.approx(report.accuracy, rel=1e-12)
        for c in report.classes:
            assert 0.0 <= c.precision <= 1.0 and 0.0 <= c.recall <= 1.0
            assert c.f1 <= (c.precision + c.recall) / 2 + 1e-12
            assert (c.f1 == 0.0) == (c.precision * c.recall == 0.0)


def test_published_aggregates():
    macro, weighted = aggregate_check(LEAF_ROWS)
    assert weighted.precision == pytest.approx(0.943, abs=5e-4)
    assert weighted.recall == pytest.approx(0.9396, abs=1e-4)
    assert macro.recall == pytest.approx(0.9075, abs=1e-12)
    assert macro.f1 == pytest.approx(0.9175, abs=1e-12)
    printed = [percent_half_up(v) for v in (weighted.precision, weighted.recall)]
    assert printed == [94, 94]
    assert [percent_half_up(macro.recall), percent_half_up(macro.f1)] == [91, 92]


def test_published_aggregates_within_rounding_tolerance():
    macro, weighted = aggregate_check(LEAF_ROWS)
    published = {
        "macro": ((93, 91, 92), macro),
        "weighted": ((94, 94, 94), weighted),
    }
    for printed, recomputed in published.values():
        values = (recomputed.precision, recomputed.recall, recomputed.f1)
        for p, value in zip(printed, values, strict=True):
            assert abs(100 * value - p) <= 0.5 + 1e-9


@pytest.mark.parametrize(
    "rows",
    [
        pytest.param([(0.5, 0.25, 1 / 3, 7)], id="single class"),
        pytest.param([(0.9, 0.8, 0.85, 10), (0.2, 0.6, 0.3, 10)], id="equal supports"),
    ],
)
def test_macro_equals_weighted(rows):
    macro, weighted = aggregate_check(rows)
    assert macro.precision == pytest.approx(weighted.precision, rel=1e-12)
    assert macro.recall == pytest.approx(weighted.recall, rel=1e-12)
    assert macro.f1 == pytest.approx(weighted.f1, rel=1e-12)


@pytest.mark.parametrize(
    "rows",
    [
        pytest.param([], id="no rows"),
        pytest.param([(0.5, 0.5, 0.5, 0)], id="zero support"),
    ],
)
def test_aggregate_check_rejects(rows):
    with pytest.raises(MetricError):
        aggregate_check(rows)


def two_column(scores):
    column = np.asarray(scores, dtype=np.float64)
    return np.stack([1.0 - column, column], axis=1)


def pairwise_auc(scores, positive):
    pos, neg = scores[positive], scores[~positive]
    wins = sum(float(p > n) + 0.5 * float(p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_roc_perfect_separation():
    curve = roc_one_vs_rest(two_column([0.9, 0.8, 0.3, 0.1]), [1, 1, 0, 0], 1)
    assert curve.auc == 1.0
    assert any(f == 0.0 and t == 1.0 for f, t in zip(curve.fpr, curve.tpr, strict=True))
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
    assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
    assert curve.thresholds[0] == np.inf


def test_roc_inverted_scores():
    curve = roc_one_vs_rest(two_column([0.1, 0.2, 0.8, 0.9]), [1, 1, 0, 0], 1)
    assert curve.auc == 0.0


def test_roc_with_ties_matches_pairwise_oracle():
    scores = np.array([0.9, 0.7, 0.7, 0.7, 0.5, 0.5, 0.4, 0.3, 0.3, 0.2, 0.9, 0.1])
    labels = np.array([1, 1, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1])
    curve = roc_one_vs_rest(two_column(scores), labels, 1)
    assert curve.auc == pytest.approx(pairwise_auc(scores, labels == 1), abs=1e-15)
    assert len(curve.thresholds) == len(np.unique(scores)) + 1


def test_roc_is_monotone_and_invariant_under_increasing_transforms():
    rng = np.random.default_rng(3)
    for _ in range(200):
        scores = rng.integers(0, 10, size=40) / 10.0
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        curve = roc_one_vs_rest(two_column(scores), labels, 1)
        assert (np.diff(curve.fpr) >= 0).all() and (np.diff(curve.tpr) >= 0).all()
        assert 0.0 <= curve.auc <= 1.0
        assert curve.auc == pytest.approx(pairwise_auc(scores, labels == 1), abs=1e-12)
        for transformed in (np.exp(scores), 3.0 * scores + 2.0):
            again = roc_one_vs_rest(two_column(transformed), labels, 1)
            assert again.auc == curve.auc


def test_roc_undefined_for_single_class_labels():
    with pytest.raises(MetricError, match="class_1"):
        roc_one_vs_rest(two_column([0.2, 0.4]), [0, 0], 1)


def test_roc_all_skips_absent_classes(caplog):
    scores = np.random.default_rng(4).random((6, 3))
    curves = roc_all(scores, [0, 1, 0, 1, 0, 1], ["a", "b", "c"])
    assert [c.class_name for c in curves] == ["a", "b"]
    assert "c" in caplog.text


def load_script():
    path = Path(__file__).resolve().parents[1] / "scripts" / "reproduce_classification_report.py"
    spec = importlib.util.spec_from_file_location("reproduce_classification_report", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_reproduce_script_accepts_published_table():
    table = load_script().reproduce_table()
    assert len(table) == 14
    assert table["ok"].all()
    macro_precision = table.set_index("cell").loc["Macro Avg precision"]
    assert macro_precision["deviation (pp)"] == pytest.approx(0.5)
