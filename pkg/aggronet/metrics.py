"""Confusion matrices, classification reports and one-vs-rest ROC curves."""

import logging
from collections.abc import Sequence

import numpy as np
import numpy.typing as npt

from aggronet.models import (
    AverageMetrics,
    ClassMetrics,
    ClassReport,
    ConfusionMatrix,
    MetricError,
    RocCurve,
)

logger = logging.getLogger(__name__)

ReportRow = tuple[float, float, float, int]


def confusion(
    preds: npt.ArrayLike,
    labels: npt.ArrayLike,
    class_count: int,
    class_names: Sequence[str] | None = None,
) -> ConfusionMatrix:
    """
    Tally predictions against true labels.

    Args:
        preds: Predicted class per example.
        labels: True class per example.
        class_count (int): Number of classes K.
        class_names: Optional names; defaults to ``class_0 ... class_{K-1}``.

    Returns:
        ConfusionMatrix: ``counts[t, p]`` is the number of examples of true class t predicted p.

    Raises:
        MetricError: If the arrays differ in length or hold a class outside [0, K).
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise MetricError(f"preds {preds.shape} and labels {labels.shape} must be equal 1-D")
    for name, values in (("preds", preds), ("labels", labels)):
        if values.size and (values.min() < 0 or values.max() >= class_count):
            raise MetricError(f"{name} contain a class outside [0, {class_count})")
    names = (
        tuple(class_names)
        if class_names is not None
        else tuple(f"class_{k}" for k in range(class_count))
    )
    if len(names) != class_count:
        raise MetricError(f"{len(names)} class names given for {class_count} classes")
    flat = np.bincount(labels * class_count + preds, minlength=class_count * class_count)
    return ConfusionMatrix(
        counts=flat.reshape(class_count, class_count).astype(np.int64), class_names=names
    )


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator else 0.0


def report_from_confusion(cm: ConfusionMatrix) -> ClassReport:
    """
    Per-class precision, recall, F1 and support with accuracy, macro and weighted averages.

    Undefined ratios (a class never predicted, or absent) are reported as 0.

    Raises:
        MetricError: If the matrix is empty.
    """
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise MetricError("Cannot build a report from an empty confusion matrix")
    diagonal = np.diag(counts)
    predicted = counts.sum(axis=0)
    support = counts.sum(axis=1)
    classes = []
    for k, name in enumerate(cm.class_names):
        precision = _ratio(float(diagonal[k]), float(predicted[k]))
        recall = _ratio(float(diagonal[k]), float(support[k]))
        classes.append(
            ClassMetrics(
                name=name,
                precision=precision,
                recall=recall,
                f1=f1_score(precision, recall),
                support=int(support[k]),
            )
        )
    macro, weighted = aggregate_check(
        [(c.precision, c.recall, c.f1, c.support) for c in classes]
    )
    return ClassReport(
        classes=classes,
        accuracy=float(diagonal.sum()) / total,
        total=total,
        macro=macro,
        weighted=weighted,
    )


def aggregate_check(rows: Sequence[ReportRow]) -> tuple[AverageMetrics, AverageMetrics]:
    """
    Macro (unweighted mean) and support-weighted averages of (precision, recall, f1, support) rows.

    Args:
        rows: One (precision, recall, f1, support) tuple per class.

    Returns:
        tuple[AverageMetrics, AverageMetrics]: The macro and weighted averages.

    Raises:
        MetricError: If there are no rows or the supports sum to zero.
    """
    if not rows:
        raise MetricError("aggregate_check needs at least one row")
    table = np.array([[p, r, f] for p, r, f, _ in rows], dtype=np.float64)
    support = np.array([s for *_, s in rows], dtype=np.float64)
    if support.sum() <= 0:
        raise MetricError("supports must sum to a positive number")
    macro = table.mean(axis=0)
    weighted = (table * support[:, None]).sum(axis=0) / support.sum()
    return AverageMetrics(*map(float, macro)), AverageMetrics(*map(float, weighted))


def roc_one_vs_rest(
    scores: npt.ArrayLike, labels: npt.ArrayLike, class_index: int, class_name: str | None = None
) -> RocCurve:
    """
    One-vs-rest ROC curve for one class.

    Thresholds sweep the distinct scores of the class column in descending order, starting at
    +inf (the (0, 0) point); tied scores give a single point. The area is the trapezoidal rule
    over these points, which equals P(score_pos > score_neg) + P(score_pos == score_neg) / 2.

    Args:
        scores: [N, K] class scores.
        labels: [N] true classes.
        class_index (int): Column treated as the positive class.
        class_name (str | None): Name stored on the curve.

    Returns:
        RocCurve: Points from (0, 0) to (1, 1), thresholds and AUC.

    Raises:
        MetricError: If the class has no positive or no negative examples.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise MetricError(f"scores {scores.shape} do not match labels {labels.shape}")
    if not 0 <= class_index < scores.shape[1]:
        raise MetricError(f"class index {class_index} outside [0, {scores.shape[1]})")
    name = class_name if class_name is not None else f"class_{class_index}"
    column = scores[:, class_index]
    positive = labels == class_index
    n_pos = int(positive.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(
            f"ROC for class {name} is undefined: {n_pos} positives and {n_neg} negatives"
        )

    order = np.argsort(-column, kind="stable")
    sorted_scores = column[order]
    tp_cum = np.cumsum(positive[order])
    fp_cum = np.cumsum(~positive[order])
    # last position of each run of equal scores
    ends = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    tp = np.r_[0, tp_cum[ends]].astype(np.int64)
    fp = np.r_[0, fp_cum[ends]].astype(np.int64)
    thresholds = np.r_[np.inf, sorted_scores[ends]]

    # integer trapezoid sum, divided once
    doubled_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = doubled_area / (2.0 * n_pos * n_neg)
    return RocCurve(
        class_index=class_index,
        class_name=name,
        fpr=fp / n_neg,
        tpr=tp / n_pos,
        thresholds=thresholds,
        auc=auc,
    )


def roc_all(
    scores: npt.ArrayLike, labels: npt.ArrayLike, class_names: Sequence[str]
) -> list[RocCurve]:
    """Curves for every class that has both positives and negatives; the rest are skipped."""
    curves = []
    for k, name in enumerate(class_names):
        try:
            curves.append(roc_one_vs_rest(scores, labels, k, name))
        except MetricError as e:
            logger.warning("Skipping ROC curve: %s", e)
    return curves
