"""Classification metrics, ROC/AUC, k-fold cross-validation, two-sample
t-tests and wall-clock timing.

The positive class is always label 1. Scores are probabilities of class 1
and a row is predicted positive when its score is ``>= 0.5``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import PreconditionError, UndefinedMetricError
from .numcore import RngState, derive_seed, student_t_two_sided_p

__all__ = [
    "ConfusionMatrix",
    "ClassificationScores",
    "CvResult",
    "TTestResult",
    "TimingRecord",
    "confusion_and_scores",
    "score_probabilities",
    "roc_auc",
    "roc_curve_points",
    "trapezoid_area",
    "kfold_indices",
    "kfold_cv",
    "ttest_ind",
    "time_execution",
]

DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ClassificationScores:
    """Everything reported for one evaluated test set."""

    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float


@dataclass(frozen=True)
class CvResult:
    fold_scores: tuple
    mean: float
    std: float


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    df: float


@dataclass(frozen=True)
class TimingRecord:
    label: str
    wall_seconds: float


def _labels(a, name):
    a = np.asarray(a)
    if a.ndim != 1:
        raise PreconditionError(f"{name} must be one-dimensional")
    if a.size and not np.all((a == 0) | (a == 1)):
        raise PreconditionError(f"{name} must contain only 0 and 1")
    return a.astype(np.int64)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def confusion_and_scores(predictions, truths):
    """Confusion counts plus accuracy, precision, recall and F1.

    Precision, recall and F1 are 0 when their denominator is 0.
    Returns ``(ConfusionMatrix, accuracy, precision, recall, f1)``.
    """
    p = _labels(predictions, "predictions")
    t = _labels(truths, "truths")
    if p.shape != t.shape:
        raise PreconditionError(f"{p.shape[0]} predictions for {t.shape[0]} truths")
    if p.size == 0:
        raise PreconditionError("need at least one prediction")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    tn = int(np.sum((p == 0) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    cm = ConfusionMatrix(tp, fp, tn, fn)
    accuracy = (tp + tn) / cm.total
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return cm, accuracy, precision, recall, f1


def _scores_and_truths(scores, truths):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = _labels(truths, "truths")
    if s.shape != t.shape:
        raise PreconditionError(f"{s.shape[0]} scores for {t.shape[0]} truths")
    if np.isnan(s).any():
        raise PreconditionError("scores contain NaN")
    n_pos = int(t.sum())
    if n_pos == 0 or n_pos == t.shape[0]:
        raise UndefinedMetricError("ROC/AUC needs both classes among the truths")
    return s, t


def _midranks(s):
    # 1-based ranks, tied values share the mean of the ranks they span
    order = np.argsort(s, kind="stable")
    ss = s[order]
    ranks = np.empty(s.shape[0])
    i = 0
    n = s.shape[0]
    while i < n:
        j = i + 1
        while j < n and ss[j] == ss[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)
        i = j
    return ranks


def roc_auc(scores, truths) -> float:
    """Mann-Whitney AUC with midranks, so each tied pair counts one half."""
    s, t = _scores_and_truths(scores, truths)
    n_pos = int(t.sum())
    n_neg = t.shape[0] - n_pos
    rank_sum = float(_midranks(s)[t == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve_points(scores, truths):
    """ROC points ``(fpr, tpr, threshold)``, one per distinct score.

    Thresholds descend; a row counts as positive when its score is
    ``>= threshold``. The list starts with the ``(0, 0, inf)`` sentinel and
    always ends at ``(1, 1)``.
    """
    s, t = _scores_and_truths(scores, truths)
    n_pos = int(t.sum())
    n_neg = t.shape[0] - n_pos
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    ts = t[order]
    points = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    n = ss.shape[0]
    while i < n:
        j = i
        while j < n and ss[j] == ss[i]:
            tp += int(ts[j])
            fp += 1 - int(ts[j])
            j += 1
        points.append((fp / n_neg, tp / n_pos, float(ss[i])))
        i = j
    return points


def trapezoid_area(points) -> float:
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points[:-1], points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def score_probabilities(proba, truths) -> ClassificationScores:
    """Threshold at 0.5 and compute every test-set metric.

    AUC is NaN when the truths hold a single class.
    """
    proba = np.asarray(proba, dtype=np.float64).reshape(-1)
    pred = (proba >= DECISION_THRESHOLD).astype(np.int64)
    cm, acc, prec, rec, f1 = confusion_and_scores(pred, truths)
    try:
        auc = roc_auc(proba, truths)
    except UndefinedMetricError:
        auc = math.nan
    return ClassificationScores(cm, acc, prec, rec, f1, auc)


# -- cross-validation --------------------------------------------------------

def kfold_indices(n: int, k: int = 5, seed: int = 42):
    """Shuffle ``range(n)`` with ``seed`` and cut it into ``k`` contiguous
    folds; the first ``n % k`` folds hold one extra row."""
    if k < 2:
        raise PreconditionError("k must be at least 2")
    if n < k:
        raise PreconditionError(f"{n} rows cannot fill {k} folds")
    perm = RngState(seed).permutation(n)
    base, extra = divmod(n, k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(perm[start:start + size])
        start += size
    return folds


def kfold_cv(trainer: Callable, x, y, k: int = 5, seed: int = 42) -> CvResult:
    """k-fold cross-validated accuracy.

    ``trainer(x_train, y_train, fold_seed)`` must return a callable that maps
    a feature matrix to class-1 probabilities. Fold ``i`` gets the seed
    ``derive_seed(seed, i)``, so results do not depend on evaluation order.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(np.int64).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise PreconditionError(f"{y.shape[0]} labels for {x.shape[0]} rows")
    folds = kfold_indices(x.shape[0], k, seed)
    scores = []
    for i, test_idx in enumerate(folds):
        mask = np.ones(x.shape[0], dtype=bool)
        mask[test_idx] = False
        predict = trainer(x[mask], y[mask], derive_seed(seed, i))
        pred = (np.asarray(predict(x[test_idx])) >= DECISION_THRESHOLD).astype(np.int64)
        scores.append(float(np.mean(pred == y[test_idx])))
    arr = np.array(scores)
    return CvResult(tuple(scores), float(arr.mean()), float(arr.std()))


# -- significance ------------------------------------------------------------

def ttest_ind(a, b, equal_var: bool = True) -> TTestResult:
    """Two-sample t-test, pooled variance by default, Welch when
    ``equal_var`` is False.

    Two samples with equal means and zero spread give ``t=0, p=1``; unequal
    means with zero spread give ``t=+-inf, p=0``.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = a.shape[0], b.shape[0]
    if na < 2 or nb < 2:
        raise PreconditionError("each sample needs at least 2 values")
    ma, mb = float(a.mean()), float(b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    if equal_var:
        df = float(na + nb - 2)
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = pooled * (1.0 / na + 1.0 / nb)
    else:
        qa, qb = va / na, vb / nb
        se2 = qa + qb
        if se2 > 0:
            df = se2 * se2 / (qa * qa / (na - 1) + qb * qb / (nb - 1))
        else:
            df = float(na + nb - 2)
    diff = ma - mb
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, 1.0, df)
        t = math.copysign(math.inf, diff)
    else:
        t = diff / math.sqrt(se2)
    return TTestResult(t, student_t_two_sided_p(t, df), df)


# -- timing ------------------------------------------------------------------

def time_execution(label: str, thunk: Callable):
    """Run ``thunk()`` under a monotonic clock.

    Returns ``(result, TimingRecord)``. If the thunk raises, the exception
    propagates with a ``timing`` attribute holding the elapsed record.
    """
    start = time.perf_counter()
    try:
        result = thunk()
    except Exception as exc:
        record = TimingRecord(label, time.perf_counter() - start)
        exc.timing = record
        if hasattr(exc, "add_note"):
            exc.add_note(f"{label} failed after {record.wall_seconds:.6f} s")
        raise
    return result, TimingRecord(label, time.perf_counter() - start)
