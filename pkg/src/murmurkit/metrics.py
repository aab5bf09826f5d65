"""Weighted accuracy, macro-F1, and 3x3 confusion matrices.

The confusion matrix is indexed [prediction][truth]. Weighted accuracy
counts correct absent/present/unknown decisions with weights 1/5/3 over
similarly weighted ground-truth totals, so missed murmurs cost the most.
Metrics on integer counts are computed with exact rational arithmetic and
converted to float at the boundary.
"""

from __future__ import annotations

import json
from fractions import Fraction
from typing import Sequence

import numpy as np

from .dataio import ClassLabel

WEIGHTED_ACC_WEIGHTS = (1, 5, 3)  # absent, present, unknown


def confusion_matrix(predictions: Sequence[ClassLabel | int],
                     truths: Sequence[ClassLabel | int]) -> np.ndarray:
    """Counts indexed [prediction][truth]."""
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths must have equal length")
    cm = np.zeros((3, 3), dtype=np.int64)
    for pred, truth in zip(predictions, truths):
        cm[int(pred), int(truth)] += 1
    return cm


def weighted_accuracy(cm: np.ndarray,
                      weights: tuple[int, int, int] = WEIGHTED_ACC_WEIGHTS) -> float:
    """(w_A*m_AA + w_P*m_PP + w_U*m_UU) / (w_A*n_A + w_P*n_P + w_U*n_U),
    where n_X is the ground-truth total of class X (a column sum)."""
    cm = np.asarray(cm, dtype=np.int64)
    numerator = sum(int(w) * int(cm[c, c]) for c, w in enumerate(weights))
    denominator = sum(int(w) * int(cm[:, c].sum()) for c, w in enumerate(weights))
    if denominator == 0:
        raise ValueError("weighted accuracy is undefined on an all-zero matrix")
    return float(Fraction(numerator, denominator))


def per_class_f1(cm: np.ndarray) -> list[float]:
    """F1 per class; a class with no true positives and no support scores 0."""
    cm = np.asarray(cm, dtype=np.int64)
    scores = []
    for c in range(3):
        tp = int(cm[c, c])
        fp = int(cm[c, :].sum()) - tp
        fn = int(cm[:, c].sum()) - tp
        denom = 2 * tp + fp + fn
        scores.append(float(Fraction(2 * tp, denom)) if denom else 0.0)
    return scores


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean of per-class F1 (exact rational mean)."""
    cm = np.asarray(cm, dtype=np.int64)
    total = Fraction(0)
    for c in range(3):
        tp = int(cm[c, c])
        fp = int(cm[c, :].sum()) - tp
        fn = int(cm[:, c].sum()) - tp
        denom = 2 * tp + fp + fn
        total += Fraction(2 * tp, denom) if denom else Fraction(0)
    return float(total / 3)


def per_class_precision_recall(cm: np.ndarray) -> list[dict[str, float]]:
    cm = np.asarray(cm, dtype=np.int64)
    f1 = per_class_f1(cm)
    rows = []
    for c in range(3):
        tp = int(cm[c, c])
        predicted = int(cm[c, :].sum())
        truth = int(cm[:, c].sum())
        rows.append({
            "class": ClassLabel(c).token,
            "precision": float(Fraction(tp, predicted)) if predicted else 0.0,
            "recall": float(Fraction(tp, truth)) if truth else 0.0,
            "f1": f1[c],
        })
    return rows


def metrics_report(cm: np.ndarray) -> dict:
    return {
        "confusion_matrix": np.asarray(cm).tolist(),
        "total": int(np.asarray(cm).sum()),
        "weighted_accuracy": weighted_accuracy(cm),
        "macro_f1": macro_f1(cm),
        "plain_accuracy": float(Fraction(int(np.trace(cm)), int(cm.sum())))
        if cm.sum() else 0.0,
        "per_class": per_class_precision_recall(cm),
    }


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
