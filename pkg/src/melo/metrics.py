"""Classification metrics: ACC, SEN, PRE, F1S and Mann-Whitney AUC.

Modes:
    ``binary``      two classes; class 1 is positive.
    ``macro``       more than two classes; per-class one-vs-rest, unweighted mean.
    ``multilabel``  independent 0/1 labels; scores thresholded at 0.5,
                    accuracy is exact-match over the label vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

MODES = ("auto", "binary", "macro", "multiclass", "multilabel")


@dataclass
class MetricsReport:
    acc: float
    sen: float
    pre: float
    f1s: float
    auc: Optional[float]
    mode: str
    per_class: list[dict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def to_kv(self) -> str:
        lines = [f"mode={self.mode}"]
        for key in ("acc", "sen", "pre", "f1s", "auc"):
            value = getattr(self, key)
            lines.append(f"{key}={'nan' if value is None else repr(float(value))}")
        for row in self.per_class:
            c = row["class"]
            for key in ("sen", "pre", "f1s", "support"):
                lines.append(f"class.{c}.{key}={row[key]!r}")
        lines.append(f"flags={','.join(self.flags)}")
        return "\n".join(lines) + "\n"


def _resolve_mode(y_true: np.ndarray, scores: np.ndarray, mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "multiclass":
        mode = "auto"
    if mode == "auto":
        if y_true.ndim == 2:
            return "multilabel"
        return "binary" if scores.ndim == 1 or scores.shape[1] == 2 else "macro"
    return mode


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(scores, axis=-1)


def _safe_div(num, den, flags, what):
    if den == 0:
        flags.append(what)
        return 0.0
    return num / den


def _class_stats(tp, fp, fn, cls, flags):
    sen = _safe_div(tp, tp + fn, flags, f"sen_undefined:{cls}")
    pre = _safe_div(tp, tp + fp, flags, f"pre_undefined:{cls}")
    f1s = _safe_div(2 * sen * pre, sen + pre, flags, f"f1s_undefined:{cls}")
    return {"class": cls, "sen": sen, "pre": pre, "f1s": f1s, "support": int(tp + fn)}


def confusion_metrics(y_true, scores, mode: str = "auto") -> MetricsReport:
    """Accuracy, sensitivity, precision and F1 from labels and score vectors.

    Zero denominators contribute 0 to the average and are listed in ``flags``.
    ``auc`` is left as None; see :func:`evaluate` for the full report.
    """
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    if y_true.shape[0] == 0:
        raise ValueError("confusion_metrics needs at least one record")
    mode = _resolve_mode(y_true, scores, mode)
    flags: list[str] = []

    if mode == "multilabel":
        pred = (scores >= 0.5).astype(np.int64)
        truth = y_true.astype(np.int64)
        acc = float(np.mean(np.all(pred == truth, axis=1)))
        rows = []
        for c in range(truth.shape[1]):
            tp = int(np.sum((pred[:, c] == 1) & (truth[:, c] == 1)))
            fp = int(np.sum((pred[:, c] == 1) & (truth[:, c] == 0)))
            fn = int(np.sum((pred[:, c] == 0) & (truth[:, c] == 1)))
            rows.append(_class_stats(tp, fp, fn, c, flags))
        return _averaged(acc, rows, mode, flags)

    if scores.ndim == 1:
        pred = (scores >= 0.5).astype(np.int64)
        num_classes = 2
    else:
        pred = predict(scores)
        num_classes = scores.shape[1]
    acc = float(np.mean(pred == y_true))
    if len(np.unique(y_true)) < 2:
        flags.append("single_class_input")
    if mode == "binary":
        tp = int(np.sum((pred == 1) & (y_true == 1)))
        fp = int(np.sum((pred == 1) & (y_true != 1)))
        fn = int(np.sum((pred != 1) & (y_true == 1)))
        row = _class_stats(tp, fp, fn, 1, flags)
        return MetricsReport(acc, row["sen"], row["pre"], row["f1s"], None, mode, [row], flags)
    rows = []
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (y_true == c)))
        fp = int(np.sum((pred == c) & (y_true != c)))
        fn = int(np.sum((pred != c) & (y_true == c)))
        rows.append(_class_stats(tp, fp, fn, c, flags))
    return _averaged(acc, rows, mode, flags)


def _averaged(acc, rows, mode, flags):
    sen = float(np.mean([r["sen"] for r in rows]))
    pre = float(np.mean([r["pre"] for r in rows]))
    f1s = float(np.mean([r["f1s"] for r in rows]))
    return MetricsReport(acc, sen, pre, f1s, None, mode, rows, flags)


def binary_auc(labels, scores) -> float:
    """Mann-Whitney U / (n_pos * n_neg); tied pairs count one half.

    Raises:
        UndefinedMetricError: only one class is present.
    """
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(y_true, scores, mode: str = "auto") -> float:
    """AUC; macro one-vs-rest for more than two classes or for multi-label input."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    mode = _resolve_mode(y_true, scores, mode)
    if mode == "multilabel":
        return float(np.mean([binary_auc(y_true[:, c], scores[:, c]) for c in range(y_true.shape[1])]))
    if mode == "binary":
        pos = scores if scores.ndim == 1 else scores[:, 1]
        return binary_auc(y_true == 1, pos)
    return float(np.mean([binary_auc(y_true == c, scores[:, c]) for c in range(scores.shape[1])]))


def evaluate(y_true, scores, mode: str = "auto") -> MetricsReport:
    """Full report; an undefined AUC is flagged and reported as None, never 0 or 1."""
    report = confusion_metrics(y_true, scores, mode)
    try:
        report.auc = auc(y_true, scores, report.mode)
    except UndefinedMetricError:
        report.flags.append("auc_undefined")
    return report
