"""
metrics.py
==========

Micro and macro F1 from a confusion matrix, trait accuracy (1 - mean absolute error)
and the per-input-mode evaluation report.
"""

from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, validator

from .errors import DataError

MODE_TITLES = {"audio": "Audio", "video": "Visual", "av": "AV"}


class ConfusionMatrix(BaseModel):
    """K x K counts; rows are the true class, columns the predicted class."""

    counts: List[List[int]]

    @validator("counts")
    def _square_non_negative(cls, v):
        k = len(v)
        assert all(len(row) == k for row in v), "confusion matrix must be square"
        assert all(c >= 0 for row in v for c in row), "counts must be >= 0"
        return v

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        return cls(counts=[[0] * k for _ in range(k)])

    @classmethod
    def from_predictions(cls, truth: Sequence[int], pred: Sequence[int], k: int) -> "ConfusionMatrix":
        cm = np.zeros((k, k), dtype=np.int64)
        np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
        return cls(counts=cm.tolist())

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(sum(sum(row) for row in self.counts))

    def array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64).reshape(self.num_classes, self.num_classes)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError(
                "cannot merge confusion matrices over %d and %d classes" % (self.num_classes, other.num_classes)
            )
        return ConfusionMatrix(counts=(self.array() + other.array()).tolist())


def _require_samples(cm: ConfusionMatrix):
    if cm.total == 0:
        raise DataError("F1 is undefined for an empty confusion matrix")


def f1_micro(cm: ConfusionMatrix) -> float:
    """Pooled TP / (TP + (FP + FN) / 2). Equals accuracy for single-label multiclass."""
    _require_samples(cm)
    a = cm.array()
    tp = float(np.trace(a))
    fp = float((a.sum(axis=0) - np.diag(a)).sum())
    fn = float((a.sum(axis=1) - np.diag(a)).sum())
    return tp / (tp + 0.5 * (fp + fn))


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    a = cm.array().astype(np.float64)
    tp = np.diag(a)
    fp = a.sum(axis=0) - tp
    fn = a.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def f1_macro(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class F1; a class nobody has or predicts counts as 0."""
    _require_samples(cm)
    return float(per_class_f1(cm).mean())


class TraitAccuracy(BaseModel):
    per_trait: List[float]
    average: float


def trait_accuracy(preds: np.ndarray, targets: np.ndarray) -> TraitAccuracy:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 2 or preds.shape[0] == 0:
        raise DataError(
            "trait predictions %s and targets %s must be matching (n, traits)" % (preds.shape, targets.shape)
        )
    for name, x in (("predictions", preds), ("targets", targets)):
        if not np.all((x >= 0) & (x <= 1)):
            raise DataError("trait %s must lie in [0, 1]" % name)

    per_trait = 1.0 - np.abs(preds - targets).mean(axis=0)
    return TraitAccuracy(per_trait=per_trait.tolist(), average=float(per_trait.mean()))


class ModeMetrics(BaseModel):
    mode: str
    samples: int
    micro_f1: Optional[float] = None
    macro_f1: Optional[float] = None
    traits: Optional[TraitAccuracy] = None


class MetricsReport(BaseModel):
    task: str
    modes: List[ModeMetrics]
    trait_names: List[str] = []

    def frame(self) -> pd.DataFrame:
        rows = []
        for m in self.modes:
            row = {"mode": m.mode, "samples": m.samples}
            if m.micro_f1 is not None:
                row.update({"micro_f1": m.micro_f1, "macro_f1": m.macro_f1})
            if m.traits is not None:
                row.update(dict(zip(self.trait_names, m.traits.per_trait)))
                row["Avg."] = m.traits.average
            rows.append(row)
        return pd.DataFrame(rows)

    def to_csv(self, path):
        self.frame().to_csv(path, index=False)

    def table(self) -> str:
        """Classification: one row, Mi/Ma per input mode. Regression: one row per mode, one column per trait."""
        if all(m.micro_f1 is not None for m in self.modes):
            row = {}
            for m in self.modes:
                title = MODE_TITLES.get(m.mode, m.mode)
                row["%s Mi" % title] = m.micro_f1
                row["%s Ma" % title] = m.macro_f1
            return pd.DataFrame([row], index=[self.task]).to_string(float_format="%.3f")

        df = self.frame().drop(columns=["samples"])
        df["mode"] = [MODE_TITLES.get(m, m) for m in df["mode"]]
        return df.set_index("mode").to_string(float_format="%.3f")
