"""Per-class precision, recall and F1 with unweighted class means."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import CLASSES


@dataclass
class MetricsReport:
    """Metrics derived from an 11x11 confusion matrix (rows truth, columns prediction).

    Classes absent from both truth and predictions are excluded from the
    means; their per-class entries are NaN.
    """

    confusion: np.ndarray
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.asarray(self.confusion, dtype=np.int64)
        self.confusion = c
        tp = np.diag(c).astype(np.float64)
        pred, true = c.sum(axis=0), c.sum(axis=1)
        self.present = (pred + true) > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(pred > 0, tp / np.maximum(pred, 1), 0.0)
            r = np.where(true > 0, tp / np.maximum(true, 1), 0.0)
            f = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0.0)
        nan = np.full(len(c), np.nan)
        self.precision = np.where(self.present, p, nan)
        self.recall = np.where(self.present, r, nan)
        self.f1 = np.where(self.present, f, nan)

    @property
    def mean_precision(self) -> float:
        return float(np.nanmean(self.precision)) if self.present.any() else 0.0

    @property
    def mean_recall(self) -> float:
        return float(np.nanmean(self.recall)) if self.present.any() else 0.0

    @property
    def mean_f1(self) -> float:
        return float(np.nanmean(self.f1)) if self.present.any() else 0.0

    @property
    def micro_precision(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    @property
    def n_segments(self) -> int:
        return int(self.confusion.sum())

    def summary(self) -> dict:
        return {
            "meanRecall": self.mean_recall,
            "meanPrecision": self.mean_precision,
            "meanF1": self.mean_f1,
            "microPrecision": self.micro_precision,
            "segments": self.n_segments,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        support = self.confusion.sum(axis=1)
        for k, name in enumerate(CLASSES):
            vals = [("" if np.isnan(v) else f"{v:.3f}") for v in (self.precision[k], self.recall[k], self.f1[k])]
            w.writerow([name, *vals, int(support[k])])
        w.writerow(["mean", f"{self.mean_precision:.3f}", f"{self.mean_recall:.3f}", f"{self.mean_f1:.3f}",
                    int(support.sum())])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'class':<7}{'precision':>11}{'recall':>9}{'f1':>8}{'support':>9}"]
        support = self.confusion.sum(axis=1)
        for k, name in enumerate(CLASSES):
            if not self.present[k]:
                lines.append(f"{name:<7}{'-':>11}{'-':>9}{'-':>8}{int(support[k]):>9}")
                continue
            lines.append(f"{name:<7}{self.precision[k]:>11.3f}{self.recall[k]:>9.3f}{self.f1[k]:>8.3f}"
                         f"{int(support[k]):>9}")
        lines.append(f"{'mean':<7}{self.mean_precision:>11.3f}{self.mean_recall:>9.3f}{self.mean_f1:>8.3f}"
                     f"{int(support.sum()):>9}")
        return "\n".join(lines)

    def save(self, path: str | Path) -> Path:
        """Delimited metrics file plus the raw confusion matrix next to it."""
        path = Path(path)
        path.write_text(self.to_csv())
        np.savetxt(path.with_suffix(".confusion.csv"), self.confusion, fmt="%d", delimiter=",")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        path = Path(path)
        conf = np.loadtxt(path.with_suffix(".confusion.csv"), delimiter=",", dtype=np.int64, ndmin=2)
        return cls(conf)


def confusion_matrix(predictions, ground_truth, n_classes: int = len(CLASSES)) -> np.ndarray:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(ground_truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.shape[0] if pred.ndim else 0} predictions for "
                         f"{true.shape[0] if true.ndim else 0} ground-truth labels")
    c = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(c, (true, pred), 1)
    return c


def compute_metrics(predictions, ground_truth, descriptor: dict | None = None) -> MetricsReport:
    return MetricsReport(confusion_matrix(predictions, ground_truth), descriptor or {})


def merge_reports(reports: list[MetricsReport], descriptor: dict | None = None) -> MetricsReport:
    """Pool fold reports by summing their confusion matrices."""
    if not reports:
        raise ValueError("nothing to merge")
    return MetricsReport(sum(r.confusion for r in reports), descriptor or {})
