"""Confusion matrix and unweighted metrics (UF1, UAR, ACC)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def confusion_matrix(y_true, y_pred, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


@dataclass
class EvalReport:
    confusion: np.ndarray     # rows = truth, columns = prediction
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    uf1: float
    uar: float
    acc: float
    labels: tuple = ()

    @classmethod
    def from_confusion(cls, cm, labels=()):
        """Per-class scores and their unweighted means.

        A class that never occurs and is never predicted has no defined F1 and
        is left out of UF1; a class with no support is left out of UAR.
        """
        cm = np.asarray(cm, dtype=np.int64)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or (cm < 0).any():
            raise ValueError("confusion matrix must be square and non-negative")
        tp = np.diag(cm).astype(float)
        support = cm.sum(axis=1).astype(float)
        predicted = cm.sum(axis=0).astype(float)
        with np.errstate(divide="ignore", invalid="ignore"):
            precision = np.where(predicted > 0, tp / predicted, 0.0)
            recall = np.where(support > 0, tp / support, 0.0)
            denom = support + predicted            # 2TP + FP + FN
            f1 = np.where(denom > 0, 2 * tp / denom, 0.0)
        total = cm.sum()
        return cls(
            confusion=cm, precision=precision, recall=recall, f1=f1,
            uf1=float(f1[denom > 0].mean()) if (denom > 0).any() else 0.0,
            uar=float(recall[support > 0].mean()) if (support > 0).any() else 0.0,
            acc=float(tp.sum() / total) if total else 0.0,
            labels=tuple(labels))

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes, labels=()):
        return cls.from_confusion(confusion_matrix(y_true, y_pred, n_classes), labels)

    def summary(self):
        return {"uf1": self.uf1, "uar": self.uar, "acc": self.acc}

    def write_confusion_csv(self, path):
        names = list(self.labels) or [str(i) for i in range(len(self.confusion))]
        with open(path, "w") as fh:
            fh.write("truth," + ",".join(names) + "\n")
            for name, row in zip(names, self.confusion):
                fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
