"""Confusion matrix accumulation and the summary figures built on it.

Class ids run 1..n_classes everywhere; 0 is reserved for unlabeled
pixels and is rejected here. With M_i correct out of N_i reference
samples per class and N total:

    AA    = mean over classes of M_i / N_i
    OA    = sum M_i / N
    Kappa = (OA - P) / (1 - P),  P = sum_i row_i * col_i / N^2
    F1_i  = 2 TP_i / (2 TP_i + FP_i + FN_i)

The headline F1 is the squared mean of the per-class F1 scores; the
plain mean is reported alongside as f1_macro.
"""

from __future__ import annotations

import warnings

import numpy as np

from .tensor import NumericalError


class ConfusionMatrix:
    """Rows are reference classes, columns predictions."""

    def __init__(self, n_classes):
        if n_classes < 1:
            raise ValueError(f"need at least one class, got {n_classes}")
        self.n_classes = int(n_classes)
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    @classmethod
    def from_predictions(cls, reference, predicted, n_classes):
        cm = cls(n_classes)
        cm.accumulate(reference, predicted)
        return cm

    def accumulate(self, reference, predicted):
        reference = np.atleast_1d(np.asarray(reference))
        predicted = np.atleast_1d(np.asarray(predicted))
        if reference.shape != predicted.shape:
            raise ValueError(f"shapes disagree: {reference.shape} vs {predicted.shape}")
        for name, arr in (("reference", reference), ("predicted", predicted)):
            if arr.size and (arr.min() < 1 or arr.max() > self.n_classes):
                raise ValueError(f"{name} ids must lie in 1..{self.n_classes} (0 is unlabeled)")
        np.add.at(self.counts, (reference - 1, predicted - 1), 1)

    def merge(self, other):
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge matrices with different class counts")
        out = ConfusionMatrix(self.n_classes)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge

    @property
    def total(self):
        return int(self.counts.sum())

    def per_class_accuracy(self):
        """M_i / N_i; every class must have reference samples."""
        row = self.counts.sum(axis=1)
        empty = np.flatnonzero(row == 0)
        if empty.size:
            raise ValueError(f"classes without reference samples: {(empty + 1).tolist()}")
        return np.diag(self.counts) / row

    def overall_accuracy(self):
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts) / self.total)

    def average_accuracy(self):
        return float(self.per_class_accuracy().mean())

    def kappa(self):
        """Agreement beyond chance; undefined when chance agreement is 1.

        (OA - P) / (1 - P) with chance P from the marginals, evaluated as
        one exact integer ratio (n*trace - sum row*col) / (n^2 - sum row*col)
        so small examples come out correctly rounded.
        """
        n = self.total
        if n == 0:
            raise ValueError("empty confusion matrix")
        row = self.counts.sum(axis=1)
        col = self.counts.sum(axis=0)
        agree = int((row * col).sum())
        if agree >= n * n:
            raise NumericalError("chance agreement is 1; kappa is undefined")
        return (n * int(np.trace(self.counts)) - agree) / (n * n - agree)

    def f1_per_class(self):
        """2TP/(2TP+FP+FN) per class; absent classes score 0 with a warning."""
        tp = np.diag(self.counts).astype(np.float64)
        row = self.counts.sum(axis=1)
        col = self.counts.sum(axis=0)
        denom = 2 * tp + (col - tp) + (row - tp)
        absent = denom == 0
        if np.any(absent):
            warnings.warn(
                f"classes {(np.flatnonzero(absent) + 1).tolist()} have no reference or "
                "predicted samples; their F1 is 0"
            )
        return np.where(absent, 0.0, 2 * tp / np.where(absent, 1, denom))

    def f1(self):
        """Headline score: the squared mean of per-class F1."""
        return float(self.f1_per_class().mean() ** 2)

    def f1_macro(self):
        return float(self.f1_per_class().mean())


def summarize(cm, class_names=None):
    """All report figures as one flat dict."""
    names = class_names or tuple(f"class{i}" for i in range(1, cm.n_classes + 1))
    if len(names) != cm.n_classes:
        raise ValueError(f"{cm.n_classes} classes but {len(names)} names")
    per_class = cm.per_class_accuracy()
    out = {}
    for name, acc in zip(names, per_class):
        out[f"acc/{name}"] = float(acc)
    out["aa"] = cm.average_accuracy()
    out["oa"] = cm.overall_accuracy()
    out["kappa"] = cm.kappa()
    out["f1"] = cm.f1()
    out["f1_macro"] = cm.f1_macro()
    return out


def format_report(cm, class_names=None, title="classification report"):
    """Human-readable table: one accuracy column per class, then AA, OA,
    Kappa and F1 (n_classes + 4 numeric columns)."""
    names = class_names or tuple(f"class{i}" for i in range(1, cm.n_classes + 1))
    stats = summarize(cm, names)
    headers = list(names) + ["AA", "OA", "Kappa", "F1"]
    values = [stats[f"acc/{n}"] for n in names] + [
        stats["aa"], stats["oa"], stats["kappa"], stats["f1"],
    ]
    cells = [f"{v:.4f}" for v in values]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    lines = [
        title,
        "  ".join(h.rjust(w) for h, w in zip(headers, widths)),
        "  ".join(c.rjust(w) for c, w in zip(cells, widths)),
        f"f1_macro {stats['f1_macro']:.4f}  samples {cm.total}",
    ]
    return "\n".join(lines)


def format_key_values(stats):
    """Machine-readable `key = value` lines, keys in insertion order."""
    lines = [f"{k} = {v:.10g}" if isinstance(v, float) else f"{k} = {v}" for k, v in stats.items()]
    return "\n".join(lines) + "\n"
