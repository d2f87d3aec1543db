"""Confusion matrices, per-class scores and report files.

Report files written by :func:`render_report`:

``confusion_matrix.csv``
    header ``true\\pred,<class names>``; one row per true class.
``metrics.json``
    accuracy, per-class and macro/weighted precision/recall/f1/support at full
    float precision, plus composition, config digest and flagged warnings.
``metrics.txt``
    the same scores at 4 decimals, for reading.
``training_curves.csv``
    ``epoch,train_loss,train_accuracy,val_loss,val_accuracy``, one row per epoch.
``comparison.csv`` (from :func:`render_comparison`)
    ``metric,before,after,delta`` with ``delta = after - before``.
"""

import csv
import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UsageError

METRIC_NAMES = ("precision", "recall", "f1")


class UndefinedMetricWarning(UserWarning):
    """A precision/recall denominator was zero and the score was set to 0."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list

    @property
    def k(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def one_vs_rest(self, c):
        """``(tp, fp, fn, tn)`` treating class ``c`` as positive."""
        cm = self.counts
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum()) - tp
        fn = int(cm[c, :].sum()) - tp
        return tp, fp, fn, self.total - tp - fp - fn


def confusion(y_true, y_pred, k, class_names=None):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise UsageError(f"{len(y_true)} true labels but {len(y_pred)} predictions")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"{name} contains labels outside [0, {k})")
    counts = np.bincount(y_true * k + y_pred, minlength=k * k).reshape(k, k)
    names = list(class_names) if class_names else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, names)


def accuracy(cm):
    if cm.total == 0:
        raise UsageError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def _ratio(num, den, what):
    if den == 0:
        warnings.warn(f"{what} is undefined (zero denominator); reported as 0", UndefinedMetricWarning)
        return 0.0
    return num / den


def precision(cm, c):
    tp, fp, _, _ = cm.one_vs_rest(c)
    return _ratio(tp, tp + fp, f"precision of class {c}")


def recall(cm, c):
    tp, _, fn, _ = cm.one_vs_rest(c)
    return _ratio(tp, tp + fn, f"recall of class {c}")


def f1(p, r):
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


def per_class(cm):
    out = []
    for c in range(cm.k):
        p, r = precision(cm, c), recall(cm, c)
        out.append(ClassMetrics(p, r, f1(p, r), int(cm.counts[c].sum())))
    return out


def aggregate(metrics, mode="macro"):
    """Unweighted (``macro``) or support-weighted (``weighted``) mean."""
    if not metrics:
        raise UsageError("aggregate of an empty list")
    support = sum(m.support for m in metrics)
    if mode == "macro":
        w = [1.0 / len(metrics)] * len(metrics)
    elif mode == "weighted":
        if support == 0:
            raise UsageError("weighted aggregate needs nonzero total support")
        w = [m.support / support for m in metrics]
    else:
        raise UsageError(f"unknown aggregate mode {mode!r}")
    vals = {name: sum(wi * getattr(m, name) for wi, m in zip(w, metrics)) for name in METRIC_NAMES}
    return ClassMetrics(vals["precision"], vals["recall"], vals["f1"], support)


# ---------------------------------------------------------------- reports


@dataclass
class EvaluationReport:
    label: str
    confusion: ConfusionMatrix
    accuracy: float
    per_class: list
    macro: ClassMetrics
    weighted: ClassMetrics
    history: list = field(default_factory=list)  # epoch dicts
    config_digest: str = ""
    composition: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def summary(self):
        """Flat ``name -> value`` view used for comparisons."""
        out = {"accuracy": self.accuracy}
        for agg in ("macro", "weighted"):
            for name in METRIC_NAMES:
                out[f"{agg}_{name}"] = getattr(getattr(self, agg), name)
        for cname, m in zip(self.confusion.class_names, self.per_class):
            for name in METRIC_NAMES:
                out[f"{cname}_{name}"] = getattr(m, name)
        return out

    def to_dict(self):
        return {
            "label": self.label,
            "class_names": self.confusion.class_names,
            "confusion": self.confusion.counts.tolist(),
            "accuracy": self.accuracy,
            "per_class": {n: asdict(m) for n, m in zip(self.confusion.class_names, self.per_class)},
            "macro": asdict(self.macro),
            "weighted": asdict(self.weighted),
            "composition": self.composition,
            "config_digest": self.config_digest,
            "warnings": self.warnings,
        }


def evaluate(y_true, y_pred, class_names, label="", history=None, config_digest="", composition=None):
    """Build an :class:`EvaluationReport`; zero-denominator warnings are recorded in it."""
    cm = confusion(y_true, y_pred, len(class_names), class_names)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UndefinedMetricWarning)
        pcs = per_class(cm)
    msgs = [str(w.message) for w in caught if issubclass(w.category, UndefinedMetricWarning)]
    return EvaluationReport(
        label=label,
        confusion=cm,
        accuracy=accuracy(cm),
        per_class=pcs,
        macro=aggregate(pcs, "macro"),
        weighted=aggregate(pcs, "weighted"),
        history=list(history or []),
        config_digest=config_digest,
        composition=dict(composition or {}),
        warnings=msgs,
    )


CURVE_FIELDS = ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy")


def _fmt(v):
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def render_report(report, out_dir):
    """Write the report files into ``out_dir`` and return their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    p = os.path.join(out_dir, "confusion_matrix.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + report.confusion.class_names)
        for name, row in zip(report.confusion.class_names, report.confusion.counts.tolist()):
            w.writerow([name] + row)
    paths["confusion"] = p

    p = os.path.join(out_dir, "metrics.json")
    with open(p, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["metrics"] = p

    p = os.path.join(out_dir, "metrics.txt")
    with open(p, "w") as fh:
        fh.write(format_table(report))
    paths["metrics_text"] = p

    p = os.path.join(out_dir, "training_curves.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for rec in report.history:
            w.writerow([_fmt(rec.get(f)) for f in CURVE_FIELDS])
    paths["curves"] = p
    return paths


def format_table(report):
    lines = [f"{report.label or 'evaluation'}", f"accuracy  {report.accuracy:.4f}", "",
             f"{'class':<16}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>10}"]
    rows = list(zip(report.confusion.class_names, report.per_class))
    rows += [("macro avg", report.macro), ("weighted avg", report.weighted)]
    for name, m in rows:
        lines.append(f"{name:<16}{m.precision:>10.4f}{m.recall:>10.4f}{m.f1:>10.4f}{m.support:>10d}")
    return "\n".join(lines) + "\n"


def load_metrics(path):
    with open(path) as fh:
        return json.load(fh)


def load_curves(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (None if v == "" else int(v) if k == "epoch" else float(v)) for k, v in r.items()}
            for r in rows]


def comparison(before, after):
    """Rows ``(metric, before, after, after - before)`` over the shared summary keys."""
    b, a = before.summary(), after.summary()
    return [(k, b[k], a[k], a[k] - b[k]) for k in b if k in a]


def render_comparison(before, after, path):
    rows = comparison(before, after)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "before", "after", "delta"])
        for name, bv, av, d in rows:
            w.writerow([name, repr(bv), repr(av), repr(d)])
    return rows
