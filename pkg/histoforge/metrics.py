"""
Class-level evaluation metrics.

Every per-class metric is one-vs-rest over the confusion matrix. Undefined
ratios (zero denominator) evaluate to 0 and are flagged on the class entry.
"""

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from .exceptions import MetricsError
from .types import CLASS_NAMES, PathLike


logger = logging.getLogger(__name__)

METRIC_NAMES = ("precision", "recall", "f1", "specificity", "fpr", "fnr", "lift")
AVERAGED = ("precision", "recall", "f1")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    counts: np.ndarray
    class_names: Tuple[str, ...]

    def __post_init__(self):
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise MetricsError(f"Confusion matrix must be {k}x{k}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise MetricsError("Confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def one_vs_rest(self, k: int) -> Tuple[int, int, int, int]:
        """(TP, FP, FN, TN) for class k."""
        tp = int(self.counts[k, k])
        fp = int(self.counts[:, k].sum()) - tp
        fn = int(self.counts[k, :].sum()) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    specificity: float
    fpr: float
    fnr: float
    lift: float
    support: int
    flags: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        data = {name: getattr(self, name) for name in METRIC_NAMES}
        data["support"] = self.support
        data["flags"] = list(self.flags)
        return data


@dataclass(frozen=True)
class EvaluationReport:
    confusion: ConfusionMatrix
    per_class: Dict[str, ClassMetrics]
    accuracy: float
    macro: Dict[str, float]
    weighted: Dict[str, float]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "classes": list(self.confusion.class_names),
            "confusion": self.confusion.counts.astype(int).tolist(),
            "per_class": {name: m.to_dict() for name, m in self.per_class.items()},
            "accuracy": self.accuracy,
            "macro": dict(self.macro),
            "weighted": dict(self.weighted),
            "metadata": dict(self.metadata),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def confusion(predictions: Sequence[int], labels: Sequence[int], k: int,
              class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(predictions) != len(labels):
        raise MetricsError(f"{len(predictions)} predictions but {len(labels)} labels")
    out_of_range = np.concatenate([predictions, labels])
    out_of_range = out_of_range[(out_of_range < 0) | (out_of_range >= k)]
    if len(out_of_range):
        raise MetricsError(f"Class indices must lie in [0, {k}), got {sorted(set(out_of_range.tolist()))}")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    if class_names is None:
        class_names = CLASS_NAMES if k == len(CLASS_NAMES) else tuple(str(i) for i in range(k))
    return ConfusionMatrix(counts=counts, class_names=tuple(class_names))


def _ratio(numerator: float, denominator: float, name: str, flags: List[str]) -> float:
    if denominator == 0:
        flags.append(f"{name}_undefined")
        return 0.0
    return numerator / denominator


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def class_metrics(cm: ConfusionMatrix, k: int) -> ClassMetrics:
    """One-vs-rest metrics of class k; degenerate ratios are 0 and flagged."""
    tp, fp, fn, tn = cm.one_vs_rest(k)
    flags: List[str] = []
    precision = _ratio(tp, tp + fp, "precision", flags)
    recall = _ratio(tp, tp + fn, "recall", flags)
    if precision + recall == 0:
        flags.append("f1_undefined")
    f1 = f1_score(precision, recall)
    specificity = _ratio(tn, tn + fp, "specificity", flags)
    fpr = _ratio(fp, fp + tn, "fpr", flags)
    fnr = _ratio(fn, fn + tp, "fnr", flags)
    prevalence = _ratio(tp + fn, cm.total, "prevalence", flags)
    lift = _ratio(precision, prevalence, "lift", flags)
    if flags:
        logger.warning(f"Degenerate metrics for class {cm.class_names[k]}: {', '.join(flags)}")
    return ClassMetrics(precision, recall, f1, specificity, fpr, fnr, lift, tp + fn, tuple(flags))


def aggregate(cm: ConfusionMatrix, metadata: Optional[Dict[str, Any]] = None) -> EvaluationReport:
    """Per-class metrics, accuracy and macro / support-weighted averages."""
    if cm.total == 0:
        raise MetricsError("Cannot aggregate an empty confusion matrix")
    per_class = {name: class_metrics(cm, k) for k, name in enumerate(cm.class_names)}
    supports = np.array([m.support for m in per_class.values()], dtype=np.float64)
    macro, weighted = {}, {}
    for name in AVERAGED:
        values = np.array([getattr(m, name) for m in per_class.values()])
        macro[name] = float(values.mean())
        weighted[name] = float((values * supports).sum() / supports.sum())
    return EvaluationReport(
        confusion=cm,
        per_class=per_class,
        accuracy=float(np.trace(cm.counts) / cm.total),
        macro=macro,
        weighted=weighted,
        metadata=dict(metadata or {}),
    )


def evaluate(predictions: Sequence[int], labels: Sequence[int], k: int = len(CLASS_NAMES),
             metadata: Optional[Dict[str, Any]] = None) -> EvaluationReport:
    return aggregate(confusion(predictions, labels, k), metadata)


def write_report(report: EvaluationReport, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json(), encoding="utf-8")
    return path


def report_from_dict(data: Dict[str, Any]) -> EvaluationReport:
    try:
        cm = ConfusionMatrix(np.asarray(data["confusion"], dtype=np.int64), tuple(data["classes"]))
        per_class = {
            name: ClassMetrics(**{k: float(m[k]) for k in METRIC_NAMES}, support=int(m["support"]),
                               flags=tuple(m.get("flags", ())))
            for name, m in data["per_class"].items()
        }
        return EvaluationReport(cm, per_class, float(data["accuracy"]), dict(data["macro"]),
                                dict(data["weighted"]), dict(data.get("metadata", {})))
    except (KeyError, TypeError, ValueError) as e:
        raise MetricsError("Malformed evaluation report", str(e)) from None


def load_report(path: PathLike) -> EvaluationReport:
    path = Path(path)
    if not path.exists():
        raise MetricsError(f"Report not found: {path}")
    return report_from_dict(json.loads(path.read_text(encoding="utf-8")))


def report_table(report: EvaluationReport, title: str = "Class-level results") -> Table:
    table = Table(title=title)
    table.add_column("Class", style="bold")
    for name in ("Precision", "Recall", "F1", "Specificity", "FPR", "FNR", "Lift", "Support"):
        table.add_column(name, justify="right")
    for class_name, m in report.per_class.items():
        table.add_row(class_name, *(f"{getattr(m, name):.2f}" for name in METRIC_NAMES), str(m.support))
    table.add_section()
    table.add_row("Macro avg", *(f"{report.macro[n]:.2f}" if n in report.macro else "" for n in METRIC_NAMES), "")
    table.add_row("Weighted avg", *(f"{report.weighted[n]:.2f}" if n in report.weighted else "" for n in METRIC_NAMES),
                  str(report.confusion.total))
    table.caption = f"Accuracy {report.accuracy:.4f}"
    return table


def render_report(report: EvaluationReport, width: int = 120) -> str:
    """Plain-text rendering of the report table."""
    buffer = io.StringIO()
    Console(file=buffer, width=width, color_system=None).print(report_table(report))
    return buffer.getvalue()
