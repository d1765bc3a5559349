"""Confusion matrix, one-vs-rest metrics and results tables."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES


class EvaluationError(ValueError):
    pass


def confusion_matrix(preds, labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """``counts[true, predicted]``."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise EvaluationError(f"preds and labels must be equal-length vectors, got {preds.shape} and {labels.shape}")
    if preds.size == 0:
        raise EvaluationError("cannot build a confusion matrix from zero samples")
    for name, v in (("preds", preds), ("labels", labels)):
        if not np.issubdtype(v.dtype, np.integer) or v.min() < 0 or v.max() >= num_classes:
            raise EvaluationError(f"{name} must hold class ids in 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _div(a, b):
    return a / b if b else 0.0


@dataclass
class EvalReport:
    cm: np.ndarray
    accuracy: float
    per_class: dict[int, tuple[float, float, float]]
    macro: tuple[float, float, float]
    weighted: tuple[float, float, float]
    loss: float = float("nan")
    model_tag: str = ""
    augmentation_tag: str = "none"
    extra: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        if self.augmentation_tag in ("", "none"):
            return self.model_tag
        return f"{self.model_tag} + {self.augmentation_tag}"

    def to_dict(self) -> dict:
        prf = ("precision", "recall", "f1")
        return {
            "model_tag": self.model_tag,
            "augmentation_tag": self.augmentation_tag,
            "accuracy": self.accuracy,
            "loss": self.loss,
            "macro": dict(zip(prf, self.macro)),
            "weighted": dict(zip(prf, self.weighted)),
            "per_class": {CLASS_NAMES[c]: dict(zip(prf, v)) for c, v in self.per_class.items()},
            "confusion_matrix": self.cm.tolist(),
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        prf = ("precision", "recall", "f1")
        return cls(
            cm=np.asarray(d["confusion_matrix"], dtype=np.int64),
            accuracy=d["accuracy"],
            per_class={CLASS_NAMES.index(k): tuple(v[m] for m in prf) for k, v in d["per_class"].items()},
            macro=tuple(d["macro"][m] for m in prf),
            weighted=tuple(d["weighted"][m] for m in prf),
            loss=float("nan") if d["loss"] is None else d["loss"],
            model_tag=d["model_tag"],
            augmentation_tag=d["augmentation_tag"],
            extra=d.get("extra", {}),
        )


def metrics_from_cm(cm, loss: float = float("nan"), model_tag: str = "", augmentation_tag: str = "none") -> EvalReport:
    """One-vs-rest precision/recall/F1 per class, macro and support-weighted averages.

    0/0 evaluates to 0 so classes absent from both truth and predictions score 0.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total <= 0:
        raise EvaluationError("confusion matrix is empty")
    k = cm.shape[0]
    per_class = {}
    for c in range(k):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum()) - tp
        fn = int(cm[c, :].sum()) - tp
        p = _div(tp, tp + fp)
        r = _div(tp, tp + fn)
        per_class[c] = (p, r, _div(2 * p * r, p + r))
    arr = np.array([per_class[c] for c in range(k)])
    support = cm.sum(axis=1) / total
    return EvalReport(
        cm=cm,
        accuracy=float(np.trace(cm)) / total,
        per_class=per_class,
        macro=tuple(float(v) for v in arr.mean(axis=0)),
        weighted=tuple(float(v) for v in support @ arr),
        loss=loss,
        model_tag=model_tag,
        augmentation_tag=augmentation_tag,
    )


def micro_scores(cm) -> tuple[float, float]:
    cm = np.asarray(cm)
    tp = np.trace(cm)
    fp = cm.sum() - tp  # every off-diagonal count is one FP and one FN
    fn = cm.sum() - tp
    return tp / (tp + fp), tp / (tp + fn)


COLUMNS = ("Accuracy", "Loss Value", "F1-score", "Recall", "Precision")


def _fmt(v, digits):
    return "nan" if v is None or not np.isfinite(v) else f"{v:.{digits}f}"


def render_report(reports, format: str = "table") -> str:
    """Table-3 style rows (accuracy/loss to 4 places, F1/recall/precision to 2) or JSON."""
    reports = list(reports)
    if not reports:
        raise EvaluationError("need at least one report")
    if format == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2, allow_nan=True)
    if format != "table":
        raise EvaluationError(f"unknown format {format!r}")
    lines = [
        "| DL Models | " + " | ".join(COLUMNS) + " |",
        "|---|" + "---:|" * len(COLUMNS),
    ]
    for r in reports:
        p, rec, f1 = r.macro
        cells = [_fmt(r.accuracy, 4), _fmt(r.loss, 4), _fmt(f1, 2), _fmt(rec, 2), _fmt(p, 2)]
        lines.append(f"| {r.label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_metrics(report: EvalReport, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    with open(out_dir / "confusion_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(CLASS_NAMES))
        for c, row in enumerate(report.cm):
            w.writerow([CLASS_NAMES[c]] + [int(v) for v in row])


def read_metrics(path) -> EvalReport:
    with open(path) as fh:
        return EvalReport.from_dict(json.load(fh))
