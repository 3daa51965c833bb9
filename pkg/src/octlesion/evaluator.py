"""Lesion-level evaluation, confusion-matrix metrics and result tables.

A lesion's invasive probability is the mean softmax probability over its
images; it is predicted invasive when that mean is >= 0.5.  Per-fold
metrics are averaged over folds (not pooled).  All rates are percentages.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .dataset import DatasetManifest, LesionLabel, LesionRecord
from .models import BackboneId, ClassifierModel
from .pipeline import PreprocessSpec, preprocess
from .splits import Fold

THRESHOLD = 0.5
METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "f1_invasive", "f1_macro")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, truth: Iterable[int], predicted: Iterable[int]) -> "ConfusionMatrix":
        t = np.asarray(list(truth), dtype=int)
        p = np.asarray(list(predicted), dtype=int)
        return cls(
            int(((t == 1) & (p == 1)).sum()),
            int(((t == 0) & (p == 1)).sum()),
            int(((t == 0) & (p == 0)).sum()),
            int(((t == 1) & (p == 0)).sum()),
        )

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    sensitivity: float
    specificity: float
    f1_invasive: float
    f1_macro: float
    # names of quantities whose denominator was zero (reported as 0)
    degenerate: tuple[str, ...] = ()

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return tuple(getattr(self, n) for n in METRIC_NAMES)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degenerate"] = list(self.degenerate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(*(float(d[n]) for n in METRIC_NAMES), tuple(d.get("degenerate", ())))


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics_from_confusion(cm: ConfusionMatrix) -> Metrics:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    flags: list[str] = []
    acc = (cm.tp + cm.tn) / cm.total
    sens = _ratio(cm.tp, cm.tp + cm.fn, "sensitivity", flags)
    spec = _ratio(cm.tn, cm.tn + cm.fp, "specificity", flags)
    if cm.tp + cm.fp == 0:
        flags.append("precision_invasive")
    if cm.tn + cm.fn == 0:
        flags.append("precision_benign")
    f1_inv = _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, "f1_invasive", flags)
    f1_ben = _ratio(2 * cm.tn, 2 * cm.tn + cm.fn + cm.fp, "f1_benign", flags)
    return Metrics(
        100 * acc, 100 * sens, 100 * spec, 100 * f1_inv, 100 * (f1_inv + f1_ben) / 2, tuple(flags)
    )


@dataclass
class FoldResult:
    fold_index: int
    per_image_probs: dict[str, float]
    per_lesion_prob: dict[str, float]
    per_lesion_pred: dict[str, LesionLabel]
    lesion_confusion: ConfusionMatrix
    image_confusion: ConfusionMatrix = field(default_factory=ConfusionMatrix)

    def to_dict(self) -> dict:
        return {
            "fold_index": self.fold_index,
            "per_image_probs": self.per_image_probs,
            "per_lesion_prob": self.per_lesion_prob,
            "per_lesion_pred": {k: v.value for k, v in self.per_lesion_pred.items()},
            "lesion_confusion": asdict(self.lesion_confusion),
            "image_confusion": asdict(self.image_confusion),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        return cls(
            int(d["fold_index"]),
            {k: float(v) for k, v in d["per_image_probs"].items()},
            {k: float(v) for k, v in d["per_lesion_prob"].items()},
            {k: LesionLabel(v) for k, v in d["per_lesion_pred"].items()},
            ConfusionMatrix(**d["lesion_confusion"]),
            ConfusionMatrix(**d.get("image_confusion", {})),
        )


@dataclass
class MetricsReport:
    per_fold: list[Metrics]
    mean: Metrics
    meta: dict = field(default_factory=dict)
    image_level_mean: Metrics | None = None

    @property
    def label(self) -> str:
        if "label" in self.meta:
            return self.meta["label"]
        try:
            name = BackboneId(self.meta["backbone"]).display_name
        except (KeyError, ValueError):
            name = str(self.meta.get("backbone", "model"))
        return f"{name} {self.meta.get('regime', '')}".strip()

    def to_dict(self) -> dict:
        return {
            "per_fold": [m.to_dict() for m in self.per_fold],
            "mean": self.mean.to_dict(),
            "image_level_mean": self.image_level_mean.to_dict() if self.image_level_mean else None,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        img = d.get("image_level_mean")
        return cls(
            [Metrics.from_dict(m) for m in d["per_fold"]],
            Metrics.from_dict(d["mean"]),
            dict(d.get("meta", {})),
            Metrics.from_dict(img) if img else None,
        )

    @classmethod
    def from_values(cls, label: str, accuracy, sensitivity, specificity, f1) -> "MetricsReport":
        """A report carrying externally published mean values (no per-fold detail)."""
        m = Metrics(accuracy, sensitivity, specificity, f1, f1)
        return cls([], m, {"label": label})


def predict_images(model: ClassifierModel, images: Sequence[np.ndarray], pre: PreprocessSpec, batch_size: int = 25) -> np.ndarray:
    """Invasive-class softmax probability for each image (evaluation mode)."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(np.stack([preprocess(im, pre) for im in images[start : start + batch_size]]))
            out.append(torch.softmax(model(x), dim=1)[:, 1].double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def predict_lesion(model: ClassifierModel, lesion: LesionRecord, pre: PreprocessSpec, store) -> float:
    if not lesion.images:
        raise ValueError(f"lesion {lesion.lesion_id} has no images")
    probs = predict_images(model, [store.read(im) for im in lesion.images], pre)
    return float(probs.mean())


def evaluate_fold(model: ClassifierModel, manifest: DatasetManifest, fold: Fold, pre: PreprocessSpec, store, threshold: float = THRESHOLD) -> FoldResult:
    lesions = manifest.by_id()
    image_probs: dict[str, float] = {}
    lesion_prob: dict[str, float] = {}
    lesion_pred: dict[str, LesionLabel] = {}
    truth, pred, img_truth, img_pred = [], [], [], []
    for lid in fold.validation:
        lesion = lesions[lid]
        probs = predict_images(model, [store.read(im) for im in lesion.images], pre)
        for im, p in zip(lesion.images, probs):
            image_probs[im.image_id] = float(p)
            img_truth.append(lesion.label.index)
            img_pred.append(int(p >= threshold))
        lesion_prob[lid] = float(probs.mean())
        lesion_pred[lid] = LesionLabel.from_index(int(lesion_prob[lid] >= threshold))
        truth.append(lesion.label.index)
        pred.append(lesion_pred[lid].index)
    return FoldResult(
        fold.fold_index, image_probs, lesion_prob, lesion_pred,
        ConfusionMatrix.from_predictions(truth, pred),
        ConfusionMatrix.from_predictions(img_truth, img_pred),
    )


def mean_metrics(per_fold: Sequence[Metrics]) -> Metrics:
    if not per_fold:
        raise ValueError("no folds to average")
    arr = np.array([m.as_tuple() for m in per_fold], dtype=float)
    flags = sorted({f for m in per_fold for f in m.degenerate})
    return Metrics(*(float(v) for v in arr.mean(axis=0)), tuple(flags))


def aggregate(folds: Sequence[FoldResult], meta: dict | None = None) -> MetricsReport:
    """Per-fold lesion-level metrics and their arithmetic mean over folds."""
    if not folds:
        raise ValueError("no fold results to aggregate")
    ordered = sorted(folds, key=lambda f: f.fold_index)
    per_fold = [metrics_from_confusion(f.lesion_confusion) for f in ordered]
    image_level = [metrics_from_confusion(f.image_confusion) for f in ordered if f.image_confusion.total]
    return MetricsReport(
        per_fold,
        mean_metrics(per_fold),
        dict(meta or {}),
        mean_metrics(image_level) if image_level else None,
    )


@dataclass(frozen=True)
class ReferenceRow:
    name: str
    accuracy: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    f1: float | None = None


# Average human rater from the clinical reader study the method is compared against.
HUMAN_RATER = ReferenceRow("Human Rater", None, 81.50, 72.50, None)

TABLE_HEADER = ("Model", "Accuracy", "Sensitivity", "Specificity", "F1-Score")


def _cell(v: float | None) -> str:
    return "-" if v is None else f"{v:.2f}"


def render_report(
    reports: Sequence[MetricsReport],
    reference_rows: Sequence[ReferenceRow] = (),
    f1: str = "macro",
) -> str:
    """Plain-text table, one row per report then the reference rows.

    Cells are separated by two spaces and printed with two decimals; ``f1``
    selects the F1 column (``macro`` or ``invasive``).
    """
    if f1 not in ("macro", "invasive"):
        raise ValueError("f1 must be 'macro' or 'invasive'")
    lines = ["  ".join(TABLE_HEADER)]
    for rep in reports:
        if rep.meta.get("failed"):
            lines.append(f"{rep.label}  FAILED")
            continue
        m = rep.mean
        f1_value = m.f1_macro if f1 == "macro" else m.f1_invasive
        lines.append("  ".join([rep.label] + [_cell(v) for v in (m.accuracy, m.sensitivity, m.specificity, f1_value)]))
    for ref in reference_rows:
        lines.append("  ".join([ref.name] + [_cell(v) for v in (ref.accuracy, ref.sensitivity, ref.specificity, ref.f1)]))
    return "\n".join(lines) + "\n"


def write_report(
    reports: Sequence[MetricsReport],
    out_dir: str | os.PathLike,
    reference_rows: Sequence[ReferenceRow] = (),
    f1: str = "macro",
    stem: str = "report",
) -> str:
    """Write ``<stem>.txt`` (table) and ``<stem>.json`` (all reports) and return the table."""
    out = Path(out_dir)
    table = render_report(reports, reference_rows, f1)
    (out / f"{stem}.txt").write_text(table)
    payload = {
        "reports": [r.to_dict() for r in reports],
        "reference_rows": [asdict(r) for r in reference_rows],
        "f1_column": f1,
    }
    (out / f"{stem}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return table
