"""Pixel confusion counts, overlap metrics and subset-stratified test reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .annotation import DatasetManifest, as_dense_mask, read_mask
from .errors import ContractError, IncompleteError, ShapeError

CLASSES = (0, 1, 2)
DEBRIS_CLASSES = (1, 2)
CLASS_NAMES = {0: "no debris", 1: "low-density", 2: "high-density"}


class Score(float):
    """A metric value that remembers whether its denominator was empty."""

    vacuous: bool

    def __new__(cls, value: float, vacuous: bool = False):
        obj = super().__new__(cls, value)
        obj.vacuous = vacuous
        return obj

    def __repr__(self):
        return f"Score({float(self)!r}{', vacuous' if self.vacuous else ''})"


def _ratio(num: int, den: int) -> Score:
    if den == 0:
        return Score(1.0, vacuous=True)
    return Score(num / den)


@dataclass
class ConfusionCounts:
    """One-vs-rest pixel counts per class, indexed by class value."""

    tp: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    fn: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    tn: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def to_dict(self) -> dict:
        return {
            str(c): {"tp": int(self.tp[c]), "fp": int(self.fp[c]), "fn": int(self.fn[c]), "tn": int(self.tn[c])}
            for c in CLASSES
        }


def confusion(pred, gt) -> ConfusionCounts:
    pred = as_dense_mask(pred, "prediction")
    gt = as_dense_mask(gt, "ground truth")
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    joint = np.bincount(gt.ravel().astype(np.int64) * 3 + pred.ravel(), minlength=9).reshape(3, 3)
    tp = np.diag(joint).astype(np.int64)
    fp = joint.sum(axis=0) - tp
    fn = joint.sum(axis=1) - tp
    tn = joint.sum() - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _class_list(classes) -> list[int]:
    classes = [classes] if isinstance(classes, (int, np.integer)) else list(classes)
    if not classes:
        raise ContractError("class set must not be empty")
    bad = [c for c in classes if c not in CLASSES]
    if bad:
        raise ContractError(f"invalid classes {bad}")
    return classes


def dice(counts: ConfusionCounts, classes=DEBRIS_CLASSES) -> Score:
    """Micro-averaged Dice over ``classes``; 1 (vacuous) when nothing is predicted or present."""
    cl = _class_list(classes)
    tp, fp, fn = (int(a[cl].sum()) for a in (counts.tp, counts.fp, counts.fn))
    return _ratio(2 * tp, 2 * tp + fp + fn)


def iou(counts: ConfusionCounts, classes=DEBRIS_CLASSES) -> Score:
    cl = _class_list(classes)
    tp, fp, fn = (int(a[cl].sum()) for a in (counts.tp, counts.fp, counts.fn))
    return _ratio(tp, tp + fp + fn)


def precision(counts: ConfusionCounts, cls: int) -> Score:
    (c,) = _class_list([cls])
    return _ratio(int(counts.tp[c]), int(counts.tp[c] + counts.fp[c]))


def recall(counts: ConfusionCounts, cls: int) -> Score:
    (c,) = _class_list([cls])
    return _ratio(int(counts.tp[c]), int(counts.tp[c] + counts.fn[c]))


def sum_counts(items: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for c in items:
        total = total + c
    return total


# ---------------------------------------------------------------------------
# test-set report


def _metric(value: Score) -> dict:
    return {"value": float(value), "vacuous": bool(getattr(value, "vacuous", False))}


@dataclass
class SubsetReport:
    name: str
    n_samples: int
    micro: dict[str, Score]
    macro: dict[str, float]
    counts: ConfusionCounts

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "micro": {k: _metric(v) for k, v in self.micro.items()},
            "macro": {k: float(v) for k, v in self.macro.items()},
            "counts": self.counts.to_dict(),
        }


@dataclass
class MetricsReport:
    subsets: dict[str, SubsetReport]

    def to_dict(self) -> dict:
        return {"schema_version": 1, "subsets": {k: v.to_dict() for k, v in self.subsets.items()}}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    def to_table(self, aggregation: str = "micro") -> str:
        rows = [("Subset", "Metric", "Value")]
        for name, sub in self.subsets.items():
            label = f"{name} (n={sub.n_samples})"
            values = sub.micro if aggregation == "micro" else sub.macro
            for metric, value in values.items():
                flag = " *" if getattr(value, "vacuous", False) else ""
                rows.append((label, metric, f"{float(value):.2f}{flag}"))
                label = ""
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.append(f"({aggregation} aggregation; * = vacuous, empty denominator)")
        return "\n".join(lines) + "\n"


def _subset_report(name, ids, per_image, metric_spec) -> SubsetReport:
    counts = sum_counts(per_image[i] for i in ids)
    micro = {label: fn(counts) for label, fn in metric_spec}
    macro = {}
    for label, fn in metric_spec:
        vals = [float(fn(per_image[i])) for i in ids]
        macro[label] = float(np.mean(vals)) if vals else 1.0
    return SubsetReport(name, len(ids), micro, macro, counts)


POSITIVE_METRICS = [
    ("Dice", lambda c: dice(c, DEBRIS_CLASSES)),
    ("IoU", lambda c: iou(c, DEBRIS_CLASSES)),
    ("Recall [low-density]", lambda c: recall(c, 1)),
    ("Recall [high-density]", lambda c: recall(c, 2)),
    ("Precision [low-density]", lambda c: precision(c, 1)),
    ("Precision [high-density]", lambda c: precision(c, 2)),
]
NEGATIVE_METRICS = [
    ("Dice", lambda c: dice(c, (0,))),
    ("IoU", lambda c: iou(c, (0,))),
    ("Recall [no debris]", lambda c: recall(c, 0)),
]


def evaluate_test_set(
    manifest: DatasetManifest,
    predictions: Mapping[str, np.ndarray],
    ground_truth: Mapping[str, np.ndarray] | None = None,
) -> MetricsReport:
    """Score test-split predictions separately on debris-positive and debris-free images.

    Ground truth defaults to each record's consensus mask on disk. Headline
    numbers pool pixels across the subset; per-image means are in ``macro``.
    """
    test = sorted(manifest.split("test"), key=lambda r: r.image_id)
    missing = [r.image_id for r in test if r.image_id not in predictions]
    if missing:
        raise IncompleteError("missing predictions for test images", missing)
    unclassified = [r.image_id for r in test if r.is_positive is None]
    if unclassified:
        raise IncompleteError("test records without consensus", unclassified)

    per_image = {}
    for rec in test:
        gt = ground_truth[rec.image_id] if ground_truth is not None else read_mask(rec.consensus_path)
        per_image[rec.image_id] = confusion(predictions[rec.image_id], gt)

    pos = [r.image_id for r in test if r.is_positive]
    neg = [r.image_id for r in test if not r.is_positive]
    return MetricsReport(
        {
            "debris-positive": _subset_report("debris-positive", pos, per_image, POSITIVE_METRICS),
            "debris-free": _subset_report("debris-free", neg, per_image, NEGATIVE_METRICS),
        }
    )
