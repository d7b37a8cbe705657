"""Top-1 accuracy (overall and per shot group) and intra-class distance."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .data import ClassGroups

METRICS_SCHEMA = {
    "type": "object",
    "required": ["epoch", "overall_top1", "group_top1", "per_class_top1", "per_class_icd", "avg_icd"],
    "properties": {
        "epoch": {"type": "integer"},
        "overall_top1": {"type": "number", "minimum": 0, "maximum": 1},
        "group_top1": {
            "type": "object",
            "additionalProperties": False,
            "properties": {g: {"type": "number", "minimum": 0, "maximum": 1} for g in ("many", "medium", "few")},
        },
        "per_class_top1": {"type": "array", "items": {"type": ["number", "null"]}},
        "per_class_icd": {"type": "array", "items": {"type": ["number", "null"], "minimum": 0}},
        "avg_icd": {"type": ["number", "null"], "minimum": 0},
        "rare_avg_icd": {"type": ["number", "null"], "minimum": 0},
    },
}


def top1_accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if len(y) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    return float(np.mean(p == y))


def per_class_accuracy(predictions, labels, num_classes: int) -> list[float | None]:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    out = []
    for c in range(num_classes):
        m = y == c
        out.append(float(np.mean(p[m] == c)) if m.any() else None)
    return out


def grouped_accuracy(predictions, labels, groups: ClassGroups) -> dict[str, float]:
    """Accuracy over samples whose true class is in each group; empty groups are omitted."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    out = {}
    for name, members in groups.items():
        m = np.isin(y, members)
        if m.any():
            out[name] = float(np.mean(p[m] == y[m]))
    return out


def intra_class_distance(features, labels, num_classes: int | None = None) -> tuple[list[float | None], float]:
    """Mean Euclidean distance of each class's samples to its centroid, and their average.

    Classes absent from ``labels`` get ``None`` and are left out of the average.
    """
    f = np.ascontiguousarray(features, dtype=np.float64)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    if f.size == 0 or len(y) == 0:
        raise ValueError("empty feature set")
    f = f.reshape(len(f), -1)
    k = int(num_classes if num_classes is not None else y.max() + 1)
    per = np.asarray(_kernels.icd(f, y, k))
    present = ~np.isnan(per)
    per_list = [float(v) if ok else None for v, ok in zip(per, present)]
    return per_list, float(per[present].mean())


@dataclass
class MetricsReport:
    epoch: int
    overall_top1: float
    group_top1: dict[str, float]
    per_class_top1: list[float | None]
    per_class_icd: list[float | None]
    avg_icd: float | None
    rare_avg_icd: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "epoch": self.epoch,
            "overall_top1": self.overall_top1,
            "group_top1": dict(self.group_top1),
            "per_class_top1": list(self.per_class_top1),
            "per_class_icd": list(self.per_class_icd),
            "avg_icd": self.avg_icd,
            "rare_avg_icd": self.rare_avg_icd,
        }
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        known = {"epoch", "overall_top1", "group_top1", "per_class_top1", "per_class_icd", "avg_icd", "rare_avg_icd"}
        return cls(
            d["epoch"], d["overall_top1"], d["group_top1"], d["per_class_top1"], d["per_class_icd"],
            d["avg_icd"], d.get("rare_avg_icd"), {k: v for k, v in d.items() if k not in known},
        )


def evaluate_predictions(epoch: int, predictions, labels, features, groups: ClassGroups, num_classes: int,
                         rare: Sequence[int] = ()) -> MetricsReport:
    per_icd, avg = intra_class_distance(features, labels, num_classes)
    rare_vals = [per_icd[c] for c in rare if per_icd[c] is not None]
    return MetricsReport(
        epoch=epoch,
        overall_top1=top1_accuracy(predictions, labels),
        group_top1=grouped_accuracy(predictions, labels, groups),
        per_class_top1=per_class_accuracy(predictions, labels, num_classes),
        per_class_icd=per_icd,
        avg_icd=avg,
        rare_avg_icd=float(np.mean(rare_vals)) if rare_vals else None,
    )


def _fmt(v) -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"


def format_icd_table(counts: Sequence[int], rows: dict[str, Sequence[float | None]]) -> str:
    """Plain-text table: a label row, a sample-size row and one ICD row per entry plus AVG."""
    k = len(counts)
    header = ["Label"] + [str(j) for j in range(k)] + ["AVG."]
    lines = [header, ["Sample Size"] + [str(c) for c in counts] + [""]]
    for name, vals in rows.items():
        present = [v for v in vals if v is not None]
        avg = float(np.mean(present)) if present else None
        lines.append([name] + [_fmt(v) for v in vals] + [_fmt(avg)])
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    return "\n".join(" | ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in lines) + "\n"
