"""Semantic scene completion metrics.

Geometry completion collapses every non-empty class to "occupied" and reports
a single IoU; semantic completion reports IoU per non-empty class and their
mean. Counts stay integral until the final division.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ShapeMismatchError
from .grid import NormalizedOffsetField, PathLike, VoxelGrid


@dataclass
class ConfusionMatrix:
    """``cells[t, p]`` counts voxels of truth ``t`` predicted as ``p``."""

    num_classes: int
    cells: np.ndarray = None
    ignored: int = 0

    def __post_init__(self) -> None:
        if self.cells is None:
            self.cells = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.cells = np.array(self.cells, dtype=np.int64)
        if self.cells.shape != (self.num_classes, self.num_classes):
            raise ValueError(f"cells must be {self.num_classes}x{self.num_classes}")
        if (self.cells < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.cells.sum())

    def accumulate(self, truth: VoxelGrid, pred: VoxelGrid) -> "ConfusionMatrix":
        """Add one scene in place; returns ``self`` for chaining."""
        if truth.dims != pred.dims:
            raise ShapeMismatchError(f"truth {truth.dims} vs prediction {pred.dims}")
        if truth.num_classes != self.num_classes or pred.num_classes != self.num_classes:
            raise ShapeMismatchError(
                f"class count mismatch: matrix {self.num_classes}, "
                f"truth {truth.num_classes}, prediction {pred.num_classes}"
            )
        p = pred.flat().astype(np.int64)
        if (p >= self.num_classes).any():
            raise ValueError("prediction contains the ignore label or an out-of-range class")
        t = truth.flat().astype(np.int64)
        keep = t != truth.ignore_label
        self.ignored += int(t.size - keep.sum())
        k = self.num_classes
        self.cells += np.bincount(t[keep] * k + p[keep], minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeMismatchError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.cells + other.cells, self.ignored + other.ignored)

    __add__ = merge

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "cells": self.cells.tolist(), "ignored": self.ignored}

    @classmethod
    def from_dict(cls, data: dict) -> "ConfusionMatrix":
        return cls(int(data["num_classes"]), np.asarray(data["cells"]), int(data.get("ignored", 0)))


def accumulate(cm: ConfusionMatrix, truth: VoxelGrid, pred: VoxelGrid) -> ConfusionMatrix:
    return cm.accumulate(truth, pred)


@dataclass
class MetricsReport:
    occupancy_iou: float
    per_class_iou: List[float]
    miou: float
    ignored_voxels: int
    evaluated_voxels: int
    # classes counted in the mean (present in truth or prediction)
    present: List[bool] = field(default_factory=list)
    valid: bool = True

    def to_dict(self) -> dict:
        def num(v: float) -> Optional[float]:
            return None if math.isnan(v) else float(v)

        return {
            "occupancy_iou": num(self.occupancy_iou),
            "per_class_iou": [num(v) for v in self.per_class_iou],
            "miou": num(self.miou),
            "ignored_voxels": int(self.ignored_voxels),
            "evaluated_voxels": int(self.evaluated_voxels),
            "valid": self.valid,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


def finalize(cm: ConfusionMatrix) -> MetricsReport:
    cells = cm.cells
    k = cm.num_classes
    evaluated = cm.total
    nan = float("nan")
    if evaluated == 0:
        return MetricsReport(nan, [nan] * (k - 1), nan, cm.ignored, 0, [False] * (k - 1), valid=False)

    tp_occ = int(cells[1:, 1:].sum())
    fp_occ = int(cells[0, 1:].sum())
    fn_occ = int(cells[1:, 0].sum())
    denom = tp_occ + fp_occ + fn_occ
    occupancy = tp_occ / denom if denom else nan

    rows = cells.sum(axis=1)
    cols = cells.sum(axis=0)
    ious: List[float] = []
    present: List[bool] = []
    for c in range(1, k):
        union = int(rows[c] + cols[c] - cells[c, c])
        present.append(union > 0)
        ious.append(int(cells[c, c]) / union if union else nan)
    counted = [v for v, p in zip(ious, present) if p]
    miou = math.fsum(counted) / len(counted) if counted else nan
    return MetricsReport(occupancy, ious, miou, cm.ignored, evaluated, present)


def evaluate(pairs, num_classes: int) -> MetricsReport:
    """Accumulate ``(truth, prediction)`` pairs and finalize."""
    cm = ConfusionMatrix(num_classes)
    for truth, pred in pairs:
        cm.accumulate(truth, pred)
    return finalize(cm)


@dataclass(frozen=True)
class L1Loss:
    total: float
    mean: float
    elements: int


def regression_l1(
    pred: NormalizedOffsetField, truth: NormalizedOffsetField, mask: Optional[np.ndarray] = None
) -> L1Loss:
    """Summed absolute error between two offset fields, plus the per-element mean.

    ``mask`` (shape ``(x, y, z)``) restricts the sum to selected voxels.
    """
    if pred.values.shape != truth.values.shape:
        raise ShapeMismatchError(f"prediction {pred.values.shape} vs target {truth.values.shape}")
    diff = np.abs(pred.values - truth.values)
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    total = float(diff.sum())
    n = int(diff.size)
    return L1Loss(total, total / n if n else float("nan"), n)


def write_report(report: MetricsReport, path: PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_json() + "\n")

