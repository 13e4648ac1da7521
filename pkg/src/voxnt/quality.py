"""Scale-based detection of corrupted labels and refinement to the ignore label.

Two kinds of defects show up in dynamic-object labels: isolated specks whose
scale is tiny on every axis, and motion smears whose scale is huge on at least
one axis. Masks are computed for all voxels; only :func:`refine_labels`
restricts the rewrite to the target classes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .grid import AXES, GridDims, VoxelGrid
from .offsets import compute_offsets
from .scales import ScaleField, scales_from_offsets

# SemanticKITTI label id of "car" after the usual 20-class remapping
CAR_CLASS = 1
DEFAULT_K_MIN = (3, 3, 3)
DEFAULT_K_MAX: Tuple[Optional[int], ...] = (30, 30, None)

Thresholds = Tuple[Optional[int], Optional[int], Optional[int]]


@dataclass(frozen=True)
class AnomalyThresholds:
    """Per-axis scale bounds.

    An axis whose ``k_max`` is ``None`` never raises the max flag. The z test
    is off by default: with 32 voxels of height, full-height structure would
    otherwise reach the bound of 30.
    """

    k_min: Tuple[int, int, int] = DEFAULT_K_MIN
    k_max: Thresholds = DEFAULT_K_MAX
    target_classes: FrozenSet[int] = field(default_factory=lambda: frozenset({CAR_CLASS}))

    def __post_init__(self) -> None:
        k_min = tuple(int(v) for v in self.k_min)
        k_max = tuple(None if v is None else int(v) for v in self.k_max)
        if len(k_min) != 3 or len(k_max) != 3:
            raise ConfigError("k_min and k_max need one value per axis")
        for a, (lo, hi) in enumerate(zip(k_min, k_max)):
            if lo < 2:
                raise ConfigError(f"k_min.{AXES[a]}={lo} is below the smallest possible scale 2")
            if hi is not None and hi < lo:
                raise ConfigError(f"k_max.{AXES[a]}={hi} < k_min.{AXES[a]}={lo}")
        targets = self.target_classes
        if isinstance(targets, int):
            targets = (targets,)
        object.__setattr__(self, "k_min", k_min)
        object.__setattr__(self, "k_max", k_max)
        object.__setattr__(self, "target_classes", frozenset(int(c) for c in targets))

    @classmethod
    def uniform(cls, k_min: int = 3, k_max: int = 30, target_classes: Union[int, Iterable[int]] = CAR_CLASS):
        """Same bound on all three axes, z included."""
        targets = (target_classes,) if isinstance(target_classes, int) else target_classes
        return cls((k_min,) * 3, (k_max,) * 3, frozenset(targets))

    def to_dict(self) -> dict:
        return {
            "k_min": list(self.k_min),
            "k_max": list(self.k_max),
            "target_classes": sorted(self.target_classes),
        }


@dataclass(frozen=True)
class AnomalyMask:
    min_flags: np.ndarray
    max_flags: np.ndarray

    @property
    def dims(self) -> GridDims:
        return GridDims.of(self.min_flags.shape)

    @property
    def any_flags(self) -> np.ndarray:
        return self.min_flags | self.max_flags


def detect_anomalies(scales: ScaleField, thresholds: AnomalyThresholds = AnomalyThresholds()) -> AnomalyMask:
    s = scales.values
    min_flags = np.ones(s.shape[:3], dtype=bool)
    max_flags = np.zeros(s.shape[:3], dtype=bool)
    for a in range(3):
        min_flags &= s[..., a] < thresholds.k_min[a]
        if thresholds.k_max[a] is not None:
            max_flags |= s[..., a] >= thresholds.k_max[a]
    return AnomalyMask(min_flags, max_flags)


def refine_labels(
    grid: VoxelGrid, mask: AnomalyMask, thresholds: AnomalyThresholds = AnomalyThresholds()
) -> VoxelGrid:
    """Set flagged voxels of the target classes to the ignore label; the input is not modified."""
    if grid.dims != mask.dims:
        raise ShapeMismatchError(f"grid {grid.dims} vs mask {mask.dims}")
    for c in thresholds.target_classes:
        if not 0 <= c < grid.num_classes:
            raise ConfigError(f"target class {c} outside [0, {grid.num_classes})")
    gate = np.isin(grid.labels, list(thresholds.target_classes)) & mask.any_flags
    return grid.with_labels(np.where(gate, grid.ignore_label, grid.labels))


def refine_grid(grid: VoxelGrid, thresholds: AnomalyThresholds = AnomalyThresholds()):
    """Offsets, scales, masks and refinement in one call; returns ``(refined, mask)``."""
    mask = detect_anomalies(scales_from_offsets(compute_offsets(grid)), thresholds)
    return refine_labels(grid, mask, thresholds), mask


def quality_report(grid: VoxelGrid, mask: AnomalyMask, thresholds: Optional[AnomalyThresholds] = None) -> dict:
    """Per-class flagged counts; ignore-labelled voxels are left out."""
    if grid.dims != mask.dims:
        raise ShapeMismatchError(f"grid {grid.dims} vs mask {mask.dims}")
    labels = grid.labels
    classes = []
    for c in np.unique(labels):
        c = int(c)
        if c == grid.ignore_label:
            continue
        sel = labels == c
        total = int(sel.sum())
        n_min = int(mask.min_flags[sel].sum())
        n_max = int(mask.max_flags[sel].sum())
        n_any = int(mask.any_flags[sel].sum())
        classes.append(
            {
                "class_id": c,
                "total": total,
                "min_flagged": n_min,
                "max_flagged": n_max,
                "flagged": n_any,
                "min_fraction": n_min / total,
                "max_fraction": n_max / total,
                "flagged_fraction": n_any / total,
            }
        )
    report = {"dims": list(grid.dims.shape), "classes": classes}
    if thresholds is not None:
        report = {"thresholds": thresholds.to_dict(), **report}
    return report
