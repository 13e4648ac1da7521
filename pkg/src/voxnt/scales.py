"""Per-class instance-scale statistics derived from an offset field.

The scale along an axis is the sum of the two opposite offsets, which for the
inclusive distance convention equals the same-class run length plus one.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .errors import ShapeMismatchError
from .grid import AXES, GridDims, OffsetField, PathLike, VoxelGrid, axis_index

DEFAULT_BINS = 32
CSV_COLUMNS = ("class_id", "axis", "bin_lo", "bin_hi", "count", "normalized")


@dataclass(frozen=True)
class ScaleField:
    """``values`` has shape ``(x, y, z, 3)``: scales along x, y and z."""

    values: np.ndarray

    @property
    def dims(self) -> GridDims:
        return GridDims.of(self.values.shape[:3])

    def axis(self, axis) -> np.ndarray:
        return self.values[..., axis_index(axis)]


def scales_from_offsets(field: OffsetField) -> ScaleField:
    v = field.values.astype(np.uint32)
    scales = np.stack([v[..., 0] + v[..., 1], v[..., 2] + v[..., 3], v[..., 4] + v[..., 5]], axis=-1)
    return ScaleField(scales)


def log_bin_edges(max_scale: int, bins: int = DEFAULT_BINS) -> np.ndarray:
    """``bins + 1`` log-spaced edges spanning ``[2, max_scale]``."""
    if bins < 1:
        raise ValueError("need at least one bin")
    return np.geomspace(2.0, max(float(max_scale), 2.0 + 1e-9), bins + 1)


def default_edges(dims: GridDims, bins: int = DEFAULT_BINS) -> np.ndarray:
    return log_bin_edges(max(dims.shape) + 1, bins)


@dataclass
class ScaleHistogram:
    class_id: int
    axis: str
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        peak = self.counts.max() if self.counts.size else 0
        if peak == 0:
            return np.zeros(self.counts.shape, dtype=np.float64)
        return self.counts / float(peak)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ScaleHistogram") -> "ScaleHistogram":
        if (other.class_id, other.axis) != (self.class_id, self.axis) or not np.array_equal(
            other.bin_edges, self.bin_edges
        ):
            raise ValueError("histograms differ in class, axis or bin edges")
        return ScaleHistogram(self.class_id, self.axis, self.bin_edges, self.counts + other.counts)

    def to_dict(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "axis": self.axis,
            "bin_edges": [float(e) for e in self.bin_edges],
            "counts": [int(c) for c in self.counts],
            "normalized": [float(v) for v in self.normalized],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScaleHistogram":
        return cls(
            int(data["class_id"]),
            data["axis"],
            np.asarray(data["bin_edges"], dtype=np.float64),
            np.asarray(data["counts"], dtype=np.int64),
        )


def class_scale_histogram(
    grid: VoxelGrid,
    scales: ScaleField,
    class_id: int,
    axis,
    bins: Union[int, Sequence[float], np.ndarray] = DEFAULT_BINS,
    per_run: bool = False,
    offsets: Optional[OffsetField] = None,
) -> ScaleHistogram:
    """Histogram of ``class_id`` scales along ``axis``, one sample per voxel.

    With ``per_run=True`` each run contributes once (at its first voxel) instead;
    that needs the originating ``offsets`` to locate run starts.
    """
    if grid.dims != scales.dims:
        raise ShapeMismatchError(f"grid {grid.dims} vs scales {scales.dims}")
    if not 0 <= class_id < grid.num_classes:
        raise ValueError(f"class {class_id} outside [0, {grid.num_classes})")
    a = axis_index(axis)
    edges = default_edges(grid.dims, bins) if isinstance(bins, int) else np.asarray(bins, dtype=np.float64)
    select = grid.labels == class_id
    if per_run:
        if offsets is None:
            raise ValueError("per_run statistics need the offset field")
        select &= offsets.values[..., 2 * a + 1] == 1
    counts, _ = np.histogram(scales.values[..., a][select], bins=edges)
    return ScaleHistogram(int(class_id), AXES[a], edges, counts.astype(np.int64))


def grid_histograms(
    grid: VoxelGrid,
    scales: ScaleField,
    bins: Union[int, Sequence[float], np.ndarray] = DEFAULT_BINS,
    classes: Optional[Iterable[int]] = None,
    per_run: bool = False,
    offsets: Optional[OffsetField] = None,
) -> List[ScaleHistogram]:
    """Histograms for every (class, axis) pair, ordered by class then axis."""
    edges = default_edges(grid.dims, bins) if isinstance(bins, int) else np.asarray(bins, dtype=np.float64)
    classes = range(grid.num_classes) if classes is None else classes
    return [
        class_scale_histogram(grid, scales, c, a, edges, per_run=per_run, offsets=offsets)
        for c in classes
        for a in AXES
    ]


def merge_histograms(*groups: Sequence[ScaleHistogram]) -> List[ScaleHistogram]:
    merged: Dict[tuple, ScaleHistogram] = {}
    for group in groups:
        for hist in group:
            key = (hist.class_id, hist.axis)
            merged[key] = merged[key].merge(hist) if key in merged else hist
    return [merged[k] for k in sorted(merged, key=lambda k: (k[0], AXES.index(k[1])))]


def export_histograms(histograms: Sequence[ScaleHistogram], path: PathLike, fmt: str = "csv") -> None:
    """Write one row per (class, axis, bin) as CSV, or the full histograms as JSON."""
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for h in histograms:
                norm = h.normalized
                for b, count in enumerate(h.counts):
                    writer.writerow(
                        [h.class_id, h.axis, repr(float(h.bin_edges[b])), repr(float(h.bin_edges[b + 1])),
                         int(count), repr(float(norm[b]))]
                    )
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump([h.to_dict() for h in histograms], fh, indent=1)
            fh.write("\n")
    else:
        raise ValueError(f"unknown histogram format {fmt!r}")


def read_histograms_json(path: PathLike) -> List[ScaleHistogram]:
    with open(path) as fh:
        return [ScaleHistogram.from_dict(d) for d in json.load(fh)]
