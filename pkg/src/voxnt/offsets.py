"""Voxel-to-instance offsets: run-length distances to the next class change.

For every voxel and each of the six axis directions the distance counts the
voxel itself, so a voxel whose neighbour already has a different class (or
which sits on the volume border) gets distance 1.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from .grid import (
    AXES,
    DIRECTIONS,
    IGNORE_LABEL,
    GridDims,
    NormalizedOffsetField,
    OffsetField,
    VoxelGrid,
    axis_index,
)

ArrayOrGrid = Union[VoxelGrid, np.ndarray]


@dataclass(frozen=True)
class ScanPolicy:
    """Which voxels take part in offset regression.

    ``include_empty=False`` does not change the computed offsets; it only
    drops empty voxels from :func:`regression_mask`. With
    ``ignore_breaks_runs=False`` an ignore-labelled voxel is treated as
    matching both of its neighbours, so it neither starts nor ends a run.
    """

    include_empty: bool = True
    ignore_breaks_runs: bool = True
    ignore_label: int = IGNORE_LABEL


DEFAULT_POLICY = ScanPolicy()


def _labels(grid: ArrayOrGrid) -> np.ndarray:
    return grid.labels if isinstance(grid, VoxelGrid) else np.asarray(grid)


def _same(cur: np.ndarray, nxt: np.ndarray, policy: ScanPolicy) -> np.ndarray:
    same = cur == nxt
    if not policy.ignore_breaks_runs:
        same |= (cur == policy.ignore_label) | (nxt == policy.ignore_label)
    return same


def _run_length_positive(labels: np.ndarray, axis: int, policy: ScanPolicy) -> np.ndarray:
    # backward recurrence over slices, vectorised across all lines at once
    t = np.moveaxis(labels, axis, 0)
    length = t.shape[0]
    out = np.empty(t.shape, dtype=np.uint32)
    out[-1] = 1
    for i in range(length - 2, -1, -1):
        out[i] = np.where(_same(t[i], t[i + 1], policy), out[i + 1] + 1, 1)
    return np.moveaxis(out, 0, axis)


def _split_axis(axis: int) -> int:
    # any axis other than the scanned one partitions the lines disjointly
    return 1 if axis == 0 else 0


def _parallel(labels: np.ndarray, axis: int, policy: ScanPolicy, workers: int, flip: bool) -> np.ndarray:
    src = np.flip(labels, axis) if flip else labels
    if workers <= 1 or src.shape[_split_axis(axis)] < 2:
        out = _run_length_positive(src, axis, policy)
    else:
        split = _split_axis(axis)
        chunks = np.array_split(np.arange(src.shape[split]), min(workers, src.shape[split]))
        out = np.empty(src.shape, dtype=np.uint32)

        def work(idx: np.ndarray) -> None:
            sl = [slice(None)] * 3
            sl[split] = slice(int(idx[0]), int(idx[-1]) + 1)
            out[tuple(sl)] = _run_length_positive(src[tuple(sl)], axis, policy)

        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            list(pool.map(work, chunks))
    return np.flip(out, axis) if flip else out


def run_length_positive(grid: ArrayOrGrid, axis, policy: ScanPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Distance (inclusive) to the last same-class voxel in the ``+axis`` direction."""
    return _run_length_positive(_labels(grid), axis_index(axis), policy)


def run_length_along(
    grid: ArrayOrGrid,
    axis,
    direction: str,
    policy: ScanPolicy = DEFAULT_POLICY,
    workers: int = 1,
) -> np.ndarray:
    """Run-length channel along ``axis``; the negative direction is computed on the flipped grid."""
    if direction not in ("+", "-", "−"):
        raise ValueError(f"direction must be '+' or '-', got {direction!r}")
    return _parallel(_labels(grid), axis_index(axis), policy, workers, flip=direction != "+")


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("VOXNT_WORKERS", "1")))
    except ValueError:
        return 1


def compute_offsets(
    grid: ArrayOrGrid,
    policy: ScanPolicy = DEFAULT_POLICY,
    workers: Optional[int] = None,
) -> OffsetField:
    """Six-direction offset field of a label grid, channels ``x+, x-, y+, y-, z+, z-``."""
    labels = _labels(grid)
    workers = default_workers() if workers is None else max(1, int(workers))
    values = np.empty(labels.shape + (6,), dtype=np.uint32)
    for c, direction in enumerate(DIRECTIONS):
        values[..., c] = _parallel(labels, AXES.index(direction[0]), policy, workers, flip=direction[1] == "-")
    return OffsetField(values)


def compute_offsets_naive(grid: ArrayOrGrid, policy: ScanPolicy = DEFAULT_POLICY) -> OffsetField:
    """Reference implementation: walk outward from every voxel, one step at a time.

    Pure Python and O(voxels * axis length); use on small grids only.
    """
    labels = _labels(grid)
    nx, ny, nz = labels.shape
    flat: List[int] = labels.reshape(-1).tolist()
    ignore = policy.ignore_label
    loose = not policy.ignore_breaks_runs
    size = (nx, ny, nz)
    strides = (ny * nz, nz, 1)
    out = [0] * (len(flat) * 6)

    def same(a: int, b: int) -> bool:
        return a == b or (loose and (a == ignore or b == ignore))

    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                idx = (i * ny + j) * nz + k
                pos = (i, j, k)
                for a in range(3):
                    stride = strides[a]
                    for sign, c in ((1, 2 * a), (-1, 2 * a + 1)):
                        steps = 1
                        p = pos[a]
                        cur = idx
                        while 0 <= p + sign < size[a] and same(flat[cur], flat[cur + sign * stride]):
                            p += sign
                            cur += sign * stride
                            steps += 1
                        out[idx * 6 + c] = steps
    return OffsetField(np.array(out, dtype=np.uint32).reshape(nx, ny, nz, 6))


def regression_mask(grid: VoxelGrid, policy: ScanPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Voxels whose offsets are regression targets under ``policy``."""
    mask = grid.labels != grid.ignore_label
    if not policy.include_empty:
        mask &= grid.labels != 0
    return mask


def _axis_lengths(dims: GridDims) -> np.ndarray:
    return np.array([dims.axis_length(d[0]) for d in DIRECTIONS], dtype=np.float64)


def normalize_offsets(field: OffsetField) -> NormalizedOffsetField:
    """Divide every channel by the extent of its axis, giving values in (0, 1]."""
    return NormalizedOffsetField(field.values / _axis_lengths(field.dims))


def denormalize_offsets(field: NormalizedOffsetField) -> OffsetField:
    """Round normalized offsets back to integer voxel distances (at least 1)."""
    scaled = np.rint(field.values * _axis_lengths(field.dims))
    return OffsetField(np.maximum(scaled, 1).astype(np.uint32))
