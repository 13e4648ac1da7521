"""Synthetic box scenes with analytically known offsets.

Boxes are half-open: ``min`` is inclusive and ``max`` exclusive, like numpy
slices. Later shapes overwrite earlier ones. Specks (1-voxel boxes) and
streaks (1-voxel-thick lines) are placed at seeded random positions that keep
them clear of everything already in the scene.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import SpecError
from .grid import AXES, DEFAULT_NUM_CLASSES, GridDims, OffsetField, PathLike, VoxelGrid

_MAX_PLACEMENT_TRIES = 1000
_FAR = np.iinfo(np.int64).max


@dataclass(frozen=True)
class Box:
    min: Tuple[int, int, int]
    max: Tuple[int, int, int]
    class_id: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "min", tuple(int(v) for v in self.min))
        object.__setattr__(self, "max", tuple(int(v) for v in self.max))
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(lo, hi) for lo, hi in zip(self.min, self.max))

    def inside(self, dims: GridDims) -> bool:
        return all(0 <= lo < hi <= n for lo, hi, n in zip(self.min, self.max, dims.shape))

    def separated_from(self, other: "Box") -> bool:
        """At least one background voxel between the two boxes along some axis."""
        return any(
            other.min[a] >= self.max[a] + 1 or self.min[a] >= other.max[a] + 1 for a in range(3)
        )


@dataclass(frozen=True)
class StreakSpec:
    class_id: int
    length: int
    axis: str = "x"


@dataclass
class SceneSpec:
    dims: GridDims
    shapes: List[Box] = field(default_factory=list)
    background_class: int = 0
    speck_count: int = 0
    speck_class: int = 1
    streaks: List[StreakSpec] = field(default_factory=list)
    seed: int = 0
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self) -> None:
        self.dims = GridDims.of(self.dims)
        self.shapes = [b if isinstance(b, Box) else Box(**b) for b in self.shapes]
        self.streaks = [s if isinstance(s, StreakSpec) else StreakSpec(**s) for s in self.streaks]

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims.shape),
            "shapes": [{"min": list(b.min), "max": list(b.max), "class_id": b.class_id} for b in self.shapes],
            "background_class": self.background_class,
            "speck_count": self.speck_count,
            "speck_class": self.speck_class,
            "streaks": [asdict(s) for s in self.streaks],
            "seed": self.seed,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        return cls(**data)

    def dump(self, path: PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: PathLike) -> "SceneSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _place(rng: np.random.Generator, dims: GridDims, extent: Tuple[int, int, int], class_id: int,
           placed: List[Box]) -> Box:
    if any(e > n for e, n in zip(extent, dims.shape)):
        raise SpecError(f"a {extent} shape does not fit in a {dims} grid")
    for _ in range(_MAX_PLACEMENT_TRIES):
        lo = [int(rng.integers(0, n - e + 1)) for e, n in zip(extent, dims.shape)]
        box = Box(lo, [l + e for l, e in zip(lo, extent)], class_id)
        if all(box.separated_from(p) for p in placed):
            return box
    raise SpecError(f"could not place a {extent} shape clear of {len(placed)} others")


def layout(spec: SceneSpec) -> List[Box]:
    """Every box in painter's order: explicit shapes, then specks, then streaks."""
    dims = spec.dims
    for b in spec.shapes:
        if not b.inside(dims):
            raise SpecError(f"box {b.min}..{b.max} lies outside the {dims} grid")
    for c in [spec.background_class, spec.speck_class] + [b.class_id for b in spec.shapes] + [
        s.class_id for s in spec.streaks
    ]:
        if not 0 <= c < spec.num_classes:
            raise SpecError(f"class {c} outside [0, {spec.num_classes})")
    rng = np.random.default_rng(spec.seed)
    placed = list(spec.shapes)
    for _ in range(spec.speck_count):
        placed.append(_place(rng, dims, (1, 1, 1), spec.speck_class, placed))
    for s in spec.streaks:
        extent = [1, 1, 1]
        extent[AXES.index(s.axis)] = s.length
        placed.append(_place(rng, dims, tuple(extent), s.class_id, placed))
    return placed


def synthesize(spec: SceneSpec) -> Tuple[VoxelGrid, List[Box]]:
    manifest = layout(spec)
    labels = np.full(spec.dims.shape, spec.background_class, dtype=np.uint16)
    for b in manifest:
        labels[b.slices] = b.class_id
    return VoxelGrid(labels, num_classes=spec.num_classes), manifest


def check_supported(spec: SceneSpec, manifest: Optional[Sequence[Box]] = None) -> List[Box]:
    manifest = layout(spec) if manifest is None else list(manifest)
    for n, b in enumerate(manifest):
        if b.class_id == spec.background_class:
            raise SpecError(f"shape {n} has the background class")
        for m in range(n):
            if not b.separated_from(manifest[m]):
                raise SpecError(f"shapes {m} and {n} overlap or touch; use compute_offsets_naive")
    return manifest


def expected_offsets(spec: SceneSpec) -> OffsetField:
    """Closed-form offsets for scenes of pairwise separated boxes on a uniform background.

    Along every axis line a voxel either lies inside a box crossing the line,
    so its run is the box extent, or in the background gap between the
    neighbouring boxes (or the border).
    """
    manifest = check_supported(spec)
    dims = spec.dims
    values = np.empty(dims.shape + (6,), dtype=np.int64)
    for a in range(3):
        n = dims.shape[a]
        pos = np.arange(n).reshape([-1 if d == a else 1 for d in range(3)])
        plus = np.broadcast_to(n - pos, dims.shape).copy()
        minus = np.broadcast_to(pos + 1, dims.shape).copy()
        for b in manifest:
            # lines along axis a that cross box b
            cross = tuple(slice(None) if d == a else slice(b.min[d], b.max[d]) for d in range(3))
            lo, hi = b.min[a], b.max[a]
            before = np.where(pos < lo, lo - pos, _FAR)
            within_plus = np.where((pos >= lo) & (pos < hi), hi - pos, _FAR)
            after = np.where(pos >= hi, pos - hi + 1, _FAR)
            within_minus = np.where((pos >= lo) & (pos < hi), pos - lo + 1, _FAR)
            plus[cross] = np.minimum(plus[cross], np.minimum(before, within_plus))
            minus[cross] = np.minimum(minus[cross], np.minimum(after, within_minus))
        values[..., 2 * a] = plus
        values[..., 2 * a + 1] = minus
    return OffsetField(values.astype(np.uint32))


def random_box_spec(seed: int, max_dims: Tuple[int, int, int] = (16, 16, 16), max_boxes: int = 6,
                    num_classes: int = DEFAULT_NUM_CLASSES) -> SceneSpec:
    """A random supported spec (separated boxes, optional specks and a streak)."""
    rng = np.random.default_rng(seed)
    dims = GridDims.of(int(rng.integers(1, m + 1)) for m in max_dims)
    background = int(rng.integers(0, num_classes))
    others = [c for c in range(num_classes) if c != background]
    boxes: List[Box] = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        extent = tuple(int(rng.integers(1, n + 1)) for n in dims.shape)
        try:
            boxes.append(_place(rng, dims, extent, int(rng.choice(others)), boxes))
        except SpecError:
            break
    spec = SceneSpec(dims, boxes, background_class=background, seed=int(rng.integers(0, 2**63)),
                     speck_class=int(rng.choice(others)), num_classes=num_classes)
    spec.speck_count = int(rng.integers(0, 3))
    if rng.random() < 0.5:
        axis = AXES[int(rng.integers(0, 3))]
        spec.streaks.append(StreakSpec(int(rng.choice(others)), int(rng.integers(1, dims.axis_length(axis) + 1)), axis))
    try:
        layout(spec)
    except SpecError:
        spec.speck_count = 0
        spec.streaks = []
    return spec
