"""Voxel grids, offset fields and their on-disk formats.

Everything is stored as a dense C-ordered numpy array indexed ``[x, y, z]``,
so the flat buffer is exactly ``linear_index`` order (z varies fastest).

Two grid formats are supported:

* ``raw`` - headerless little-endian ``uint16`` labels; dims come from the caller.
* ``container`` - ``b"VXG1"``, ``u32`` version, ``u32`` x, y, z, then the raw payload.

Offset fields always use the container ``b"VXO1"`` with six little-endian
``uint32`` channels per voxel.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeMismatchError, VoxelFormatError

PathLike = Union[str, Path]

IGNORE_LABEL = 255
DEFAULT_NUM_CLASSES = 20
DEFAULT_VOXEL_SIZE_M = 0.2
DATASET_DIMS = (256, 256, 32)

GRID_MAGIC = b"VXG1"
OFFSET_MAGIC = b"VXO1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

# channel order of every offset field
DIRECTIONS: Tuple[str, ...] = ("x+", "x-", "y+", "y-", "z+", "z-")
AXES: Tuple[str, ...] = ("x", "y", "z")

_U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class GridDims:
    x: int
    y: int
    z: int

    def __post_init__(self) -> None:
        for name in AXES:
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"grid dimension {name}={value!r} must be a positive integer")
        if self.x * self.y * self.z > _U64_MAX:
            raise ValueError("grid is too large for a 64-bit voxel count")

    @classmethod
    def of(cls, dims: Union["GridDims", Sequence[int]]) -> "GridDims":
        if isinstance(dims, GridDims):
            return dims
        x, y, z = (int(v) for v in dims)
        return cls(x, y, z)

    @classmethod
    def parse(cls, text: str) -> "GridDims":
        """Parse ``"256,256,32"`` (``x`` is also accepted as separator)."""
        parts = text.replace("x", ",").replace("X", ",").split(",")
        if len(parts) != 3:
            raise ValueError(f"expected three dimensions, got {text!r}")
        return cls.of(int(p) for p in parts)

    @property
    def total(self) -> int:
        return self.x * self.y * self.z

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.x, self.y, self.z)

    def axis_length(self, axis: Union[int, str]) -> int:
        return self.shape[axis_index(axis)]

    def __str__(self) -> str:
        return f"{self.x}x{self.y}x{self.z}"


def axis_index(axis: Union[int, str]) -> int:
    if isinstance(axis, str):
        try:
            return AXES.index(axis.lower())
        except ValueError:
            raise ValueError(f"unknown axis {axis!r}") from None
    if axis not in (0, 1, 2):
        raise ValueError(f"unknown axis {axis!r}")
    return int(axis)


def linear_index(dims: GridDims, i: int, j: int, k: int) -> int:
    """Flat index of voxel ``(i, j, k)``; z varies fastest."""
    if not (0 <= i < dims.x and 0 <= j < dims.y and 0 <= k < dims.z):
        raise IndexError(f"voxel ({i}, {j}, {k}) outside grid {dims}")
    return (i * dims.y + j) * dims.z + k


def unravel_index(dims: GridDims, index: int) -> Tuple[int, int, int]:
    if not 0 <= index < dims.total:
        raise IndexError(f"flat index {index} outside grid {dims}")
    ij, k = divmod(index, dims.z)
    i, j = divmod(ij, dims.y)
    return i, j, k


def iter_coords(dims: GridDims) -> Iterator[Tuple[int, int, int]]:
    for i in range(dims.x):
        for j in range(dims.y):
            for k in range(dims.z):
                yield i, j, k


def _frozen(array: np.ndarray) -> np.ndarray:
    # copy writable inputs so later caller mutation cannot leak in
    array = np.array(array, order="C", copy=True) if array.flags.writeable else np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class VoxelGrid:
    """Dense per-voxel class labels, shape ``(x, y, z)``, dtype ``uint16``.

    Class 0 is the empty class; ``ignore_label`` marks voxels excluded from
    statistics and metrics.
    """

    labels: np.ndarray
    num_classes: int = DEFAULT_NUM_CLASSES
    ignore_label: int = IGNORE_LABEL
    voxel_size_m: float = DEFAULT_VOXEL_SIZE_M

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"labels must be 3-D, got shape {labels.shape}")
        if labels.dtype != np.uint16:
            if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
                raise ValueError("labels do not fit in 16 bits")
            labels = labels.astype(np.uint16)
        GridDims.of(labels.shape)
        bad = (labels >= self.num_classes) & (labels != self.ignore_label)
        if bad.any():
            value = int(labels[bad][0])
            raise ValueError(
                f"label {value} is neither < num_classes={self.num_classes} "
                f"nor the ignore label {self.ignore_label}"
            )
        object.__setattr__(self, "labels", _frozen(labels))

    @property
    def dims(self) -> GridDims:
        return GridDims.of(self.labels.shape)

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)

    def with_labels(self, labels: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(labels, self.num_classes, self.ignore_label, self.voxel_size_m)

    @classmethod
    def uniform(cls, dims, class_id: int = 0, **kwargs) -> "VoxelGrid":
        dims = GridDims.of(dims)
        return cls(np.full(dims.shape, class_id, dtype=np.uint16), **kwargs)

    @classmethod
    def from_flat(cls, dims, labels: Sequence[int], **kwargs) -> "VoxelGrid":
        dims = GridDims.of(dims)
        array = np.asarray(labels)
        if array.size != dims.total:
            raise ShapeMismatchError(f"{array.size} labels for a {dims} grid ({dims.total} voxels)")
        return cls(array.reshape(dims.shape), **kwargs)


@dataclass(frozen=True)
class OffsetField:
    """Integer distances to the run boundary in six directions.

    ``values`` has shape ``(x, y, z, 6)`` and dtype ``uint32`` with channels
    ordered as :data:`DIRECTIONS`. Distances count the voxel itself, so the
    smallest possible value is 1.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 4 or values.shape[3] != 6:
            raise ValueError(f"offset values must have shape (x, y, z, 6), got {values.shape}")
        GridDims.of(values.shape[:3])
        object.__setattr__(self, "values", _frozen(values.astype(np.uint32, copy=False)))

    @property
    def dims(self) -> GridDims:
        return GridDims.of(self.values.shape[:3])

    def channel(self, direction: str) -> np.ndarray:
        return self.values[..., DIRECTIONS.index(direction)]

    def validate(self) -> None:
        """Check ``1 <= d <= axis length`` for every channel."""
        dims = self.dims
        for c, direction in enumerate(DIRECTIONS):
            limit = dims.axis_length(direction[0])
            chan = self.values[..., c]
            if chan.min() < 1 or chan.max() > limit:
                raise ValueError(f"channel {direction} out of range [1, {limit}]")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OffsetField):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(self.values, other.values)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class NormalizedOffsetField:
    """Offsets divided by the extent of their axis, shape ``(x, y, z, 6)``, float64.

    Also used as the container for a model-predicted offset field.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 4 or values.shape[3] != 6:
            raise ValueError(f"offset values must have shape (x, y, z, 6), got {values.shape}")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def dims(self) -> GridDims:
        return GridDims.of(self.values.shape[:3])


# --------------------------------------------------------------------------- I/O


def _check_axis_order(axis_order: str) -> str:
    order = axis_order.lower()
    if sorted(order) != ["x", "y", "z"]:
        raise ValueError(f"axis order must be a permutation of 'xyz', got {axis_order!r}")
    return order


def _read_header(data: bytes, magic: bytes, path: PathLike) -> GridDims:
    if len(data) < _HEADER.size:
        raise VoxelFormatError(
            f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(data)}"
        )
    found, version, x, y, z = _HEADER.unpack_from(data)
    if found != magic:
        raise VoxelFormatError(f"{path}: unknown magic {found!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VoxelFormatError(f"{path}: unsupported version {version}")
    try:
        return GridDims(x, y, z)
    except ValueError as exc:
        raise VoxelFormatError(f"{path}: {exc}") from None


def read_dims(path: PathLike) -> Optional[GridDims]:
    """Dims declared by a container file header, or ``None`` for raw files."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if head[:4] in (GRID_MAGIC, OFFSET_MAGIC):
        return _read_header(head, head[:4], path)
    return None


def read_grid(
    path: PathLike,
    dims=None,
    fmt: str = "auto",
    axis_order: str = "xyz",
    num_classes: int = DEFAULT_NUM_CLASSES,
    invalid_mask: Optional[PathLike] = None,
    voxel_size_m: float = DEFAULT_VOXEL_SIZE_M,
) -> VoxelGrid:
    """Load a label grid.

    ``fmt`` is ``"raw"``, ``"container"`` or ``"auto"`` (sniff the magic).
    For raw files ``axis_order`` names the stored axes from slowest to
    fastest varying; container files are always ``xyz`` and their header
    dims take precedence over ``dims``. Voxels set to 1 in the optional
    ``invalid_mask`` sidecar are rewritten to the ignore label.
    """
    data = Path(path).read_bytes()
    if fmt == "auto":
        fmt = "container" if data[:4] == GRID_MAGIC else "raw"
    if fmt == "container":
        dims = _read_header(data, GRID_MAGIC, path)
        payload = data[_HEADER.size:]
        order = "xyz"
    elif fmt == "raw":
        if dims is None:
            raise VoxelFormatError(f"{path}: raw grids need explicit dims")
        dims = GridDims.of(dims)
        payload = data
        order = _check_axis_order(axis_order)
    else:
        raise ValueError(f"unknown grid format {fmt!r}")

    expected = dims.total * 2
    if len(payload) != expected:
        raise VoxelFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for a {dims} grid"
        )
    stored_shape = tuple(dims.axis_length(a) for a in order)
    labels = np.frombuffer(payload, dtype="<u2").reshape(stored_shape)
    labels = np.transpose(labels, [order.index(a) for a in AXES]).astype(np.uint16)

    if invalid_mask is not None:
        mask = np.frombuffer(Path(invalid_mask).read_bytes(), dtype=np.uint8)
        if mask.size != dims.total:
            raise VoxelFormatError(
                f"{invalid_mask}: mask is {mask.size} bytes, expected {dims.total}"
            )
        mask = np.transpose(mask.reshape(stored_shape), [order.index(a) for a in AXES])
        labels = np.where(mask != 0, IGNORE_LABEL, labels).astype(np.uint16)

    return VoxelGrid(labels, num_classes=num_classes, voxel_size_m=voxel_size_m)


def grid_bytes(grid: VoxelGrid, fmt: str = "container", axis_order: str = "xyz") -> bytes:
    if fmt == "container":
        dims = grid.dims
        return _HEADER.pack(GRID_MAGIC, FORMAT_VERSION, *dims.shape) + grid.labels.astype("<u2").tobytes()
    if fmt == "raw":
        order = _check_axis_order(axis_order)
        stored = np.transpose(grid.labels, [AXES.index(a) for a in order])
        return np.ascontiguousarray(stored).astype("<u2").tobytes()
    raise ValueError(f"unknown grid format {fmt!r}")


def _write(path: PathLike, payload: bytes) -> None:
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def write_grid(grid: VoxelGrid, path: PathLike, fmt: str = "container", axis_order: str = "xyz") -> None:
    _write(path, grid_bytes(grid, fmt, axis_order))


def offsets_bytes(field_: OffsetField) -> bytes:
    dims = field_.dims
    return _HEADER.pack(OFFSET_MAGIC, FORMAT_VERSION, *dims.shape) + field_.values.astype("<u4").tobytes()


def write_offsets(field_: OffsetField, path: PathLike) -> None:
    _write(path, offsets_bytes(field_))


def read_offsets(path: PathLike) -> OffsetField:
    data = Path(path).read_bytes()
    dims = _read_header(data, OFFSET_MAGIC, path)
    payload = data[_HEADER.size:]
    expected = dims.total * 6 * 4
    if len(payload) != expected:
        raise VoxelFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for a {dims} offset field"
        )
    values = np.frombuffer(payload, dtype="<u4").reshape(dims.shape + (6,))
    return OffsetField(values.astype(np.uint32))
