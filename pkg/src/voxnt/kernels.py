"""Float64 reference kernels for dense projection and offset-guided aggregation.

These are plain numpy implementations meant to pin down the arithmetic so a
faster or lower-precision port can be checked against them. Nothing here is
trained: every weight is supplied by the caller.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeMismatchError, VoxelFormatError
from .grid import GridDims, OffsetField, PathLike

PLANES = {"XY": 2, "XZ": 1, "YZ": 0}  # plane -> collapsed axis
_ETA_CHANNEL = {"XY": 0, "XZ": 1, "YZ": 2}

WEIGHTS_MAGIC = b"VXW1"
_WEIGHTS_HEADER = struct.Struct("<4sII")


def _finite(name: str, array: np.ndarray) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite values")
    return array


@dataclass(frozen=True)
class FeatureVolume:
    """Per-voxel features, shape ``(x, y, z, C)``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = _finite("feature volume", self.values)
        if values.ndim != 4:
            raise ValueError(f"feature volume must be (x, y, z, C), got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> GridDims:
        return GridDims.of(self.values.shape[:3])

    @property
    def channels(self) -> int:
        return self.values.shape[3]


@dataclass(frozen=True)
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    d_k: Optional[float] = None  # defaults to the channel count

    def __post_init__(self) -> None:
        mats = [_finite(n, getattr(self, n)) for n in ("wq", "wk", "wv")]
        c = mats[0].shape[0]
        for m in mats:
            if m.shape != (c, c):
                raise ValueError(f"attention matrices must all be {c}x{c}, got {m.shape}")
        object.__setattr__(self, "wq", mats[0])
        object.__setattr__(self, "wk", mats[1])
        object.__setattr__(self, "wv", mats[2])
        d_k = float(c if self.d_k is None else self.d_k)
        if not d_k > 0:
            raise ValueError("d_k must be positive")
        object.__setattr__(self, "d_k", d_k)

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, scale: float = 1.0) -> "AttentionWeights":
        return cls(*(rng.normal(0.0, scale, (channels, channels)) for _ in range(3)))


@dataclass(frozen=True)
class GroupNorm:
    groups: int = 8
    eps: float = 1e-5
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Normalize ``(x, y, z, C)`` features over each channel group and all voxels."""
        c = x.shape[-1]
        if c % self.groups:
            raise ValueError(f"{c} channels are not divisible into {self.groups} groups")
        g = x.reshape(-1, self.groups, c // self.groups)
        mean = g.mean(axis=(0, 2), keepdims=True)
        var = g.var(axis=(0, 2), keepdims=True)
        out = ((g - mean) / np.sqrt(var + self.eps)).reshape(x.shape)
        if self.gamma is not None:
            out = out * np.asarray(self.gamma, dtype=np.float64)
        if self.beta is not None:
            out = out + np.asarray(self.beta, dtype=np.float64)
        return out


def softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def dense_project(vol: FeatureVolume, eta: np.ndarray, plane: str) -> np.ndarray:
    """Collapse ``vol`` onto a plane with softmax weights taken along the collapsed axis.

    ``eta`` has shape ``(x, y, z, 3)``; channel 0 drives the XY plane (sum
    over z), channel 1 the XZ plane (sum over y), channel 2 the YZ plane.
    """
    plane = plane.upper()
    if plane not in PLANES:
        raise ValueError(f"plane must be one of {sorted(PLANES)}, got {plane!r}")
    eta = _finite("projection weights", eta)
    if eta.shape != vol.values.shape[:3] + (3,):
        raise ShapeMismatchError(f"weights {eta.shape} do not match volume {vol.values.shape[:3]}")
    axis = PLANES[plane]
    w = softmax(eta[..., _ETA_CHANNEL[plane]], axis=axis)
    return (w[..., None] * vol.values).sum(axis=axis)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _steps(offsets: np.ndarray, alpha: float, inclusive: bool) -> np.ndarray:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    steps = _round_half_away(alpha * np.asarray(offsets, dtype=np.float64)).astype(np.int64)
    if inclusive:
        # distance 1 is the voxel itself
        steps = np.maximum(steps - 1, 0)
    return steps


def gather_boundary_candidates(
    origin: Sequence[int],
    offsets: Sequence[float],
    alpha: float,
    dims,
    inclusive: bool = True,
) -> Tuple[Tuple[int, int, int], ...]:
    """The six voxels a single voxel aggregates from, in ``x+, x-, y+, y-, z+, z-`` order.

    Each candidate sits ``round(alpha * offset) - 1`` voxels away from the
    origin (never negative), clamped to the volume. ``inclusive=False`` drops
    the ``- 1``.
    """
    dims = GridDims.of(dims)
    origin = tuple(int(v) for v in origin)
    if not all(0 <= o < n for o, n in zip(origin, dims.shape)):
        raise IndexError(f"origin {origin} outside grid {dims}")
    steps = _steps(np.asarray(offsets).reshape(6), alpha, inclusive)
    out = []
    for c in range(6):
        a, sign = divmod(c, 2)
        coord = list(origin)
        coord[a] = int(np.clip(origin[a] + (-steps[c] if sign else steps[c]), 0, dims.shape[a] - 1))
        out.append(tuple(coord))
    return tuple(out)


def candidate_coordinates(offsets: np.ndarray, alpha: float, inclusive: bool = True) -> np.ndarray:
    """Vectorised :func:`gather_boundary_candidates` for a whole field: ``(x, y, z, 6, 3)``."""
    offsets = np.asarray(offsets)
    shape = offsets.shape[:3]
    steps = _steps(offsets, alpha, inclusive)
    base = np.stack(np.meshgrid(*(np.arange(n) for n in shape), indexing="ij"), axis=-1)
    coords = np.repeat(base[..., None, :], 6, axis=3)
    for c in range(6):
        a, sign = divmod(c, 2)
        moved = coords[..., c, a] + (-steps[..., c] if sign else steps[..., c])
        coords[..., c, a] = np.clip(moved, 0, shape[a] - 1)
    return coords


def _offset_values(offsets: Union[OffsetField, np.ndarray]) -> np.ndarray:
    return offsets.values if isinstance(offsets, OffsetField) else np.asarray(offsets)


def instance_aggregate(
    vol: FeatureVolume,
    offsets: Union[OffsetField, np.ndarray],
    weights: AttentionWeights,
    alpha: float = 1.0,
    norm: GroupNorm = GroupNorm(),
    inclusive: bool = True,
    return_attention: bool = False,
):
    """One aggregation layer: each voxel attends over its six boundary candidates.

    ``out = Norm(sum_d softmax(q . k_d / sqrt(d_k)) * (Wv v_d) + v)`` with
    ``q = Wq v`` and ``k_d = Wk v_d``.
    """
    off = _offset_values(offsets)
    if off.shape[:3] != vol.values.shape[:3] or off.shape[3] != 6:
        raise ShapeMismatchError(f"offsets {off.shape} do not match volume {vol.values.shape}")
    if weights.channels != vol.channels:
        raise ShapeMismatchError(f"weights are {weights.channels}-channel, volume {vol.channels}")
    v = vol.values
    coords = candidate_coordinates(off, alpha, inclusive)
    cand = v[coords[..., 0], coords[..., 1], coords[..., 2]]  # (x, y, z, 6, C)
    q = v @ weights.wq.T
    k = cand @ weights.wk.T
    val = cand @ weights.wv.T
    scores = np.einsum("xyzc,xyzdc->xyzd", q, k) / np.sqrt(weights.d_k)
    attn = softmax(scores, axis=-1)
    mixed = np.einsum("xyzd,xyzdc->xyzc", attn, val) + v
    out = FeatureVolume(norm(mixed))
    return (out, attn) if return_attention else out


def aggregate_layers(
    vol: FeatureVolume,
    offsets: Union[OffsetField, np.ndarray],
    layers: Sequence[AttentionWeights],
    alpha: float = 1.0,
    norm: GroupNorm = GroupNorm(),
    inclusive: bool = True,
) -> FeatureVolume:
    """Apply :func:`instance_aggregate` once per weight set (four in the default model)."""
    for weights in layers:
        vol = instance_aggregate(vol, offsets, weights, alpha, norm, inclusive)
    return vol


def write_weights(array: np.ndarray, path: PathLike) -> None:
    """``b"VXW1"``, u32 version, u32 ndim, u32 per dim, then float64 little-endian payload."""
    array = np.asarray(array, dtype=np.float64)
    header = _WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, 1, array.ndim)
    shape = struct.pack(f"<{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + shape + array.astype("<f8").tobytes())


def read_weights(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _WEIGHTS_HEADER.size:
        raise VoxelFormatError(f"{path}: truncated header")
    magic, version, ndim = _WEIGHTS_HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC:
        raise VoxelFormatError(f"{path}: unknown magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    if version != 1:
        raise VoxelFormatError(f"{path}: unsupported version {version}")
    start = _WEIGHTS_HEADER.size + 4 * ndim
    if len(data) < start:
        raise VoxelFormatError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}I", data, _WEIGHTS_HEADER.size)
    payload = data[start:]
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise VoxelFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save_attention_weights(weights: AttentionWeights, path: PathLike) -> None:
    write_weights(np.stack([weights.wq, weights.wk, weights.wv]), path)


def load_attention_weights(path: PathLike, d_k: Optional[float] = None) -> AttentionWeights:
    stacked = read_weights(path)
    if stacked.ndim != 3 or stacked.shape[0] != 3:
        raise VoxelFormatError(f"{path}: expected a (3, C, C) array, got {stacked.shape}")
    return AttentionWeights(stacked[0], stacked[1], stacked[2], d_k)
