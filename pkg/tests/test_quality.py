import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxnt.errors import ConfigError
from voxnt.grid import VoxelGrid
from voxnt.offsets import compute_offsets
from voxnt.quality import (
    AnomalyThresholds,
    detect_anomalies,
    quality_report,
    refine_grid,
    refine_labels,
)
from voxnt.scales import ScaleField, scales_from_offsets

CAR = 1


def scales_of(labels):
    return scales_from_offsets(compute_offsets(labels))


def test_defaults():
    t = AnomalyThresholds()
    assert t.k_min == (3, 3, 3)
    assert t.k_max == (30, 30, None)
    assert t.target_classes == frozenset({CAR})


@pytest.mark.parametrize("k_min, k_max", [((1, 3, 3), (30, 30, 30)), ((3, 3, 3), (30, 2, 30))])
def test_threshold_validation(k_min, k_max):
    with pytest.raises(ConfigError):
        AnomalyThresholds(k_min, k_max)


def test_isolated_voxel_min_flag():
    labels = np.zeros((5, 5, 5), dtype=np.uint16)
    labels[2, 2, 2] = CAR
    mask = detect_anomalies(scales_of(labels))
    assert mask.min_flags[2, 2, 2]
    assert mask.min_flags.sum() == 1


def test_streak_max_flag():
    labels = np.zeros((130, 3, 3), dtype=np.uint16)
    labels[5:124, 1, 1] = CAR  # 119 voxels, scale 120
    s = scales_of(labels)
    assert (s.values[5:124, 1, 1, 0] == 120).all()
    mask = detect_anomalies(s, AnomalyThresholds.uniform(3, 30))
    assert mask.max_flags[5:124, 1, 1].all()


def test_inside_both_bands():
    s = ScaleField(np.array([10, 10, 5], dtype=np.uint32).reshape(1, 1, 1, 3))
    mask = detect_anomalies(s)
    assert not mask.min_flags.any() and not mask.max_flags.any()


def test_z_max_is_opt_in():
    s = ScaleField(np.array([10, 10, 33], dtype=np.uint32).reshape(1, 1, 1, 3))
    assert not detect_anomalies(s).max_flags.any()
    assert detect_anomalies(s, AnomalyThresholds.uniform()).max_flags.all()


def test_refine_without_target_is_identity():
    grid = VoxelGrid(np.random.default_rng(0).integers(2, 6, (6, 6, 6)))
    refined, _ = refine_grid(grid)
    assert refined.labels.tobytes() == grid.labels.tobytes()


def test_refine_speck_and_streak():
    labels = np.full((160, 8, 8), 9, dtype=np.uint16)
    labels[:, :, :3] = 0
    labels[20, 4, 5] = CAR
    labels[30:150, 1, 6] = CAR
    grid = VoxelGrid(labels)
    refined, _ = refine_grid(grid)
    changed = refined.labels != grid.labels
    assert changed.sum() == 121
    assert refined.labels[20, 4, 5] == 255
    assert (refined.labels[30:150, 1, 6] == 255).all()
    assert (grid.labels[20, 4, 5] == CAR)  # input untouched


def test_refine_multiple_targets():
    labels = np.zeros((5, 5, 5), dtype=np.uint16)
    labels[1, 1, 1] = 2
    labels[3, 3, 3] = 4
    grid = VoxelGrid(labels)
    t = AnomalyThresholds(target_classes=frozenset({2, 4}))
    refined, _ = refine_grid(grid, t)
    assert refined.labels[1, 1, 1] == 255 and refined.labels[3, 3, 3] == 255


def checkerboard(n):
    i, j, k = np.indices((n, n, n))
    return ((i + j + k) % 2).astype(np.uint16)


def test_report_checkerboard_all_min_flagged():
    labels = checkerboard(6)
    report = quality_report(VoxelGrid(labels), detect_anomalies(scales_of(labels)))
    assert all(c["min_fraction"] == 1.0 for c in report["classes"])


def test_report_full_empty_grid():
    labels = np.zeros((8, 8, 8), dtype=np.uint16)
    report = quality_report(VoxelGrid(labels), detect_anomalies(scales_of(labels)), AnomalyThresholds())
    (row,) = report["classes"]
    assert row["min_fraction"] == 0.0 and row["total"] == 512
    assert report["thresholds"]["k_min"] == [3, 3, 3]


def test_report_block_interior_counts():
    # a 10^3 block of class 2 in a 12^3 empty grid: x/y scale 11 < 30, nothing flagged
    labels = np.zeros((12, 12, 12), dtype=np.uint16)
    labels[1:11, 1:11, 1:11] = 2
    report = quality_report(VoxelGrid(labels), detect_anomalies(scales_of(labels)))
    by_class = {c["class_id"]: c for c in report["classes"]}
    assert by_class[2]["flagged"] == 0
    assert by_class[0]["flagged"] == 0


grids = st.integers(0, 2**32).map(
    lambda s: np.random.default_rng(s).choice([0, 1, 1, 2], size=tuple(np.random.default_rng(s + 1).integers(1, 12, 3))).astype(np.uint16)
)


@given(grids)
def test_refine_touches_only_target_class(labels):
    grid = VoxelGrid(labels)
    refined, _ = refine_grid(grid)
    changed = refined.labels != grid.labels
    assert (grid.labels[changed] == CAR).all()
    assert (refined.labels[changed] == 255).all()


@given(grids)
def test_refine_idempotent_wrt_ignore(labels):
    once, _ = refine_grid(VoxelGrid(labels))
    twice, _ = refine_grid(once)
    assert (twice.labels[once.labels == 255] == 255).all()


@given(grids, st.integers(2, 5), st.integers(0, 3), st.integers(6, 12), st.integers(0, 4))
def test_threshold_monotonicity(labels, kmin, shrink, kmax, grow):
    s = scales_of(labels)
    loose = detect_anomalies(s, AnomalyThresholds.uniform(max(2, kmin - shrink), kmax + grow))
    tight = detect_anomalies(s, AnomalyThresholds.uniform(kmin, kmax))
    assert not (loose.min_flags & ~tight.min_flags).any()
    assert not (loose.max_flags & ~tight.max_flags).any()


@given(grids)
def test_default_masks_disjoint(labels):
    mask = detect_anomalies(scales_of(labels), AnomalyThresholds.uniform())
    assert not (mask.min_flags & mask.max_flags).any()
