import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxnt.errors import SpecError
from voxnt.offsets import compute_offsets, compute_offsets_naive
from voxnt.quality import detect_anomalies
from voxnt.scales import scales_from_offsets
from voxnt.synth import (
    Box,
    SceneSpec,
    StreakSpec,
    check_supported,
    expected_offsets,
    random_box_spec,
    synthesize,
)


def test_empty_spec_is_uniform():
    grid, manifest = synthesize(SceneSpec((4, 3, 2), background_class=7))
    assert manifest == []
    assert (grid.labels == 7).all()


def test_centre_of_cube():
    spec = SceneSpec((5, 5, 5), [Box((1, 1, 1), (4, 4, 4), 2)])
    f = expected_offsets(spec)
    assert f.values[2, 2, 2].tolist() == [2] * 6
    grid, _ = synthesize(spec)
    assert compute_offsets(grid) == f


def test_speck_is_min_flagged():
    spec = SceneSpec((6, 6, 6), speck_count=1, speck_class=1, seed=3)
    grid, manifest = synthesize(spec)
    (speck,) = manifest
    mask = detect_anomalies(scales_from_offsets(compute_offsets(grid)))
    assert mask.min_flags[speck.min]
    assert mask.min_flags.sum() == 1


def test_streak_has_requested_length():
    spec = SceneSpec((40, 3, 3), streaks=[StreakSpec(1, 35, "x")], seed=1)
    grid, (box,) = synthesize(spec)
    assert np.subtract(box.max, box.min).tolist() == [35, 1, 1]
    assert (grid.labels == 1).sum() == 35


def test_same_seed_same_bytes():
    spec = SceneSpec((10, 10, 4), speck_count=4, streaks=[StreakSpec(2, 5, "y")], seed=42)
    a, _ = synthesize(spec)
    b, _ = synthesize(SceneSpec.from_dict(spec.to_dict()))
    assert a.labels.tobytes() == b.labels.tobytes()


@pytest.mark.parametrize(
    "spec",
    [
        SceneSpec((4, 4, 4), [Box((2, 0, 0), (5, 1, 1), 1)]),
        SceneSpec((4, 4, 4), [Box((0, 0, 0), (1, 1, 1), 25)]),
        SceneSpec((4, 4, 4), streaks=[StreakSpec(1, 9, "x")]),
    ],
)
def test_invalid_specs_raise(spec):
    with pytest.raises(SpecError):
        synthesize(spec)


def test_overlap_is_unsupported_for_closed_form():
    spec = SceneSpec((6, 6, 6), [Box((0, 0, 0), (3, 3, 3), 1), Box((2, 2, 2), (5, 5, 5), 2)])
    grid, _ = synthesize(spec)  # painter's order still renders
    assert grid.labels[2, 2, 2] == 2
    with pytest.raises(SpecError, match="overlap"):
        check_supported(spec)


def test_touching_boxes_unsupported():
    spec = SceneSpec((6, 1, 1), [Box((0, 0, 0), (2, 1, 1), 1), Box((2, 0, 0), (4, 1, 1), 2)])
    with pytest.raises(SpecError):
        expected_offsets(spec)


@given(st.integers(0, 2**32))
def test_three_way_agreement(seed):
    spec = random_box_spec(seed, max_dims=(10, 10, 8))
    grid, _ = synthesize(spec)
    fast = compute_offsets(grid)
    assert fast == expected_offsets(spec)
    assert fast == compute_offsets_naive(grid)


def test_spec_file_round_trip(tmp_path):
    spec = random_box_spec(11)
    path = tmp_path / "s.json"
    spec.dump(path)
    assert SceneSpec.load(path).to_dict() == spec.to_dict()
