"""Voxel-to-instance offsets and tooling for semantic occupancy labels."""

from .errors import ConfigError, ShapeMismatchError, SpecError, VoxelFormatError
from .grid import (
    DIRECTIONS,
    IGNORE_LABEL,
    GridDims,
    NormalizedOffsetField,
    OffsetField,
    VoxelGrid,
    linear_index,
    read_grid,
    read_offsets,
    write_grid,
    write_offsets,
)
from .metrics import ConfusionMatrix, MetricsReport, finalize, regression_l1
from .offsets import (
    ScanPolicy,
    compute_offsets,
    compute_offsets_naive,
    normalize_offsets,
    run_length_along,
    run_length_positive,
)
from .quality import AnomalyMask, AnomalyThresholds, detect_anomalies, quality_report, refine_labels
from .scales import ScaleField, ScaleHistogram, class_scale_histogram, export_histograms, scales_from_offsets

__version__ = "0.1.0"
