"""Command-line front end: ``voxnt offsets|stats|refine|eval|synth|bench``.

Exit codes: 0 success, 1 configuration or usage error, 2 when some input
files failed while others were processed.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeMismatchError, VoxelFormatError
from .grid import (
    DIRECTIONS,
    GRID_MAGIC,
    GridDims,
    read_dims,
    read_grid,
    write_grid,
    write_offsets,
)
from .metrics import ConfusionMatrix, finalize
from .offsets import (
    ScanPolicy,
    compute_offsets,
    compute_offsets_naive,
    default_workers,
    regression_mask,
    run_length_along,
)
from .quality import (
    CAR_CLASS,
    DEFAULT_K_MAX,
    DEFAULT_K_MIN,
    AnomalyThresholds,
    detect_anomalies,
    quality_report,
    refine_labels,
)
from .scales import default_edges, export_histograms, grid_histograms, merge_histograms, scales_from_offsets
from .synth import SceneSpec, random_box_spec, synthesize

log = logging.getLogger("voxnt")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2

# flag defaults; a --config JSON file may override these, explicit flags override both
DEFAULTS: Dict[str, object] = {
    "dims": None,
    "axis_order": "xyz",
    "out": ".",
    "workers": None,
    "format": None,
    "num_classes": 20,
    "jsonl": False,
    "kmin": ",".join(map(str, DEFAULT_K_MIN)),
    "kmax": ",".join("none" if v is None else str(v) for v in DEFAULT_K_MAX),
    "target_class": str(CAR_CLASS),
    "include_empty": True,
    "bins": 32,
    "hist_format": "csv",
    "per_run": False,
}


class Job:
    """Resolved settings for one subcommand run."""

    def __init__(self, args: argparse.Namespace):
        config: Dict[str, object] = {}
        if getattr(args, "config", None):
            with open(args.config) as fh:
                config = json.load(fh)
            unknown = set(config) - set(DEFAULTS) - {"inputs", "truth", "pred"}
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        self.args = args
        self.config = config

    def get(self, name: str):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        return self.config.get(name, DEFAULTS.get(name))

    @property
    def dims(self) -> Optional[GridDims]:
        value = self.get("dims")
        if value is None:
            return None
        return GridDims.parse(value) if isinstance(value, str) else GridDims.of(value)

    @property
    def workers(self) -> int:
        value = self.get("workers")
        workers = default_workers() if value is None else int(value)
        if workers < 1:
            raise ConfigError("worker count must be at least 1")
        return workers

    @property
    def out(self) -> Path:
        out = Path(str(self.get("out")))
        out.mkdir(parents=True, exist_ok=True)
        return out

    def inputs(self, name: str = "inputs") -> List[str]:
        patterns = getattr(self.args, name, None) or self.config.get(name) or []
        if isinstance(patterns, str):
            patterns = [patterns]
        found: List[str] = []
        for pattern in patterns:
            matches = sorted(glob.glob(pattern)) if glob.has_magic(pattern) else (
                [pattern] if os.path.exists(pattern) else []
            )
            found.extend(m for m in matches if m not in found)
        return found

    def read(self, path: str):
        return read_grid(
            path,
            dims=self.dims,
            axis_order=str(self.get("axis_order")),
            num_classes=int(self.get("num_classes")),
        )

    def input_format(self, path: str) -> str:
        with open(path, "rb") as fh:
            return "container" if fh.read(4) == GRID_MAGIC else "raw"

    def emit(self, record: dict, text: str) -> None:
        print(json.dumps(record) if self.get("jsonl") else text, flush=True)


def _triple(text: str, allow_none: bool = False):
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ConfigError(f"expected one or three comma-separated values, got {text!r}")
    out = []
    for p in parts:
        if allow_none and p.lower() in ("none", "off", "-"):
            out.append(None)
        else:
            out.append(int(p))
    return tuple(out)


def _classes(text) -> List[int]:
    if isinstance(text, int):
        return [text]
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    return [int(t) for t in str(text).split(",") if t.strip()]


def _run_files(job: Job, files: Sequence[str], work: Callable[[str], dict]) -> int:
    """Process files on a worker pool, report each in input order, return the exit code."""

    def guarded(path: str) -> dict:
        start = time.perf_counter()
        try:
            record = work(path)
            record.update(file=path, status="ok")
        except (OSError, ValueError) as exc:
            log.debug("failed on %s", path, exc_info=True)
            record = {"file": path, "status": "error", "error": str(exc)}
        record["seconds"] = round(time.perf_counter() - start, 6)
        return record

    with ThreadPoolExecutor(max_workers=job.workers) as pool:
        records = list(pool.map(guarded, files))
    failed = 0
    for r in records:
        if r["status"] == "ok":
            job.emit(r, f"{r['file']}: ok ({r['seconds']:.3f} s)")
        else:
            failed += 1
            job.emit(r, f"{r['file']}: FAILED: {r['error']}")
    if failed == len(records):
        return EXIT_PARTIAL if records else EXIT_USAGE
    return EXIT_PARTIAL if failed else EXIT_OK


def _no_inputs(job: Job) -> int:
    print("no inputs matched", file=sys.stderr)
    return EXIT_USAGE


def _out_path(job: Job, src: str, suffix: Optional[str] = None) -> Path:
    name = Path(src).name if suffix is None else Path(src).stem + suffix
    dest = job.out / name
    if dest.resolve() == Path(src).resolve():
        raise ConfigError(f"refusing to overwrite input {src}; choose another --out")
    return dest


def cmd_offsets(job: Job) -> int:
    files = job.inputs()
    if not files:
        return _no_inputs(job)
    policy = ScanPolicy(include_empty=bool(job.get("include_empty")))

    def work(path: str) -> dict:
        grid = job.read(path)
        # files are already spread over the pool; keep each grid single-threaded
        field = compute_offsets(grid, policy, workers=1)
        dest = _out_path(job, path, ".vxo")
        write_offsets(field, dest)
        record = {"output": str(dest), "dims": list(grid.dims.shape)}
        if not policy.include_empty:
            mask = _out_path(job, path, ".mask")
            mask.write_bytes(regression_mask(grid, policy).astype(np.uint8).tobytes())
            record["mask"] = str(mask)
        return record

    return _run_files(job, files, work)


def cmd_stats(job: Job) -> int:
    files = job.inputs()
    if not files:
        return _no_inputs(job)
    bins = int(job.get("bins"))
    # shared bin edges across files
    dims = [job.dims] if job.dims is not None else []
    for path in files:
        try:
            header = read_dims(path)
        except OSError:
            continue
        if header is not None:
            dims.append(header)
    if not dims:
        raise ConfigError("raw inputs need --dims")
    edges = default_edges(GridDims(*(max(d.shape[a] for d in dims) for a in range(3))), bins)
    results: Dict[str, list] = {}

    def work(path: str) -> dict:
        grid = job.read(path)
        field = compute_offsets(grid, workers=1)
        results[path] = grid_histograms(
            grid, scales_from_offsets(field), edges, per_run=bool(job.get("per_run")), offsets=field
        )
        return {"voxels": grid.dims.total}

    code = _run_files(job, files, work)
    merged = merge_histograms(*(results[p] for p in files if p in results))
    fmt = str(job.get("hist_format"))
    dest = job.out / f"histograms.{fmt}"
    export_histograms(merged, dest, fmt)
    job.emit({"output": str(dest), "histograms": len(merged)}, f"wrote {dest}")
    return code


def _thresholds(job: Job) -> AnomalyThresholds:
    return AnomalyThresholds(
        _triple(job.get("kmin")),
        _triple(job.get("kmax"), allow_none=True),
        frozenset(_classes(job.get("target_class"))),
    )


def cmd_refine(job: Job) -> int:
    files = job.inputs()
    if not files:
        return _no_inputs(job)
    thresholds = _thresholds(job)
    reports: Dict[str, dict] = {}

    def work(path: str) -> dict:
        grid = job.read(path)
        mask = detect_anomalies(scales_from_offsets(compute_offsets(grid, workers=1)), thresholds)
        refined = refine_labels(grid, mask, thresholds)
        fmt = job.get("format") or job.input_format(path)
        dest = _out_path(job, path)
        write_grid(refined, dest, fmt, str(job.get("axis_order")) if fmt == "raw" else "xyz")
        changed = int((refined.labels != grid.labels).sum())
        reports[path] = {"file": path, "output": dest.name, "changed": changed, **quality_report(grid, mask)}
        return {"output": str(dest), "changed": changed}

    code = _run_files(job, files, work)
    report = {"thresholds": thresholds.to_dict(), "files": [reports[p] for p in files if p in reports]}
    dest = job.out / "quality_report.json"
    with open(dest, "w") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
    job.emit({"output": str(dest)}, f"wrote {dest}")
    return code


def cmd_eval(job: Job) -> int:
    k = int(job.get("num_classes"))
    matrices: List[ConfusionMatrix] = []
    for path in job.args.from_matrices or []:
        with open(path) as fh:
            matrices.append(ConfusionMatrix.from_dict(json.load(fh)))
    truth_files = job.inputs("truth")
    pred_files = job.inputs("pred")
    if not matrices and not truth_files:
        return _no_inputs(job)
    if len(truth_files) != len(pred_files):
        print(f"{len(truth_files)} truth files but {len(pred_files)} predictions", file=sys.stderr)
        return EXIT_USAGE
    pairs = list(zip(truth_files, pred_files))
    shards = [pairs[i:: job.workers] for i in range(job.workers)] if pairs else []

    def work(shard) -> ConfusionMatrix:
        cm = ConfusionMatrix(k)
        for t, p in shard:
            cm.accumulate(job.read(t), job.read(p))
        return cm

    try:
        with ThreadPoolExecutor(max_workers=job.workers) as pool:
            matrices.extend(pool.map(work, shards))
    except ShapeMismatchError as exc:
        print(f"shape mismatch: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    cm = ConfusionMatrix(k)
    for m in matrices:
        cm = cm.merge(m)
    if job.args.matrix_out:
        with open(job.args.matrix_out, "w") as fh:
            json.dump(cm.to_dict(), fh)
            fh.write("\n")
    text = finalize(cm).to_json()
    print(text)
    if job.args.report:
        Path(job.args.report).write_text(text + "\n")
    return EXIT_OK


def cmd_synth(job: Job) -> int:
    a = job.args
    if a.spec:
        specs = [SceneSpec.load(a.spec)]
    else:
        max_dims = job.dims.shape if job.dims is not None else (16, 16, 16)
        specs = [random_box_spec(a.seed + n, max_dims, num_classes=int(job.get("num_classes"))) for n in range(a.count)]
    fmt = job.get("format") or "container"
    out = job.out
    for n, spec in enumerate(specs):
        grid, manifest = synthesize(spec)
        stem = f"scene_{n:04d}"
        write_grid(grid, out / f"{stem}.vxg", fmt)
        spec.dump(out / f"{stem}.spec.json")
        with open(out / f"{stem}.manifest.json", "w") as fh:
            json.dump([{"min": list(b.min), "max": list(b.max), "class_id": b.class_id} for b in manifest], fh, indent=1)
            fh.write("\n")
        job.emit({"output": str(out / f"{stem}.vxg"), "dims": list(grid.dims.shape), "shapes": len(manifest)},
                 f"wrote {out / (stem + '.vxg')} ({grid.dims}, {len(manifest)} shapes)")
    return EXIT_OK


def _best_of(fn: Callable[[], object], repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def cmd_bench(job: Job) -> int:
    dims = job.dims or GridDims(16, 16, 16)
    rng = np.random.default_rng(job.args.seed)
    labels = rng.integers(0, job.args.classes, dims.shape).astype(np.uint16)
    n = dims.total
    grid_name = str(dims)
    records = []
    for d in DIRECTIONS:
        t = _best_of(lambda: run_length_along(labels, d[0], d[1]), job.args.repeat)
        records.append({"grid": grid_name, "direction": d, "impl": "fast", "ns_per_voxel": t * 1e9 / n})
    fast = _best_of(lambda: compute_offsets(labels, workers=job.workers), job.args.repeat)
    records.append({"grid": grid_name, "direction": "all", "impl": "fast", "ns_per_voxel": fast * 1e9 / n})
    agree = None
    if not job.args.skip_naive:
        naive = _best_of(lambda: compute_offsets_naive(labels), 1)
        agree = compute_offsets(labels) == compute_offsets_naive(labels)
        records.append({"grid": grid_name, "direction": "all", "impl": "naive", "ns_per_voxel": naive * 1e9 / n})
        records.append({"grid": grid_name, "direction": "all", "impl": "speedup", "ns_per_voxel": None,
                        "speedup": naive / fast, "agree": agree})
    for r in records:
        print(json.dumps(r))
    if job.args.report:
        with open(job.args.report, "w") as fh:
            json.dump(records, fh, indent=1)
            fh.write("\n")
    return EXIT_OK if agree is not False else EXIT_PARTIAL


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of defaults; explicit flags win")
    common.add_argument("--dims", help="grid dims X,Y,Z (required for raw inputs)")
    common.add_argument("--axis-order", dest="axis_order", help="axis order of raw files, slowest first (default xyz)")
    common.add_argument("--out", help="output directory (default .)")
    common.add_argument("--workers", type=int, help="worker threads (default $VOXNT_WORKERS or 1)")
    common.add_argument("--format", choices=("raw", "container"), help="grid output format")
    common.add_argument("--num-classes", dest="num_classes", type=int, help="class count incl. empty (default 20)")
    common.add_argument("--jsonl", action="store_true", default=None, help="line-delimited JSON reports")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="voxnt", description="Voxel label offsets, scales, refinement and metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("offsets", parents=[common], help="write six-direction offset fields")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--include-empty", dest="include_empty", type=lambda s: s.lower() in ("1", "true", "yes"),
                   help="regress the empty class (default true)")
    p.set_defaults(func=cmd_offsets)

    p = sub.add_parser("stats", parents=[common], help="per-class instance scale histograms")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--bins", type=int)
    p.add_argument("--hist-format", dest="hist_format", choices=("csv", "json"))
    p.add_argument("--per-run", dest="per_run", action="store_true", default=None,
                   help="one sample per run instead of per voxel")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("refine", parents=[common], help="ignore anomalous target-class voxels")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--kmin", help="minimum scale per axis, e.g. 3 or 3,3,3")
    p.add_argument("--kmax", help="maximum scale per axis; 'none' disables an axis (default 30,30,none)")
    p.add_argument("--target-class", dest="target_class", help="comma-separated class ids (default 1, car)")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="IoU / mIoU of predictions against truth")
    p.add_argument("--truth", nargs="*", help="truth grids or globs")
    p.add_argument("--pred", nargs="*", help="prediction grids or globs, paired with --truth in sorted order")
    p.add_argument("--from-matrices", dest="from_matrices", nargs="*", help="saved confusion matrices to merge")
    p.add_argument("--matrix-out", dest="matrix_out", help="save the accumulated confusion matrix")
    p.add_argument("--report", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic box scenes")
    p.add_argument("--spec", help="SceneSpec JSON; otherwise random specs are drawn")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", parents=[common], help="offset throughput, fast vs naive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--skip-naive", dest="skip_naive", action="store_true")
    p.add_argument("--report", help="also write the records as a JSON array")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(Job(args))
    except (ConfigError, ShapeMismatchError, VoxelFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
