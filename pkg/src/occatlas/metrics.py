"""AABB localization metrics (center distance, IoU, encompassment scaling
factor), per-structure aggregation and CSV emission.

Internal storage is meters; center distance is reported in centimeters to
match the evaluation charts. The ESF scales the *estimate* uniformly about
its own center until the reference is contained, so it is deliberately
asymmetric in its arguments.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .volume import AxisAlignedBox

__all__ = [
    "MetricRecord",
    "center_distance",
    "iou",
    "esf",
    "evaluate_boxes",
    "aggregate",
    "write_metric_csv",
]

METERS_TO_CM = 100.0


@dataclass(frozen=True)
class MetricRecord:
    """Metrics for one structure on one evaluation case. A missing estimate
    or reference leaves the values at None."""

    structure_id: int
    cd_cm: float | None
    iou: float | None
    esf: float | None
    estimate_present: bool
    reference_present: bool

    @property
    def missing(self) -> bool:
        return not (self.estimate_present and self.reference_present)


def center_distance(a: AxisAlignedBox, b: AxisAlignedBox) -> float:
    """Euclidean distance between box centers, in centimeters."""
    return float(np.linalg.norm(a.center - b.center)) * METERS_TO_CM


def iou(a: AxisAlignedBox, b: AxisAlignedBox) -> float:
    """Intersection volume over union volume. Two zero-volume boxes give 0
    (degenerate case)."""
    lo = np.maximum(a.min_corner, b.min_corner)
    hi = np.minimum(a.max_corner, b.max_corner)
    inter = float(np.prod(np.maximum(hi - lo, 0.0)))
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def esf(estimate: AxisAlignedBox, reference: AxisAlignedBox) -> float:
    """Minimal uniform scale s >= 1 of the estimate about its own center
    such that the reference is contained in the scaled estimate.

    Closed form: per axis and side, |reference face - estimate center| over
    the estimate's half extent; infinite when the estimate has zero extent
    on an axis the reference needs."""
    center = estimate.center
    half = 0.5 * estimate.extents
    need = np.maximum(
        np.abs(reference.min_corner - center), np.abs(reference.max_corner - center)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(need > 0, need / half, 0.0)
    if np.any(np.isnan(ratios)) or np.any(np.isinf(ratios)):
        return math.inf
    return max(1.0, float(ratios.max()))


def evaluate_boxes(
    estimates: dict[int, AxisAlignedBox | None],
    references: dict[int, AxisAlignedBox | None],
) -> list[MetricRecord]:
    """One record per structure id appearing in the reference set."""
    records = []
    for structure_id in sorted(references):
        ref = references[structure_id]
        est = estimates.get(structure_id)
        if ref is None or est is None:
            records.append(
                MetricRecord(structure_id, None, None, None, est is not None, ref is not None)
            )
            continue
        records.append(
            MetricRecord(
                structure_id,
                center_distance(est, ref),
                iou(est, ref),
                esf(est, ref),
                True,
                True,
            )
        )
    return records


@dataclass(frozen=True)
class MetricSummary:
    structure_id: int
    mean: float
    std: float
    count: int
    misses: int


def _moments(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    # Population standard deviation (ddof=0).
    return float(arr.mean()), float(arr.std())


def aggregate(records: list[MetricRecord]) -> dict[str, list[MetricSummary]]:
    """Per-structure (mean, population std) for each metric plus an overall
    row (structure_id -1). Missing-value records are excluded from the
    moments and counted as misses."""
    if not records:
        raise ValueError("no metric records to aggregate")
    by_structure: dict[int, list[MetricRecord]] = {}
    for r in records:
        by_structure.setdefault(r.structure_id, []).append(r)

    out: dict[str, list[MetricSummary]] = {}
    for metric in ("cd_cm", "iou", "esf"):
        rows = []
        all_values = []
        all_misses = 0
        for sid in sorted(by_structure):
            values = [
                getattr(r, metric)
                for r in by_structure[sid]
                if not r.missing and math.isfinite(getattr(r, metric))
            ]
            misses = len(by_structure[sid]) - len(values)
            all_misses += misses
            if values:
                mean, std = _moments(values)
            else:
                mean, std = math.nan, math.nan
            rows.append(MetricSummary(sid, mean, std, len(values), misses))
            all_values.extend(values)
        overall_mean, overall_std = _moments(all_values) if all_values else (math.nan, math.nan)
        rows.append(MetricSummary(-1, overall_mean, overall_std, len(all_values), all_misses))
        out[metric] = rows
    return out


def write_metric_csv(summaries: list[MetricSummary], path) -> None:
    """Chart-style CSV: ValueNumber, Mean, Std, Count, Misses. The overall
    row uses ValueNumber -1."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ValueNumber", "Mean", "Std", "Count", "Misses"])
        for s in summaries:
            writer.writerow([s.structure_id, repr(s.mean), repr(s.std), s.count, s.misses])
