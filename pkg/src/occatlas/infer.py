"""Hierarchical volumetric inference: coarse random probing of the
normalized cube followed by dense grid evaluation inside the enlarged probe
bounding box, producing a predicted label volume (the atlas), per-class
AABBs and optional meshes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .occnet import OccupancyModel, decode, encode
from .sensor import SensorPointCloud, normalize_iso
from .volume import (
    AxisAlignedBox,
    TriMesh,
    VoxelLabelVolume,
    aabb_of_class,
    extract_mesh,
    pad_boundary,
)

__all__ = [
    "AtlasPrediction",
    "coarse_probe",
    "dense_reconstruct",
    "reconstruct_atlas",
    "extract_atlas_meshes",
    "save_boxes_json",
    "load_boxes_json",
]

DEFAULT_PROBE_COUNT = 40_000
DEFAULT_RESOLUTION = 64
DEFAULT_MARGIN = 0.15
QUERY_CHUNK = 16_384


@dataclass(frozen=True)
class AtlasPrediction:
    """Predicted label volume in metric camera space + per-class boxes.

    `boxes[c]` is None for absent classes (never a fabricated box)."""

    volume: VoxelLabelVolume
    boxes: dict[int, AxisAlignedBox | None]
    num_classes: int

    def present_classes(self) -> list[int]:
        return [c for c, b in self.boxes.items() if b is not None]


def _batched_classes(model: OccupancyModel, latent, queries) -> np.ndarray:
    """Eval-mode argmax class per query, chunked to bound memory."""
    out = np.zeros(len(queries), dtype=np.uint16)
    for start in range(0, len(queries), QUERY_CHUNK):
        chunk = queries[start : start + QUERY_CHUNK]
        logits, _ = decode(model, latent, chunk, train=False)
        out[start : start + QUERY_CHUNK] = np.argmax(logits, axis=1).astype(np.uint16)
    return out


def coarse_probe(
    model: OccupancyModel,
    latent: np.ndarray,
    count: int = DEFAULT_PROBE_COUNT,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Query `count` random points in the normalized cube [-1, 1]^3.

    Returns (points, classes) for the probes whose argmax class is not the
    None class; both arrays are empty when nothing is inside."""
    rng = rng or np.random.default_rng(0)
    probes = rng.uniform(-1.0, 1.0, size=(count, 3))
    classes = _batched_classes(model, latent, probes)
    hit = classes != 0
    return probes[hit], classes[hit]


def dense_reconstruct(
    model: OccupancyModel,
    latent: np.ndarray,
    probe_points: np.ndarray,
    norm,
    resolution: int = DEFAULT_RESOLUTION,
    margin: float = DEFAULT_MARGIN,
) -> AtlasPrediction:
    """Dense per-voxel argmax over the probe AABB enlarged by `margin`.

    The grid is isotropic: the longest enlarged extent is divided into
    `resolution` voxels. The output volume and boxes are denormalized into
    metric camera coordinates via the cloud's normalization `norm`.
    """
    num_classes = model.num_classes
    if len(probe_points) == 0:
        empty = VoxelLabelVolume(
            np.zeros((1, 1, 1), dtype=np.uint16), spacing=1.0 / max(norm.scale, 1e-12)
        )
        return AtlasPrediction(empty, {c: None for c in range(1, num_classes + 1)}, num_classes)

    box = AxisAlignedBox(probe_points.min(axis=0), probe_points.max(axis=0))
    # Enlarge each extent by `margin`, split evenly per side.
    box = box.enlarged(margin)
    pitch = float(box.extents.max()) / resolution
    dims = np.maximum(np.ceil(box.extents / pitch).astype(int), 1)

    ix, iy, iz = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    centers = box.min_corner + pitch * (np.stack([ix, iy, iz], axis=-1) + 0.5)
    classes = _batched_classes(model, latent, centers.reshape(-1, 3))
    labels = classes.reshape(tuple(dims))

    # Back to metric camera coordinates: the map is isotropic, so the grid
    # stays axis-aligned with spacing pitch / scale.
    volume = VoxelLabelVolume(
        labels,
        spacing=pitch / norm.scale,
        origin=norm.invert(box.min_corner),
    )
    boxes = {c: aabb_of_class(volume, c) for c in range(1, num_classes + 1)}
    return AtlasPrediction(volume, boxes, num_classes)


def reconstruct_atlas(
    model: OccupancyModel,
    cloud: SensorPointCloud,
    probes: int = DEFAULT_PROBE_COUNT,
    resolution: int = DEFAULT_RESOLUTION,
    margin: float = DEFAULT_MARGIN,
    seed: int = 0,
) -> AtlasPrediction:
    """Full two-stage inference from a raw camera-space cloud."""
    normalized, norm = normalize_iso(cloud)
    latent = encode(model.params, normalized.points)
    rng = np.random.default_rng(seed)
    probe_points, _ = coarse_probe(model, latent, probes, rng)
    return dense_reconstruct(model, latent, probe_points, norm, resolution, margin)


def extract_atlas_meshes(pred: AtlasPrediction) -> list[tuple[int, TriMesh]]:
    """Closed per-class meshes (boundary-padded marching cubes) as
    (class id, mesh) pairs; absent classes are skipped."""
    padded = pad_boundary(pred.volume)
    meshes = []
    for c in pred.present_classes():
        mesh = extract_mesh(padded, c)
        if not mesh.is_empty:
            meshes.append((c, mesh))
    return meshes


def save_boxes_json(boxes: dict[int, AxisAlignedBox | None], path) -> None:
    """{class id -> [min xyz, max xyz] in meters | null}."""
    payload = {
        str(c): (b.to_json() if b is not None else None) for c, b in sorted(boxes.items())
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)


def load_boxes_json(path) -> dict[int, AxisAlignedBox | None]:
    with open(path) as f:
        payload = json.load(f)
    return {
        int(c): (AxisAlignedBox.from_json(v) if v is not None else None)
        for c, v in payload.items()
    }
