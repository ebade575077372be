"""Occupancy/SDF training targets: the original SortSample (reproduced for
comparison; it cannot terminate on fully embedded structures) and the
revised variant that admits outside points lying inside other structures
and relabels them by their containing structure.

Distance-to-surface queries run against a per-(volume, class) distance
field built once from Euclidean distance transforms of the class mask;
inside/outside tests use exact voxel-label lookup.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import sensor as sensor_mod
from .deform import LatticeDeformation, deform_volume, sample_lattice
from .phantom import extract_skin
from .sensor import (
    CameraIntrinsics,
    CameraPose,
    SensorPointCloud,
    backproject,
    render_depth,
    sample_camera_pose,
)
from .volume import AxisAlignedBox, VoxelLabelVolume, aabb_of_class

__all__ = [
    "DistanceField",
    "OccupancySampleSet",
    "NonTermination",
    "TrainingPair",
    "DegeneratePairError",
    "sort_sample_original",
    "sort_sample_revised",
    "build_training_pair",
    "save_pair",
    "load_pair",
]

DRAW_BATCH = 4096
DEFAULT_SAMPLES_PER_SIDE = 32


class StructureAbsentError(ValueError):
    """The requested class has no voxels in the volume."""


class DegeneratePairError(RuntimeError):
    """A training pair had to be discarded (e.g. the render missed)."""


class DistanceField:
    """Signed distance to a class's voxelized surface, trilinearly sampled.

    Built from inside/outside Euclidean distance transforms of the class
    mask; the half-voxel shift approximates center-to-face distance. Values
    agree with the exhaustive face-scan oracle to within one voxel spacing.
    """

    def __init__(self, v: VoxelLabelVolume, class_id: int):
        mask = np.asarray(v.labels) == class_id
        if not mask.any():
            raise StructureAbsentError(f"class {class_id} absent from volume")
        outside = ndimage.distance_transform_edt(~mask)
        inside = ndimage.distance_transform_edt(mask)
        self.grid = (np.where(mask, -(inside - 0.5), outside - 0.5)) * v.spacing
        self.spacing = v.spacing
        self.origin = np.asarray(v.origin)
        self.dims = np.asarray(v.dims)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at world points (clamped to the grid)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        # Grid value i sits at the voxel center origin + (i + 0.5) * spacing.
        x = (pts - self.origin) / self.spacing - 0.5
        x = np.clip(x, 0.0, self.dims - 1.000001)
        i0 = np.floor(x).astype(np.int64)
        i0 = np.minimum(i0, self.dims - 2)
        t = x - i0
        out = np.zeros(len(pts))
        for dx in (0, 1):
            wx = t[:, 0] if dx else 1 - t[:, 0]
            for dy in (0, 1):
                wy = t[:, 1] if dy else 1 - t[:, 1]
                for dz in (0, 1):
                    wz = t[:, 2] if dz else 1 - t[:, 2]
                    out += wx * wy * wz * self.grid[
                        i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                    ]
        return out


@dataclass(frozen=True)
class OccupancySampleSet:
    """N inside + N outside samples for one structure.

    Inside samples carry the structure's own label; outside labels are 0 for
    the original algorithm and the containing structure's label for the
    revised one. Signed distances are to the sampled structure's surface
    (the sorting key), negative inside it.
    """

    class_id: int
    inside_points: np.ndarray  # (N, 3)
    inside_sdf: np.ndarray  # (N,)
    outside_points: np.ndarray  # (N, 3)
    outside_labels: np.ndarray  # (N,)
    outside_sdf: np.ndarray  # (N,)

    @property
    def n(self) -> int:
        return len(self.inside_points)

    def all_points(self) -> np.ndarray:
        return np.concatenate([self.inside_points, self.outside_points])

    def all_labels(self) -> np.ndarray:
        return np.concatenate(
            [np.full(self.n, self.class_id, dtype=np.uint16), self.outside_labels]
        )

    def all_sdf(self) -> np.ndarray:
        return np.concatenate([self.inside_sdf, self.outside_sdf])

    def transformed(self, fn) -> "OccupancySampleSet":
        """Apply a rigid map to the sample positions (distances unchanged)."""
        return OccupancySampleSet(
            self.class_id,
            fn(self.inside_points),
            self.inside_sdf,
            fn(self.outside_points),
            self.outside_labels,
            self.outside_sdf,
        )


@dataclass(frozen=True)
class NonTermination:
    """First-class report: the draw budget ran out before both sides filled."""

    class_id: int
    draws: int
    num_inside: int
    num_outside: int


def _empty_set(class_id: int) -> OccupancySampleSet:
    z3 = np.zeros((0, 3))
    z = np.zeros(0)
    return OccupancySampleSet(class_id, z3, z, z3, np.zeros(0, dtype=np.uint16), z)


def _sample_box(rng: np.random.Generator, box: AxisAlignedBox, count: int) -> np.ndarray:
    return rng.uniform(box.min_corner, box.max_corner, size=(count, 3))


def _keep_nearest(points, distances, n):
    order = np.argsort(np.abs(distances), kind="stable")[:n]
    return points[order], distances[order]


def sort_sample_original(
    v: VoxelLabelVolume,
    class_id: int,
    n: int,
    rng: np.random.Generator,
    max_draws: int = 10**6,
    distance_field: DistanceField | None = None,
) -> OccupancySampleSet | NonTermination:
    """The 6-step original algorithm.

    Draws uniformly in the structure's 50%-enlarged AABB; outside candidates
    inside *another* structure are discarded, which is exactly why this
    cannot terminate for fully embedded structures. Returns a
    :class:`NonTermination` report once `max_draws` is exhausted.
    """
    box = aabb_of_class(v, class_id)
    if box is None:
        raise StructureAbsentError(f"class {class_id} absent from volume")
    if n == 0:
        return _empty_set(class_id)
    big = box.enlarged(0.5)
    df = distance_field or DistanceField(v, class_id)
    s_i, s_o = [], []
    draws = 0
    while draws < max_draws and (
        sum(len(a) for a in s_i) < n or sum(len(a) for a in s_o) < n
    ):
        batch = min(DRAW_BATCH, max_draws - draws)
        pts = _sample_box(rng, big, batch)
        draws += batch
        labels = v.label_at(pts)
        s_i.append(pts[labels == class_id])
        s_o.append(pts[labels == 0])  # step 3: drop points inside other structures
    inside = np.concatenate(s_i) if s_i else np.zeros((0, 3))
    outside = np.concatenate(s_o) if s_o else np.zeros((0, 3))
    if len(inside) < n or len(outside) < n:
        return NonTermination(class_id, draws, len(inside), len(outside))
    inside, inside_sdf = _keep_nearest(inside, df(inside), n)
    outside, outside_sdf = _keep_nearest(outside, df(outside), n)
    return OccupancySampleSet(
        class_id,
        inside,
        inside_sdf,
        outside,
        np.zeros(n, dtype=np.uint16),
        outside_sdf,
    )


def sort_sample_revised(
    v: VoxelLabelVolume,
    class_id: int,
    n: int,
    rng: np.random.Generator,
    distance_field: DistanceField | None = None,
    _return_discards: bool = False,
) -> OccupancySampleSet:
    """Revised SortSample: the outside set admits points inside other
    structures, which are relabeled by the structure containing them after
    the nearest-N truncation. Terminates for any structure with nonzero
    surface area, because the enlarged AABB always contains non-structure
    space."""
    box = aabb_of_class(v, class_id)
    if box is None:
        raise StructureAbsentError(f"class {class_id} absent from volume")
    if n == 0:
        return _empty_set(class_id)
    big = box.enlarged(0.5)
    df = distance_field or DistanceField(v, class_id)
    s_i, s_o = [], []
    n_i = n_o = 0
    while n_i < n or n_o < n:
        pts = _sample_box(rng, big, DRAW_BATCH)
        labels = v.label_at(pts)
        hit = labels == class_id
        s_i.append(pts[hit])
        s_o.append(pts[~hit])
        n_i += int(hit.sum())
        n_o += int((~hit).sum())
    inside = np.concatenate(s_i)
    outside = np.concatenate(s_o)
    inside_kept, inside_sdf = _keep_nearest(inside, df(inside), n)
    out_d = df(outside)
    order = np.argsort(np.abs(out_d), kind="stable")
    outside_kept = outside[order[:n]]
    outside_sdf = out_d[order[:n]]
    outside_labels = v.label_at(outside_kept)
    result = OccupancySampleSet(
        class_id, inside_kept, inside_sdf, outside_kept, outside_labels, outside_sdf
    )
    if _return_discards:
        return result, outside[order[n:]], out_d[order[n:]]
    return result


@dataclass(frozen=True)
class TrainingPair:
    """One training example: sensor cloud + occupancy samples, camera space."""

    cloud: SensorPointCloud
    positions: np.ndarray  # (S, 3) camera coordinates, meters
    labels: np.ndarray  # (S,) uint16
    sdf: np.ndarray  # (S,) meters, signed
    num_classes: int
    seed: int
    samples_per_side: int

    def __post_init__(self):
        object.__setattr__(
            self, "positions", np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        )
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.uint16))
        object.__setattr__(self, "sdf", np.asarray(self.sdf, dtype=np.float64))


def build_training_pair(
    v: VoxelLabelVolume,
    seed: int,
    n: int = DEFAULT_SAMPLES_PER_SIDE,
    deform: bool = True,
    intrinsics: CameraIntrinsics | None = None,
    pose: CameraPose | None = None,
    lattice: LatticeDeformation | None = None,
) -> TrainingPair:
    """Deform, render, backproject and sample one (cloud, samples) pair.

    The skin itself is not sampled (only internal structures get occupancy
    samples). Sample positions are expressed in camera coordinates.
    Deterministic per seed. Raises :class:`DegeneratePairError` when the
    render misses the body entirely.
    """
    rng = np.random.default_rng(seed)
    num_classes = v.num_classes
    if num_classes < 1:
        raise DegeneratePairError("volume has no labeled structures")

    if deform and lattice is None:
        union_box = _union_box(v)
        lattice = sample_lattice(rng, union_box.min_corner, union_box.max_corner)
    if lattice is not None:
        v = deform_volume(v, lattice)

    skin = extract_skin(v)
    if skin.is_empty:
        raise DegeneratePairError("deformed volume produced an empty skin mesh")
    if pose is None:
        target = _union_box(v).center
        pose = sample_camera_pose(rng, target)
    depth = render_depth(skin, pose, intrinsics)
    if not np.isfinite(depth).any():
        raise DegeneratePairError("render produced an all-miss depth image")
    cloud = backproject(depth, intrinsics, seed=seed)

    positions, labels, sdf = [], [], []
    for class_id in range(1, num_classes + 1):
        try:
            sample_set = sort_sample_revised(v, class_id, n, rng)
        except StructureAbsentError:
            continue
        cam_set = sample_set.transformed(pose.world_to_camera)
        positions.append(cam_set.all_points())
        labels.append(cam_set.all_labels())
        sdf.append(cam_set.all_sdf())
    if not positions:
        raise DegeneratePairError("no structure produced occupancy samples")
    return TrainingPair(
        cloud=cloud,
        positions=np.concatenate(positions),
        labels=np.concatenate(labels),
        sdf=np.concatenate(sdf),
        num_classes=num_classes,
        seed=seed,
        samples_per_side=n,
    )


def _union_box(v: VoxelLabelVolume) -> AxisAlignedBox:
    idx = np.argwhere(np.asarray(v.labels) > 0)
    if len(idx) == 0:
        raise DegeneratePairError("volume is empty")
    lo = v.origin + v.spacing * idx.min(axis=0)
    hi = v.origin + v.spacing * (idx.max(axis=0) + 1)
    return AxisAlignedBox(lo, hi)


_RECORD = struct.Struct("<dddHd")


def save_pair(pair: TrainingPair, path) -> None:
    """Pair file: one-line JSON header, raw float64 cloud points, then raw
    sample records (3 doubles position, uint16 label, double signed dist)."""
    header = {
        "n": pair.samples_per_side,
        "num_classes": pair.num_classes,
        "seed": pair.seed,
        "cloud_points": len(pair.cloud),
        "sample_count": len(pair.positions),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(pair.cloud.points.astype("<f8").tobytes())
        for p, lab, d in zip(pair.positions, pair.labels, pair.sdf):
            f.write(_RECORD.pack(p[0], p[1], p[2], int(lab), d))


def load_pair(path) -> TrainingPair:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        n_cloud = header["cloud_points"]
        n_samples = header["sample_count"]
        cloud = np.frombuffer(f.read(n_cloud * 24), dtype="<f8").reshape(-1, 3)
        positions = np.zeros((n_samples, 3))
        labels = np.zeros(n_samples, dtype=np.uint16)
        sdf = np.zeros(n_samples)
        for i in range(n_samples):
            x, y, z, lab, d = _RECORD.unpack(f.read(_RECORD.size))
            positions[i] = (x, y, z)
            labels[i] = lab
            sdf[i] = d
    return TrainingPair(
        cloud=SensorPointCloud(cloud, seed=header["seed"]),
        positions=positions,
        labels=labels,
        sdf=sdf,
        num_classes=header["num_classes"],
        seed=header["seed"],
        samples_per_side=header["n"],
    )
