"""Body-pose augmentation: 4x4x4 lattice free-form deformation plus the
global rotation augmentation applied to training pairs.

The lattice has four levels along the body's longitudinal axis at fractions
(0, 0.4, 0.7, 1.0) of the extent, placing the middle two levels roughly at
hip and shoulder height. Each level is scaled then rotated about its own
geometric center; points are warped by trilinear interpolation of the
control-point displacements, so a point sitting exactly on a control point
moves exactly with it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .volume import VoxelLabelVolume

__all__ = [
    "LatticeDeformation",
    "sample_lattice",
    "identity_lattice",
    "apply_deformation",
    "rotation_matrix_xyz",
    "random_rotation_matrix",
    "random_rotation",
    "deform_volume",
]

LEVEL_FRACTIONS = np.array([0.0, 0.4, 0.7, 1.0])
OFF_AXIS_FRACTIONS = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])

# Per-axis rotation ranges in degrees (x, y, z), from the augmentation recipe.
OUTER_LEVEL_ROTATION_DEG = (15.0, 10.0, 15.0)
MIDDLE_LEVEL_ROTATION_DEG = (5.0, 5.0, 2.5)
LEVEL_SCALE_RANGE = (0.85, 1.15)


@dataclass(frozen=True)
class LatticeDeformation:
    """4x4x4 control lattice: rest positions and deformed positions."""

    rest_points: np.ndarray  # (4, 4, 4, 3), axis order matches grid axes
    control_points: np.ndarray  # (4, 4, 4, 3)
    level_axis: int = 2

    def __post_init__(self):
        rest = np.asarray(self.rest_points, dtype=np.float64)
        ctrl = np.asarray(self.control_points, dtype=np.float64)
        if rest.shape != (4, 4, 4, 3) or ctrl.shape != (4, 4, 4, 3):
            raise ValueError("lattice requires exactly 4x4x4 control points")
        object.__setattr__(self, "rest_points", rest)
        object.__setattr__(self, "control_points", ctrl)

    @property
    def is_identity(self) -> bool:
        return np.array_equal(self.rest_points, self.control_points)

    def axis_coordinates(self, axis: int) -> np.ndarray:
        """The 4 rest-plane coordinates along a grid axis."""
        index = [0, 0, 0]
        sel = [slice(0, 1)] * 3
        sel[axis] = slice(None)
        coords = self.rest_points[tuple(sel) + (axis,)].reshape(4)
        del index
        return coords

    def to_json(self) -> dict:
        return {
            "rest_points": self.rest_points.tolist(),
            "control_points": self.control_points.tolist(),
            "level_axis": self.level_axis,
        }

    @staticmethod
    def from_json(d: dict) -> "LatticeDeformation":
        return LatticeDeformation(
            np.asarray(d["rest_points"]),
            np.asarray(d["control_points"]),
            int(d["level_axis"]),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @staticmethod
    def load(path) -> "LatticeDeformation":
        with open(path) as f:
            return LatticeDeformation.from_json(json.load(f))


def _rest_lattice(bbox_min, bbox_max, level_axis):
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    fractions = []
    for axis in range(3):
        fr = LEVEL_FRACTIONS if axis == level_axis else OFF_AXIS_FRACTIONS
        fractions.append(bbox_min[axis] + fr * (bbox_max[axis] - bbox_min[axis]))
    gx, gy, gz = np.meshgrid(*fractions, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def identity_lattice(bbox_min, bbox_max, level_axis: int = 2) -> LatticeDeformation:
    rest = _rest_lattice(bbox_min, bbox_max, level_axis)
    return LatticeDeformation(rest, rest.copy(), level_axis)


def rotation_matrix_xyz(angles_deg) -> np.ndarray:
    """Extrinsic X-Y-Z rotation (applied in that order): R = Rz @ Ry @ Rx."""
    ax, ay, az = np.radians(np.asarray(angles_deg, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_lattice(
    rng: np.random.Generator, bbox_min, bbox_max, level_axis: int = 2
) -> LatticeDeformation:
    """Random per-level scale + rotation over the given bounding box.

    Outer levels (0, 3) use the wider rotation ranges; middle levels use the
    narrow ones. Each level transforms about its own geometric center.
    """
    lattice = identity_lattice(bbox_min, bbox_max, level_axis)
    ctrl = lattice.rest_points.copy()
    for level in range(4):
        bounds = OUTER_LEVEL_ROTATION_DEG if level in (0, 3) else MIDDLE_LEVEL_ROTATION_DEG
        angles = np.array([rng.uniform(-b, b) for b in bounds])
        scale = rng.uniform(*LEVEL_SCALE_RANGE)
        ctrl = _transform_level(ctrl, level_axis, level, scale, angles)
    return LatticeDeformation(lattice.rest_points, ctrl, level_axis)


def _transform_level(ctrl, level_axis, level, scale, angles_deg):
    sel = [slice(None)] * 3
    sel[level_axis] = level
    pts = ctrl[tuple(sel)].reshape(-1, 3)
    center = pts.mean(axis=0)
    rot = rotation_matrix_xyz(angles_deg)
    moved = (rot @ (scale * (pts - center)).T).T + center
    out = ctrl.copy()
    out[tuple(sel)] = moved.reshape(4, 4, 3)
    return out


def apply_deformation(d: LatticeDeformation, points: np.ndarray) -> np.ndarray:
    """Warp points by trilinear interpolation of control-point displacements.

    Points outside the lattice hull are clamped to hull coordinates for the
    weight computation (the displacement field extends constantly outward).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    disp = d.control_points - d.rest_points
    if not disp.any():
        return points.copy()

    cells = []
    locals_ = []
    for axis in range(3):
        coords = d.axis_coordinates(axis)
        x = np.clip(points[:, axis], coords[0], coords[-1])
        cell = np.clip(np.searchsorted(coords, x, side="right") - 1, 0, 2)
        width = coords[cell + 1] - coords[cell]
        t = np.where(width > 0, (x - coords[cell]) / np.where(width > 0, width, 1.0), 0.0)
        cells.append(cell)
        locals_.append(t)

    out = points.copy()
    i, j, k = cells
    tx, ty, tz = locals_
    for dx in (0, 1):
        wx = tx if dx else 1.0 - tx
        for dy in (0, 1):
            wy = ty if dy else 1.0 - ty
            for dz in (0, 1):
                wz = tz if dz else 1.0 - tz
                w = (wx * wy * wz)[:, None]
                out += w * disp[i + dx, j + dy, k + dz]
    return out


def random_rotation_matrix(
    rng: np.random.Generator, max_angles_deg=(30.0, 30.0, 30.0)
) -> np.ndarray:
    angles = np.array([rng.uniform(-a, a) for a in max_angles_deg])
    return rotation_matrix_xyz(angles)


def random_rotation(rng: np.random.Generator, points: np.ndarray) -> np.ndarray:
    """One rigid rotation (about the origin) applied to all points. Sensor
    cloud and occupancy samples of a training pair must share the rotation,
    so callers typically use :func:`random_rotation_matrix` directly."""
    rot = random_rotation_matrix(rng)
    return np.atleast_2d(np.asarray(points, dtype=np.float64)) @ rot.T


def deform_volume(v: VoxelLabelVolume, d: LatticeDeformation) -> VoxelLabelVolume:
    """Apply the deformation to a label volume by inverse mapping.

    Each output voxel center is pushed through the lattice map and the label
    is looked up at the warped position (nearest-voxel lookup), which keeps
    the partition invariant exact. Geometrically this realizes the inverse
    of the lattice map; the augmentation distribution is symmetric enough
    that this distinction does not matter.
    """
    if d.is_identity:
        return v
    centers = v.voxel_centers().reshape(-1, 3)
    warped = apply_deformation(d, centers)
    labels = v.label_at(warped).reshape(v.dims)
    return VoxelLabelVolume(labels, v.spacing, v.origin, class_names=v.class_names)
