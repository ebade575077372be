"""Voxel label volumes, watertight mesh extraction and axis-aligned boxes.

A :class:`VoxelLabelVolume` is a dense grid of class ids (0 = empty) with
isotropic physical spacing. Everything downstream (sampling, meshing,
evaluation) reads its geometry from here, so the conventions are fixed once:

* ``labels`` has shape ``(nx, ny, nz)`` and is indexed ``[ix, iy, iz]``;
* voxel ``(i, j, k)`` spans the world-space cube with min corner
  ``origin + spacing * (i, j, k)``;
* linearized voxel index is x-fastest: ``ix + nx * (iy + ny * iz)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.measure import marching_cubes

__all__ = [
    "VoxelLabelVolume",
    "TriMesh",
    "AxisAlignedBox",
    "pad_boundary",
    "largest_component",
    "extract_mesh",
    "aabb_of_class",
    "signed_distance_oracle",
    "save_olv",
    "load_olv",
]

# Face adjacency; matches the surface topology of marching cubes and avoids
# merging regions that only touch at corners or edges.
SIX_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class VoxelLabelVolume:
    """Dense 3D grid of class labels with isotropic physical spacing."""

    labels: np.ndarray
    spacing: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"labels must be a non-empty 3D array, got shape {labels.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.origin.shape != (3,):
            raise ValueError("origin must be a 3-vector")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def num_classes(self) -> int:
        """Highest class id present (0 counts as empty)."""
        return int(self.labels.max())

    def voxel_centers(self) -> np.ndarray:
        """World positions of all voxel centers, shape (nx, ny, nz, 3)."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
        return self.origin + self.spacing * (idx + 0.5)

    def label_at(self, points: np.ndarray) -> np.ndarray:
        """Class label of the voxel containing each world point.

        Points use floor indexing (a point exactly on a voxel face belongs to
        the higher-index voxel); points outside the grid get label 0.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = np.floor((points - self.origin) / self.spacing).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.dims)), axis=1)
        out = np.zeros(len(points), dtype=np.uint16)
        ii = idx[inside]
        out[inside] = self.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh in world coordinates (meters)."""

    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    class_id: int = 0

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle indices out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def boundary_edge_count(self) -> int:
        """Number of edges not shared by exactly two triangles (0 = closed)."""
        if self.is_empty:
            return 0
        tri = self.triangles
        edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return int(np.sum(counts != 2))

    def signed_volume(self) -> float:
        """Enclosed volume via the divergence theorem; positive when the
        triangle winding is consistently outward."""
        if self.is_empty:
            return 0.0
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def connected_components(self) -> list["TriMesh"]:
        """Split into edge-connected triangle patches."""
        if self.is_empty:
            return []
        n_v = len(self.vertices)
        parent = np.arange(n_v)

        def find(i):
            root = i
            while parent[root] != root:
                root = parent[root]
            while parent[i] != root:
                parent[i], i = root, parent[i]
            return root

        for tri in self.triangles:
            a = find(tri[0])
            for v in tri[1:]:
                parent[find(v)] = a
        roots = np.array([find(i) for i in self.triangles[:, 0]])
        out = []
        for r in np.unique(roots):
            tris = self.triangles[roots == r]
            used = np.unique(tris)
            remap = np.zeros(n_v, dtype=np.int64)
            remap[used] = np.arange(len(used))
            out.append(TriMesh(self.vertices[used], remap[tris], self.class_id))
        return out

    def save_obj(self, path):
        with open(path, "w") as f:
            for v in self.vertices:
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for t in self.triangles:
                f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")

    def save_stl(self, path):
        with open(path, "w") as f:
            f.write(f"solid class_{self.class_id}\n")
            for t in self.triangles:
                a, b, c = self.vertices[t]
                n = np.cross(b - a, c - a)
                norm = np.linalg.norm(n)
                if norm > 0:
                    n = n / norm
                f.write(f"  facet normal {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
                f.write("    outer loop\n")
                for p in (a, b, c):
                    f.write(f"      vertex {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
                f.write("    endloop\n  endfacet\n")
            f.write(f"endsolid class_{self.class_id}\n")


@dataclass(frozen=True)
class AxisAlignedBox:
    """Axis-aligned box in meters; the ROI representation for a structure."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        if np.any(lo > hi):
            raise ValueError(f"min_corner {lo} exceeds max_corner {hi}")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    @property
    def extents(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def corners(self) -> np.ndarray:
        """All 8 corners, shape (8, 3)."""
        lo, hi = self.min_corner, self.max_corner
        return np.array(
            [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
        )

    def enlarged(self, factor: float) -> "AxisAlignedBox":
        """Grow each extent by `factor` (0.5 = 50% enlargement), centered."""
        half = 0.5 * (1.0 + factor) * self.extents
        return AxisAlignedBox(self.center - half, self.center + half)

    def contains(self, other: "AxisAlignedBox") -> bool:
        return bool(
            np.all(self.min_corner <= other.min_corner)
            and np.all(other.max_corner <= self.max_corner)
        )

    def to_json(self) -> list[float]:
        return [*self.min_corner.tolist(), *self.max_corner.tolist()]

    @staticmethod
    def from_json(values) -> "AxisAlignedBox":
        v = np.asarray(values, dtype=np.float64)
        return AxisAlignedBox(v[:3], v[3:])


def pad_boundary(v: VoxelLabelVolume) -> VoxelLabelVolume:
    """Add a 1-voxel empty boundary so every surface can close."""
    padded = np.pad(np.asarray(v.labels), 1, mode="constant", constant_values=0)
    return VoxelLabelVolume(
        padded, v.spacing, v.origin - v.spacing, class_names=v.class_names
    )


def largest_component(
    v: VoxelLabelVolume, class_id: int
) -> tuple[VoxelLabelVolume, bool]:
    """Keep only the largest 6-connected component of `class_id`.

    Ties are broken by the component containing the lowest linearized
    (x-fastest) voxel index. Returns ``(volume, present)``; an absent class
    leaves the volume unchanged with ``present = False``.
    """
    mask = np.asarray(v.labels) == class_id
    if not mask.any():
        return v, False
    comp, n = ndimage.label(mask, structure=SIX_CONNECTIVITY)
    if n <= 1:
        return v, True
    counts = np.bincount(comp.ravel())[1:]  # skip background
    best_size = counts.max()
    candidates = np.flatnonzero(counts == best_size) + 1
    if len(candidates) == 1:
        winner = candidates[0]
    else:
        # Lowest x-fastest linear index among each candidate's voxels.
        nx, ny, _ = v.dims
        ix, iy, iz = np.nonzero(np.isin(comp, candidates))
        linear = ix + nx * (iy + ny * iz)
        order = np.argsort(linear)
        winner = comp[ix[order[0]], iy[order[0]], iz[order[0]]]
    labels = np.array(v.labels)
    labels[mask & (comp != winner)] = 0
    return VoxelLabelVolume(labels, v.spacing, v.origin, class_names=v.class_names), True


def extract_mesh(v: VoxelLabelVolume, class_id: int) -> TriMesh:
    """Marching-cubes isosurface of the binary indicator of `class_id`.

    The volume must already be boundary-padded if a closed surface is
    required. Vertices are in world coordinates; winding is oriented so the
    signed volume is positive.
    """
    indicator = (np.asarray(v.labels) == class_id).astype(np.float64)
    if indicator.max() == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), class_id)
    verts, faces, _, _ = marching_cubes(
        indicator, level=0.5, spacing=(v.spacing,) * 3, allow_degenerate=False
    )
    # Array index i samples the voxel center, which sits at origin + (i+0.5)*spacing.
    verts = verts + v.origin + 0.5 * v.spacing
    mesh = TriMesh(verts, faces.astype(np.int64), class_id)
    if mesh.signed_volume() < 0:
        mesh = TriMesh(verts, mesh.triangles[:, ::-1], class_id)
    return mesh


def aabb_of_class(v: VoxelLabelVolume, class_id: int) -> AxisAlignedBox | None:
    """Tight world-space box over the outer corners of all `class_id` voxels.

    Returns None when the class is absent (never a zero box).
    """
    idx = np.argwhere(np.asarray(v.labels) == class_id)
    if len(idx) == 0:
        return None
    lo = v.origin + v.spacing * idx.min(axis=0)
    hi = v.origin + v.spacing * (idx.max(axis=0) + 1)
    return AxisAlignedBox(lo, hi)


def _point_to_face_distance(points, face_centers, face_axes, half):
    """Distance from each point to the nearest axis-aligned square face.

    points: (P, 3); face_centers: (F, 3); face_axes: (F,) normal axis of each
    face; half: half side length. Returns (P,) min distances.
    """
    out = np.full(len(points), np.inf)
    for axis in range(3):
        sel = face_axes == axis
        if not sel.any():
            continue
        centers = face_centers[sel]
        d = points[:, None, :] - centers[None, :, :]  # (P, F, 3)
        normal = np.abs(d[:, :, axis])
        tang = np.delete(d, axis, axis=2)
        excess = np.maximum(np.abs(tang) - half, 0.0)
        dist = np.sqrt(normal**2 + excess[:, :, 0] ** 2 + excess[:, :, 1] ** 2)
        out = np.minimum(out, dist.min(axis=1))
    return out


def signed_distance_oracle(
    v: VoxelLabelVolume, points: np.ndarray, class_id: int
) -> np.ndarray | None:
    """Exhaustive signed distance to the voxelized surface of `class_id`.

    Surface = all voxel faces between a class voxel and a non-class voxel
    (volume border included). Negative inside a class voxel. O(points x
    faces); this is the test oracle, not a production path.
    """
    mask = np.asarray(v.labels) == class_id
    if not mask.any():
        return None
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    s = v.spacing
    face_centers = []
    face_axes = []
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        # Face on the low side of a class voxel.
        low_faces = mask & ~padded[tuple(lo)]
        high_faces = mask & ~padded[tuple(hi)]
        for faces, offset in ((low_faces, 0.0), (high_faces, 1.0)):
            idx = np.argwhere(faces).astype(np.float64)
            if len(idx) == 0:
                continue
            centers = idx + 0.5
            centers[:, axis] = idx[:, axis] + offset
            face_centers.append(v.origin + s * centers)
            face_axes.append(np.full(len(idx), axis))
    face_centers = np.concatenate(face_centers)
    face_axes = np.concatenate(face_axes)
    dist = _point_to_face_distance(points, face_centers, face_axes, 0.5 * s)
    sign = np.where(v.label_at(points) == class_id, -1.0, 1.0)
    return sign * dist


def save_olv(v: VoxelLabelVolume, path) -> None:
    """Write the `.olv` format: one-line JSON header, then the raw label
    array as little-endian uint16 in x-fastest order."""
    header = {
        "dims": list(v.dims),
        "spacing": v.spacing,
        "origin": v.origin.tolist(),
        "class_names": list(v.class_names) if v.class_names else None,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(np.asarray(v.labels).ravel(order="F").astype("<u2").tobytes())


def load_olv(path) -> VoxelLabelVolume:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        raw = np.frombuffer(f.read(), dtype="<u2")
    dims = tuple(header["dims"])
    labels = raw.reshape(dims, order="F")
    names = header.get("class_names")
    return VoxelLabelVolume(
        labels,
        float(header["spacing"]),
        np.asarray(header["origin"], dtype=np.float64),
        class_names=tuple(names) if names else None,
    )
