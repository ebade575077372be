"""Virtual depth camera, backprojection, evaluation-cloud conditioning and
isotropic normalization.

Camera convention (OpenCV-style): x right, y down, z forward. Depth is the
Euclidean distance along the (normalized) pixel ray, so ``backproject``
reduces to ``ray_direction * depth``. The pixel grid is 64x64 by default
with the principal point at (32, 32), which puts one pixel ray exactly on
the optical axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .volume import TriMesh

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "SensorPointCloud",
    "IsoNormalization",
    "sample_camera_pose",
    "render_depth",
    "backproject",
    "project",
    "condition_eval_cloud",
    "normalize_iso",
    "point_drop",
    "save_depth_raw",
    "load_depth_raw",
    "save_xyz",
    "load_xyz",
]

NO_DEPTH = np.inf

# Camera placement distributions (meters): distance, lateral and vertical
# offsets on the plane orthogonal to the viewing direction.
DISTANCE_RANGE = (1.4, 2.6)
LATERAL_RANGE = (-0.7, 0.7)
VERTICAL_RANGE = (-0.1, 0.3)

BACKGROUND_CULL_METERS = 2.5
EVAL_CLOUD_SIZE = 1000
MAX_POINT_DROP = 0.7


class DegenerateCloudError(ValueError):
    """Cloud too small or geometrically degenerate for the operation."""


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 64
    height: int = 64
    vfov_deg: float = 60.0

    def __post_init__(self):
        if self.width != self.height:
            raise ValueError("image must be square")

    @property
    def focal(self) -> float:
        return (self.height / 2.0) / np.tan(np.radians(self.vfov_deg) / 2.0)

    @property
    def principal(self) -> tuple[float, float]:
        return (self.width / 2.0, self.height / 2.0)

    def ray_directions(self) -> np.ndarray:
        """Unit ray direction per pixel, shape (h, w, 3); row = v, col = u."""
        cx, cy = self.principal
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height), indexing="xy")
        d = np.stack(
            [(u - cx) / self.focal, (v - cy) / self.focal, np.ones_like(u, dtype=float)],
            axis=-1,
        )
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "vfov_deg": self.vfov_deg}


@dataclass(frozen=True)
class CameraPose:
    """Camera placed at target + d*front + h*side + v*up, looking at target."""

    distance: float
    lateral: float
    vertical: float
    target: np.ndarray
    front: np.ndarray = field(default_factory=lambda: np.array([0.0, -1.0, 0.0]))
    up_world: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError("camera distance must be positive")
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64))
        front = np.asarray(self.front, dtype=np.float64)
        object.__setattr__(self, "front", front / np.linalg.norm(front))
        up = np.asarray(self.up_world, dtype=np.float64)
        object.__setattr__(self, "up_world", up / np.linalg.norm(up))

    @property
    def position(self) -> np.ndarray:
        side = np.cross(self.up_world, self.front)
        side = side / np.linalg.norm(side)
        return (
            self.target
            + self.distance * self.front
            + self.lateral * side
            + self.vertical * self.up_world
        )

    def extrinsics(self) -> tuple[np.ndarray, np.ndarray]:
        """World-to-camera rotation and translation: p_cam = R @ p_world + t.

        The camera z axis points at the target; the image "up" is the world
        longitudinal axis projected perpendicular to the view direction
        (removes roll ambiguity). y points down in the image.
        """
        pos = self.position
        z = self.target - pos
        z = z / np.linalg.norm(z)
        up = self.up_world - (self.up_world @ z) * z
        n = np.linalg.norm(up)
        if n < 1e-12:
            up = np.array([0.0, 1.0, 0.0]) - z[1] * z
            n = np.linalg.norm(up)
        up = up / n
        x = np.cross(z, up)  # image right
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)  # image down (-up)
        rot = np.stack([x, y, z])  # rows are camera axes in world coords
        return rot, -rot @ pos

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        rot, t = self.extrinsics()
        return np.atleast_2d(points) @ rot.T + t

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        rot, t = self.extrinsics()
        return (np.atleast_2d(points) - t) @ rot


def sample_camera_pose(rng: np.random.Generator, target) -> CameraPose:
    return CameraPose(
        distance=float(rng.uniform(*DISTANCE_RANGE)),
        lateral=float(rng.uniform(*LATERAL_RANGE)),
        vertical=float(rng.uniform(*VERTICAL_RANGE)),
        target=np.asarray(target, dtype=np.float64),
    )


@dataclass(frozen=True)
class SensorPointCloud:
    """Unordered 3D points in camera coordinates (meters)."""

    points: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class IsoNormalization:
    """x_norm = (x - translation) * scale, identical scale on all axes."""

    scale: float
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64)
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.translation


def render_depth(
    skin: TriMesh, pose: CameraPose, intrinsics: CameraIntrinsics | None = None
) -> np.ndarray:
    """Ray-cast the skin mesh into a depth image, shape (h, w).

    Per pixel: nearest ray-triangle hit distance along the unit ray; misses
    hold ``NO_DEPTH`` (inf). Triangles are binned into their projected pixel
    bounding boxes first, so only candidate triangles are tested per pixel.
    """
    intr = intrinsics or CameraIntrinsics()
    h, w = intr.height, intr.width
    depth = np.full((h, w), NO_DEPTH)
    if skin.is_empty:
        return depth

    verts_cam = pose.world_to_camera(skin.vertices)
    tris = skin.triangles
    tri_v = verts_cam[tris]  # (T, 3, 3)
    # Keep only triangles fully in front of the camera; desk scenes never
    # straddle the image plane.
    front = (tri_v[:, :, 2] > 1e-9).all(axis=1)
    tri_v = tri_v[front]
    if len(tri_v) == 0:
        return depth

    cx, cy = intr.principal
    f = intr.focal
    u = tri_v[:, :, 0] / tri_v[:, :, 2] * f + cx
    v = tri_v[:, :, 1] / tri_v[:, :, 2] * f + cy
    u_lo = np.clip(np.floor(u.min(axis=1)).astype(int), 0, w - 1)
    u_hi = np.clip(np.ceil(u.max(axis=1)).astype(int), 0, w - 1)
    v_lo = np.clip(np.floor(v.min(axis=1)).astype(int), 0, h - 1)
    v_hi = np.clip(np.ceil(v.max(axis=1)).astype(int), 0, h - 1)
    visible = (u.max(axis=1) >= 0) & (u.min(axis=1) <= w - 1) & (
        v.max(axis=1) >= 0
    ) & (v.min(axis=1) <= h - 1)

    buckets: dict[tuple[int, int], list[int]] = {}
    for t in np.flatnonzero(visible):
        for pv in range(v_lo[t], v_hi[t] + 1):
            for pu in range(u_lo[t], u_hi[t] + 1):
                buckets.setdefault((pv, pu), []).append(t)

    rays = intr.ray_directions()
    edge1 = tri_v[:, 1] - tri_v[:, 0]
    edge2 = tri_v[:, 2] - tri_v[:, 0]
    v0 = tri_v[:, 0]
    eps = 1e-12
    for (pv, pu), cand in buckets.items():
        d = rays[pv, pu]
        e1 = edge1[cand]
        e2 = edge2[cand]
        o = -v0[cand]  # ray origin is the camera origin
        pvec = np.cross(np.broadcast_to(d, e1.shape), e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        bu = np.einsum("ij,ij->i", o, pvec) * inv
        qvec = np.cross(o, e1)
        bv = (qvec @ d) * inv
        t_hit = np.einsum("ij,ij->i", e2, qvec) * inv
        hit = ok & (bu >= -1e-12) & (bv >= -1e-12) & (bu + bv <= 1 + 1e-12) & (t_hit > eps)
        if hit.any():
            depth[pv, pu] = min(depth[pv, pu], t_hit[hit].min())
    return depth


def backproject(
    depth: np.ndarray, intrinsics: CameraIntrinsics | None = None, seed: int | None = None
) -> SensorPointCloud:
    """One point per valid pixel: unit ray direction times depth."""
    intr = intrinsics or CameraIntrinsics()
    rays = intr.ray_directions()
    valid = np.isfinite(depth)
    pts = rays[valid] * depth[valid][:, None]
    return SensorPointCloud(pts, seed=seed)


def project(
    points: np.ndarray, intrinsics: CameraIntrinsics | None = None
) -> np.ndarray:
    """Inverse of backproject: camera-space points -> (u, v, depth) rows."""
    intr = intrinsics or CameraIntrinsics()
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cx, cy = intr.principal
    f = intr.focal
    depth = np.linalg.norm(pts, axis=1)
    u = pts[:, 0] / pts[:, 2] * f + cx
    v = pts[:, 1] / pts[:, 2] * f + cy
    return np.stack([u, v, depth], axis=1)


def condition_eval_cloud(
    cloud: SensorPointCloud,
    rng: np.random.Generator,
    max_range: float = BACKGROUND_CULL_METERS,
    crop_box=None,
    target_size: int = EVAL_CLOUD_SIZE,
) -> SensorPointCloud:
    """Evaluation conditioning: background cull, optional axis crop box,
    then uniform random subsample to exactly `target_size` points.

    `crop_box` is an :class:`~occatlas.volume.AxisAlignedBox` in camera
    coordinates; phantom datasets use the full box (None). Raises
    :class:`DegenerateCloudError` when nothing survives.
    """
    pts = cloud.points
    keep = np.linalg.norm(pts, axis=1) <= max_range
    pts = pts[keep]
    if crop_box is not None:
        inside = np.all(
            (pts >= crop_box.min_corner) & (pts <= crop_box.max_corner), axis=1
        )
        pts = pts[inside]
    if len(pts) == 0:
        raise DegenerateCloudError("conditioning removed every point")
    if len(pts) > target_size:
        idx = rng.choice(len(pts), size=target_size, replace=False)
        pts = pts[np.sort(idx)]
    return SensorPointCloud(pts, seed=cloud.seed)


def normalize_iso(cloud: SensorPointCloud) -> tuple[SensorPointCloud, IsoNormalization]:
    """Aspect-ratio-preserving map into [-1, 1]^3.

    Center = AABB midpoint, scale = 2 / max extent; the long axis maps
    exactly onto [-1, 1]. Raises on zero-extent clouds.
    """
    pts = cloud.points
    if len(pts) < 2:
        raise DegenerateCloudError("normalization needs >= 2 points")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise DegenerateCloudError("cloud has zero extent")
    norm = IsoNormalization(scale=2.0 / extent, translation=0.5 * (lo + hi))
    return SensorPointCloud(norm.apply(pts), seed=cloud.seed), norm


def point_drop(
    cloud: SensorPointCloud,
    rng: np.random.Generator,
    fraction: float | None = None,
) -> SensorPointCloud:
    """Discard a uniformly chosen subset of up to 70% of the points.

    The drop fraction is resampled per call from U(0, 0.7) unless forced via
    `fraction`; at least one point always survives.
    """
    f = float(rng.uniform(0.0, MAX_POINT_DROP)) if fraction is None else fraction
    if not 0.0 <= f <= MAX_POINT_DROP:
        raise ValueError(f"drop fraction {f} outside [0, {MAX_POINT_DROP}]")
    n = len(cloud)
    survivors = max(1, int(round(n * (1.0 - f))))
    if survivors >= n:
        return cloud
    idx = rng.choice(n, size=survivors, replace=False)
    return SensorPointCloud(cloud.points[np.sort(idx)], seed=cloud.seed)


def save_depth_raw(depth: np.ndarray, path, intrinsics: CameraIntrinsics | None = None):
    """64x64 little-endian float32 raw + sidecar JSON intrinsics."""
    intr = intrinsics or CameraIntrinsics()
    np.asarray(depth, dtype="<f4").tofile(path)
    with open(str(path) + ".json", "w") as f:
        json.dump(intr.to_json(), f)


def load_depth_raw(path) -> tuple[np.ndarray, CameraIntrinsics]:
    with open(str(path) + ".json") as f:
        meta = json.load(f)
    intr = CameraIntrinsics(meta["width"], meta["height"], meta["vfov_deg"])
    depth = np.fromfile(path, dtype="<f4").reshape(intr.height, intr.width)
    return depth.astype(np.float64), intr


def save_xyz(cloud: SensorPointCloud, path):
    with open(path, "w") as f:
        for p in cloud.points:
            f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def load_xyz(path) -> SensorPointCloud:
    pts = np.loadtxt(path, dtype=np.float64)
    return SensorPointCloud(pts.reshape(-1, 3))
