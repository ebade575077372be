"""Template-matching baseline: rigid ICP registration of the patient cloud
to every template cloud, chamfer-distance template selection, and AABB
transfer back into patient space.

Registration direction is patient -> template; the winning template's boxes
are pulled back by the inverse transform and re-tightened to axis alignment
(conservative: never smaller than the transformed box).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .sensor import SensorPointCloud, load_xyz, save_xyz
from .volume import AxisAlignedBox

__all__ = [
    "RigidTransform",
    "Template",
    "RegistrationResult",
    "icp_register",
    "chamfer",
    "match_and_transfer",
    "save_template_library",
    "load_template_library",
]

DEFAULT_MAX_ITERS = 50
DEFAULT_TOL = 1e-6


class DegenerateRegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    """p' = rotation @ p + translation."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(rot), 1.0, atol=1e-9):
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


@dataclass(frozen=True)
class Template:
    template_id: str
    cloud: SensorPointCloud
    boxes: dict[int, AxisAlignedBox | None]

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ValueError("template cloud is empty")


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    residual: float  # RMS point-to-correspondence distance
    iterations: int
    converged: bool


def _procrustes(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Closed-form least-squares rigid fit (SVD orthogonal Procrustes)."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    h = (source - mu_s).T @ (target - mu_t)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, mu_t - rot @ mu_s)


def icp_register(
    source: SensorPointCloud,
    target: SensorPointCloud,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> RegistrationResult:
    """Point-to-point ICP: nearest-neighbor correspondences in the target,
    closed-form rigid refit per iteration, until the residual improvement
    drops below `tol` (meters) or `max_iters` is hit.

    Initialization is centroid alignment with identity rotation. The
    residual is non-increasing across iterations by construction.
    """
    src = source.points
    tgt = target.points
    if len(src) < 3 or len(tgt) < 3:
        raise DegenerateRegistrationError("both clouds need >= 3 points")
    if np.linalg.matrix_rank(src - src.mean(axis=0)) < 2:
        raise DegenerateRegistrationError("source points are collinear")

    tree = cKDTree(tgt)
    transform = RigidTransform(np.eye(3), tgt.mean(axis=0) - src.mean(axis=0))
    moved = transform.apply(src)
    prev_residual = np.inf
    residual = np.inf
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        dists, idx = tree.query(moved)
        residual = float(np.sqrt(np.mean(dists**2)))
        if prev_residual - residual < tol:
            converged = True
            break
        prev_residual = residual
        transform = _procrustes(src, tgt[idx])
        moved = transform.apply(src)
    return RegistrationResult(transform, residual, iters, converged)


def chamfer(a: SensorPointCloud, b: SensorPointCloud) -> float:
    """Symmetric averaged unsquared chamfer distance, in meters:
    0.5 * (mean_a min dist to b + mean_b min dist to a)."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two nonempty clouds")
    d_ab, _ = cKDTree(b.points).query(a.points)
    d_ba, _ = cKDTree(a.points).query(b.points)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def match_and_transfer(
    patient: SensorPointCloud,
    templates: list[Template],
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> tuple[dict[int, AxisAlignedBox | None], str, float]:
    """Register the patient cloud to every template, select the template
    with minimal post-registration chamfer distance, and pull its boxes
    into patient space by the inverse registration transform.

    Returns (boxes, winning template id, winning chamfer distance).
    """
    if not templates:
        raise ValueError("template library is empty")
    best = None
    for template in templates:
        try:
            reg = icp_register(patient, template.cloud, max_iters, tol)
        except DegenerateRegistrationError:
            continue
        score = chamfer(
            SensorPointCloud(reg.transform.apply(patient.points)), template.cloud
        )
        if best is None or score < best[0]:
            best = (score, template, reg)
    if best is None:
        raise DegenerateRegistrationError("every template registration failed")
    score, template, reg = best
    inverse = reg.transform.inverse()
    boxes: dict[int, AxisAlignedBox | None] = {}
    for class_id, box in template.boxes.items():
        if box is None:
            boxes[class_id] = None
            continue
        corners = inverse.apply(box.corners())
        boxes[class_id] = AxisAlignedBox(corners.min(axis=0), corners.max(axis=0))
    return boxes, template.template_id, score


def save_template_library(templates: list[Template], directory) -> None:
    """Directory of (cloud .xyz, boxes .json) pairs plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for t in templates:
        save_xyz(t.cloud, directory / f"{t.template_id}.xyz")
        payload = {
            str(c): (b.to_json() if b is not None else None) for c, b in sorted(t.boxes.items())
        }
        with open(directory / f"{t.template_id}.boxes.json", "w") as f:
            json.dump(payload, f, sort_keys=True)
        ids.append(t.template_id)
    with open(directory / "manifest.json", "w") as f:
        json.dump({"templates": sorted(ids)}, f, indent=1)


def load_template_library(directory) -> list[Template]:
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    templates = []
    for template_id in manifest["templates"]:
        cloud = load_xyz(directory / f"{template_id}.xyz")
        with open(directory / f"{template_id}.boxes.json") as f:
            payload = json.load(f)
        boxes = {
            int(c): (AxisAlignedBox.from_json(v) if v is not None else None)
            for c, v in payload.items()
        }
        templates.append(Template(template_id, cloud, boxes))
    return templates
