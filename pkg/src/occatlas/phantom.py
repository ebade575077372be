"""Procedural synthetic bodies: a superellipsoid envelope packed with
labeled internal structures (ellipsoids, capsules, thin tubes).

Two packing modes:

* ``"touching"`` — class 1 is a host that fills the envelope around the
  other structures, so internal structures are fully embedded with no free
  space in their 50%-enlarged AABBs. This is exactly the configuration under
  which the original SortSample cannot terminate.
* ``"separated"`` — structures are placed with empty gaps between them, so
  every structure has free-space neighbors.

Generation is a pure function of the spec (seeded RNG, no global state).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .volume import (
    VoxelLabelVolume,
    TriMesh,
    aabb_of_class,
    extract_mesh,
    largest_component,
    pad_boundary,
)

__all__ = ["PhantomSpec", "PhantomGenerationError", "generate_phantom", "extract_skin"]


class PhantomGenerationError(RuntimeError):
    """Raised when a spec cannot be realized within the retry budget."""


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    num_structures: int = 5
    dims: tuple[int, int, int] = (38, 30, 88)
    spacing: float = 0.0125
    # Superellipsoid body envelope: semi-axes in meters, shared exponent.
    envelope_semi_axes: tuple[float, float, float] = (0.21, 0.16, 0.52)
    envelope_exponent: float = 2.5
    packing: str = "touching"  # "touching" | "separated"
    # Size ranges (meters) per primitive kind.
    ellipsoid_semi_axis_range: tuple[float, float] = (0.04, 0.065)
    capsule_radius_range: tuple[float, float] = (0.032, 0.05)
    capsule_length_range: tuple[float, float] = (0.08, 0.16)
    tube_radius_range: tuple[float, float] = (0.02, 0.03)
    tube_length_range: tuple[float, float] = (0.12, 0.22)
    max_retries: int = 50

    def __post_init__(self):
        if self.num_structures < 1:
            raise ValueError("num_structures must be >= 1")
        if self.packing not in ("touching", "separated"):
            raise ValueError(f"unknown packing mode {self.packing!r}")
        if self.packing == "touching" and self.num_structures < 2:
            raise ValueError("touching mode needs a host plus >= 1 embedded structure")

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("dims",):
            if key in d:
                d[key] = tuple(d[key])
        for key in (
            "envelope_semi_axes",
            "ellipsoid_semi_axis_range",
            "capsule_radius_range",
            "capsule_length_range",
            "tube_radius_range",
            "tube_length_range",
        ):
            if key in d:
                d[key] = tuple(d[key])
        return PhantomSpec(**d)


def _superellipsoid_mask(centers, center, semi_axes, exponent):
    rel = np.abs(centers - center) / np.asarray(semi_axes)
    return (rel**exponent).sum(axis=-1) <= 1.0


def _ellipsoid_mask(centers, center, semi_axes):
    rel = (centers - center) / np.asarray(semi_axes)
    return (rel**2).sum(axis=-1) <= 1.0


def _capsule_mask(centers, a, b, radius):
    """Points within `radius` of segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        return _ellipsoid_mask(centers, a, (radius,) * 3)
    t = np.clip(((centers - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return ((centers - closest) ** 2).sum(axis=-1) <= radius**2


@dataclass
class _Primitive:
    kind: str
    center: np.ndarray
    # reach = center-to-farthest-surface-point bound, used for placement checks
    reach: float
    params: dict

    def mask(self, centers: np.ndarray) -> np.ndarray:
        if self.kind == "ellipsoid":
            return _ellipsoid_mask(centers, self.center, self.params["semi_axes"])
        a, b = self.params["a"], self.params["b"]
        return _capsule_mask(centers, a, b, self.params["radius"])


def _sample_primitive(rng: np.random.Generator, spec: PhantomSpec, kind: str, center):
    center = np.asarray(center, dtype=np.float64)
    if kind == "ellipsoid":
        semi = rng.uniform(*spec.ellipsoid_semi_axis_range, size=3)
        return _Primitive("ellipsoid", center, float(semi.max()), {"semi_axes": semi})
    if kind == "capsule":
        radius = float(rng.uniform(*spec.capsule_radius_range))
        length = float(rng.uniform(*spec.capsule_length_range))
    else:  # tube: a thin, elongated capsule (vessel-like)
        radius = float(rng.uniform(*spec.tube_radius_range))
        length = float(rng.uniform(*spec.tube_length_range))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    half = 0.5 * length * direction
    return _Primitive(
        kind,
        center,
        0.5 * length + radius,
        {"a": center - half, "b": center + half, "radius": radius},
    )


_KINDS = ("ellipsoid", "capsule", "tube")


def generate_phantom(spec: PhantomSpec) -> VoxelLabelVolume:
    """Voxelize a phantom. Deterministic in ``spec.seed``.

    Labels 1..K partition a subset of the envelope; later structures never
    overwrite earlier labels, so the partition invariant holds by
    construction. Raises :class:`PhantomGenerationError` when the structures
    cannot be placed within the retry budget.
    """
    rng = np.random.default_rng(spec.seed)
    dims = np.asarray(spec.dims)
    grid_extent = dims * spec.spacing
    envelope_center = 0.5 * grid_extent
    semi = np.asarray(spec.envelope_semi_axes, dtype=np.float64)
    if np.any(2 * semi > grid_extent):
        raise PhantomGenerationError(
            f"envelope {2 * semi} does not fit in grid extent {grid_extent}"
        )

    nx, ny, nz = spec.dims
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    centers = spec.spacing * (np.stack([ix, iy, iz], axis=-1) + 0.5)
    envelope = _superellipsoid_mask(
        centers, envelope_center, semi, spec.envelope_exponent
    )

    for _ in range(spec.max_retries):
        labels = _try_place(rng, spec, centers, envelope, envelope_center, semi)
        if labels is not None:
            names = tuple(f"structure_{i:02d}" for i in range(1, spec.num_structures + 1))
            return VoxelLabelVolume(labels, spec.spacing, np.zeros(3), class_names=names)
    raise PhantomGenerationError(
        f"could not place {spec.num_structures} structures after "
        f"{spec.max_retries} retries (seed {spec.seed})"
    )


def _try_place(rng, spec, centers, envelope, env_center, env_semi):
    K = spec.num_structures
    labels = np.zeros(spec.dims, dtype=np.uint16)
    if spec.packing == "touching":
        # Classes 2..K are embedded organs painted first; class 1 (the host)
        # then fills the rest of the envelope, guaranteeing dense packing.
        # The first organ is a small ellipsoid near the envelope center so its
        # 50%-enlarged AABB reliably stays inside the host.
        lo, hi = spec.ellipsoid_semi_axis_range
        semi = rng.uniform(lo, lo + 0.4 * (hi - lo), size=3)
        jitter = rng.uniform(-0.05, 0.05, size=3) * env_semi
        anchor = _Primitive(
            "ellipsoid", env_center + jitter, float(semi.max()), {"semi_axes": semi}
        )
        rest = _place_disjoint(
            rng, spec, env_center, env_semi, count=K - 2, embedded=True, avoid=[anchor]
        )
        if rest is None:
            return None
        organs = [anchor] + rest
        for i, prim in enumerate(organs):
            mask = prim.mask(centers) & envelope & (labels == 0)
            if mask.sum() < 8:
                return None
            labels[mask] = i + 2
        labels[envelope & (labels == 0)] = 1
        if not _touching_guarantee_holds(labels, spec, first_organ_class=2):
            return None
        return labels

    organs = _place_disjoint(rng, spec, env_center, env_semi, count=K, embedded=False)
    if organs is None:
        return None
    for i, prim in enumerate(organs):
        mask = prim.mask(centers) & envelope & (labels == 0)
        if mask.sum() < 8:
            return None
        labels[mask] = i + 1
    return labels


def _place_disjoint(rng, spec, env_center, env_semi, count, embedded, avoid=None):
    """Sample non-overlapping primitives whose reach stays inside the
    envelope (with extra margin when they must be fully embedded)."""
    margin = 0.15 * env_semi.min() if embedded else 0.05 * env_semi.min()
    gap = 2.5 * spec.spacing if not embedded else spec.spacing
    placed: list[_Primitive] = list(avoid) if avoid else []
    for i in range(count):
        kind = _KINDS[i % len(_KINDS)] if not embedded else _KINDS[rng.integers(len(_KINDS))]
        for _ in range(200):
            u = rng.uniform(-1, 1, size=3)
            center = env_center + u * (env_semi * 0.6)
            prim = _sample_primitive(rng, spec, kind, center)
            # Keep the whole primitive (and its embedding margin) inside the envelope.
            rel = np.abs(center - env_center) + prim.reach + margin
            if np.any(rel > env_semi):
                continue
            ok = all(
                np.linalg.norm(center - q.center) > prim.reach + q.reach + gap
                for q in placed
            )
            if ok:
                placed.append(prim)
                break
        else:
            return None
    return placed[len(avoid) if avoid else 0 :]


def _touching_guarantee_holds(labels, spec, first_organ_class) -> bool:
    """At least one embedded structure must have zero free-space voxels in
    its 50%-enlarged AABB (exhaustive scan)."""
    vol = VoxelLabelVolume(labels, spec.spacing, np.zeros(3))
    for c in range(first_organ_class, int(labels.max()) + 1):
        box = aabb_of_class(vol, c)
        if box is None:
            continue
        big = box.enlarged(0.5)
        lo = np.floor((big.min_corner - vol.origin) / spec.spacing).astype(int)
        hi = np.ceil((big.max_corner - vol.origin) / spec.spacing).astype(int)
        lo = np.clip(lo, 0, np.asarray(spec.dims))
        hi = np.clip(hi, 0, np.asarray(spec.dims))
        region = labels[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        if region.size and (region != 0).all():
            return True
    return False


def extract_skin(v: VoxelLabelVolume) -> TriMesh:
    """Outer body surface: marching cubes on the union of all structures.

    The union is reduced to its largest 6-connected voxel component, and the
    largest closed mesh component is kept, yielding a single outer surface.
    """
    union = (np.asarray(v.labels) > 0).astype(np.uint16)
    if union.max() == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    union_vol = VoxelLabelVolume(union, v.spacing, v.origin)
    union_vol, _ = largest_component(union_vol, 1)
    mesh = extract_mesh(pad_boundary(union_vol), 1)
    parts = mesh.connected_components()
    if len(parts) <= 1:
        return mesh
    return max(parts, key=lambda m: abs(m.signed_volume()))
