import numpy as np
import pytest

import occatlas.infer as infer
from occatlas.infer import (
    coarse_probe,
    dense_reconstruct,
    extract_atlas_meshes,
    load_boxes_json,
    reconstruct_atlas,
    save_boxes_json,
)
from occatlas.sensor import IsoNormalization, SensorPointCloud
from occatlas.volume import AxisAlignedBox


class FakeModel:
    """Stands in for a trained network; the analytic decoder below supplies
    the forward pass so reconstruction logic can be checked exactly."""

    def __init__(self, num_classes, centers, radii):
        self.num_classes = num_classes
        self.centers = [np.asarray(c, float) for c in centers]
        self.radii = list(radii)
        self.params = {}


def analytic_decode(model, latent, queries, train=False, **kw):
    """Class c+1 inside sphere c (first match wins), class 0 elsewhere."""
    q = np.atleast_2d(queries)
    logits = np.zeros((len(q), model.num_classes + 1))
    logits[:, 0] = 1.0  # None class wins by default
    for c, (center, r) in enumerate(zip(model.centers, model.radii)):
        inside = np.linalg.norm(q - center, axis=1) < r
        logits[inside, 0] = 0.0
        logits[inside, c + 1] += 2.0 + c  # later spheres win overlaps
    sdf = np.linalg.norm(q - model.centers[0], axis=1) - model.radii[0]
    return logits, sdf


@pytest.fixture
def sphere_model(monkeypatch):
    monkeypatch.setattr(infer, "decode", analytic_decode)
    monkeypatch.setattr(infer, "encode", lambda params, pts: np.zeros(8))
    return FakeModel(2, centers=[(0.2, 0.0, 0.0), (-0.4, -0.3, 0.1)], radii=[0.3, 0.2])


def oracle_class(model, pts):
    logits, _ = analytic_decode(model, None, pts)
    return np.argmax(logits, axis=1).astype(np.uint16)


# ---------------------------------------------------------------------------
# coarse probing


def test_coarse_probe_hits_only(sphere_model):
    pts, classes = coarse_probe(sphere_model, None, count=5000, rng=np.random.default_rng(0))
    assert len(pts) == len(classes)
    assert (classes != 0).all()
    assert np.array_equal(oracle_class(sphere_model, pts), classes)


def test_coarse_probe_hit_fraction(sphere_model):
    # Monte-Carlo volume estimate: spheres occupy (4/3)pi(r1^3 + r2^3) of
    # the cube volume 8 (overlap is negligible for these placements).
    pts, _ = coarse_probe(sphere_model, None, count=40000, rng=np.random.default_rng(1))
    expect = 4.0 / 3.0 * np.pi * (0.3**3 + 0.2**3) / 8.0
    assert len(pts) / 40000 == pytest.approx(expect, rel=0.15)


def test_coarse_probe_deterministic(sphere_model):
    a, _ = coarse_probe(sphere_model, None, count=1000, rng=np.random.default_rng(3))
    b, _ = coarse_probe(sphere_model, None, count=1000, rng=np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_coarse_probe_empty(sphere_model):
    sphere_model.radii = [0.0, 0.0]  # nothing inside
    pts, classes = coarse_probe(sphere_model, None, count=1000, rng=np.random.default_rng(0))
    assert len(pts) == 0 and len(classes) == 0


# ---------------------------------------------------------------------------
# dense reconstruction


def test_dense_pitch_and_dims(sphere_model):
    norm = IsoNormalization(scale=2.0, translation=np.zeros(3))
    probe_pts = np.array([[-0.5, -0.2, -0.1], [0.5, 0.2, 0.1]])
    pred = dense_reconstruct(sphere_model, None, probe_pts, norm, resolution=32, margin=0.0)
    # Longest extent (x: 1.0) divided into 32 voxels.
    assert pred.volume.spacing == pytest.approx((1.0 / 32) / norm.scale)
    assert pred.volume.dims[0] == 32
    assert pred.volume.dims[1] < 32  # shorter axes get fewer voxels


def test_dense_labels_match_oracle(sphere_model):
    norm = IsoNormalization(scale=1.0, translation=np.zeros(3))
    probe_pts = np.array([[-0.9, -0.9, -0.9], [0.9, 0.9, 0.9]])
    pred = dense_reconstruct(sphere_model, None, probe_pts, norm, resolution=24, margin=0.0)
    v = pred.volume
    centers = v.voxel_centers().reshape(-1, 3)  # metric == normalized (scale 1)
    assert np.array_equal(
        np.asarray(v.labels).reshape(-1), oracle_class(sphere_model, centers)
    )


def test_dense_box_matches_analytic_sphere(sphere_model):
    norm = IsoNormalization(scale=2.5, translation=np.array([0.1, -0.2, 1.8]))
    rng = np.random.default_rng(0)
    probe_pts, _ = coarse_probe(sphere_model, None, count=40000, rng=rng)
    pred = dense_reconstruct(sphere_model, None, probe_pts, norm, resolution=64)
    box = pred.boxes[1]
    # Analytic AABB of sphere 1 in metric space.
    c_metric = norm.invert(np.array([0.2, 0.0, 0.0]))
    r_metric = 0.3 / norm.scale
    pitch_metric = pred.volume.spacing
    assert np.all(np.abs(box.center - c_metric) < 2 * pitch_metric)
    assert np.all(np.abs(box.extents - 2 * r_metric) < 4 * pitch_metric)


def test_dense_absent_class_box_is_none(sphere_model):
    sphere_model.radii[1] = 0.0  # second structure vanishes
    norm = IsoNormalization(scale=1.0, translation=np.zeros(3))
    probe_pts, _ = coarse_probe(sphere_model, None, count=20000, rng=np.random.default_rng(0))
    pred = dense_reconstruct(sphere_model, None, probe_pts, norm, resolution=32)
    assert pred.boxes[1] is not None
    assert pred.boxes[2] is None
    assert pred.present_classes() == [1]


def test_dense_empty_probe_set(sphere_model):
    norm = IsoNormalization(scale=2.0, translation=np.zeros(3))
    pred = dense_reconstruct(sphere_model, None, np.zeros((0, 3)), norm)
    assert pred.volume.dims == (1, 1, 1)
    assert all(b is None for b in pred.boxes.values())


def test_dense_margin_grows_grid(sphere_model):
    norm = IsoNormalization(scale=1.0, translation=np.zeros(3))
    probe_pts = np.array([[-0.4, -0.4, -0.4], [0.4, 0.4, 0.4]])
    tight = dense_reconstruct(sphere_model, None, probe_pts, norm, resolution=32, margin=0.0)
    wide = dense_reconstruct(sphere_model, None, probe_pts, norm, resolution=32, margin=0.15)
    assert wide.volume.spacing > tight.volume.spacing
    assert np.all(wide.volume.origin <= tight.volume.origin + 1e-12)


# ---------------------------------------------------------------------------
# full pipeline, meshes, box files


def test_reconstruct_atlas_deterministic(sphere_model):
    cloud = SensorPointCloud(np.random.default_rng(0).uniform(-0.3, 0.3, (200, 3)) + [0, 0, 2])
    a = reconstruct_atlas(sphere_model, cloud, probes=5000, resolution=24, seed=4)
    b = reconstruct_atlas(sphere_model, cloud, probes=5000, resolution=24, seed=4)
    assert np.array_equal(np.asarray(a.volume.labels), np.asarray(b.volume.labels))
    assert a.volume.spacing == b.volume.spacing
    assert np.array_equal(a.volume.origin, b.volume.origin)


def test_reconstruct_atlas_metric_output(sphere_model):
    # Cloud centered at z=2 m with 0.8 m extent: normalized sphere 1 of
    # radius 0.3 must come back with a metric radius 0.3 / scale.
    rng = np.random.default_rng(1)
    cloud = SensorPointCloud(rng.uniform(-0.4, 0.4, (500, 3)) + [0, 0, 2])
    pred = reconstruct_atlas(sphere_model, cloud, probes=20000, resolution=48, seed=0)
    box = pred.boxes[1]
    scale = 2.0 / 0.8  # approximately, from the cloud extent
    assert box.extents.max() == pytest.approx(2 * 0.3 / scale, rel=0.15)
    assert 1.0 < box.center[2] < 3.0  # near the cloud, in camera meters


def test_extract_atlas_meshes_closed(sphere_model):
    norm = IsoNormalization(scale=1.0, translation=np.zeros(3))
    probe_pts, _ = coarse_probe(sphere_model, None, count=20000, rng=np.random.default_rng(0))
    pred = dense_reconstruct(sphere_model, None, probe_pts, norm, resolution=32)
    meshes = extract_atlas_meshes(pred)
    assert [c for c, _ in meshes] == pred.present_classes()
    for _, mesh in meshes:
        assert mesh.boundary_edge_count() == 0
        assert mesh.signed_volume() > 0


def test_boxes_json_roundtrip(tmp_path):
    boxes = {
        1: AxisAlignedBox([0.0, -0.1, 1.9], [0.2, 0.1, 2.1]),
        2: None,
        3: AxisAlignedBox([-1, -1, -1], [1, 1, 1]),
    }
    path = tmp_path / "boxes.json"
    save_boxes_json(boxes, path)
    back = load_boxes_json(path)
    assert set(back) == {1, 2, 3}
    assert back[2] is None
    assert np.allclose(back[1].min_corner, boxes[1].min_corner)
    assert np.allclose(back[3].max_corner, boxes[3].max_corner)
