import numpy as np
import pytest

from occatlas.baseline import (
    DegenerateRegistrationError,
    RigidTransform,
    Template,
    chamfer,
    icp_register,
    load_template_library,
    match_and_transfer,
    save_template_library,
)
from occatlas.deform import rotation_matrix_xyz
from occatlas.sensor import SensorPointCloud
from occatlas.volume import AxisAlignedBox


def body_like_cloud(seed, n=400):
    """Asymmetric, feature-rich cloud so ICP has a unique optimum."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(-0.5, 0.5, n)
    r = 0.2 + 0.05 * np.sin(3 * theta) + 0.1 * z**2
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    pts[: n // 4, 0] += 0.15  # break symmetry
    return SensorPointCloud(pts + [0, 0, 2.0])


# ---------------------------------------------------------------------------
# RigidTransform


def test_transform_identity():
    t = RigidTransform.identity()
    pts = np.random.default_rng(0).normal(size=(10, 3))
    assert np.array_equal(t.apply(pts), pts)


def test_transform_inverse_roundtrip():
    rot = rotation_matrix_xyz((20, -35, 50))
    t = RigidTransform(rot, np.array([0.3, -0.2, 0.7]))
    pts = np.random.default_rng(1).normal(size=(50, 3))
    assert np.allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-12)


def test_transform_compose():
    a = RigidTransform(rotation_matrix_xyz((10, 0, 0)), np.array([1.0, 0, 0]))
    b = RigidTransform(rotation_matrix_xyz((0, 20, 0)), np.array([0, 1.0, 0]))
    pts = np.random.default_rng(2).normal(size=(20, 3))
    assert np.allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)


def test_transform_rejects_non_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # reflection


# ---------------------------------------------------------------------------
# ICP


def test_icp_recovers_known_transform():
    # The registration oracle: move a cloud by a known (10 deg, 0.1 m) rigid
    # transform and require ICP to recover it almost exactly.
    template = body_like_cloud(0)
    rot = rotation_matrix_xyz((10.0, 0.0, 0.0))
    true = RigidTransform(rot, np.array([0.1, 0.0, 0.0]))
    patient = SensorPointCloud(true.inverse().apply(template.points))
    result = icp_register(patient, template)
    assert result.converged
    # Rotation error in degrees via the trace formula.
    r_err = result.transform.rotation @ true.rotation.T
    angle = np.degrees(np.arccos(np.clip((np.trace(r_err) - 1) / 2, -1, 1)))
    assert angle < 0.1
    assert np.linalg.norm(result.transform.translation - true.translation) < 1e-3
    assert result.residual < 1e-6


def test_icp_identity_on_same_cloud():
    cloud = body_like_cloud(1)
    result = icp_register(cloud, cloud)
    assert result.residual < 1e-9
    assert np.allclose(result.transform.rotation, np.eye(3), atol=1e-9)


def test_icp_residual_monotone():
    template = body_like_cloud(2)
    rot = rotation_matrix_xyz((8, -5, 12))
    patient = SensorPointCloud((template.points - [0, 0, 2]) @ rot + [0.05, -0.04, 2.02])
    # Re-run with increasing iteration caps: the residual never increases.
    residuals = [
        icp_register(patient, template, max_iters=k).residual for k in (1, 3, 6, 12, 25, 50)
    ]
    for earlier, later in zip(residuals, residuals[1:]):
        assert later <= earlier + 1e-12


def test_icp_degenerate_inputs():
    good = body_like_cloud(3)
    with pytest.raises(DegenerateRegistrationError):
        icp_register(SensorPointCloud(np.zeros((2, 3))), good)
    line = np.outer(np.linspace(0, 1, 10), [1.0, 0, 0])
    with pytest.raises(DegenerateRegistrationError):
        icp_register(SensorPointCloud(line), good)


# ---------------------------------------------------------------------------
# chamfer


def test_chamfer_zero_on_identical():
    c = body_like_cloud(4)
    assert chamfer(c, c) == 0.0


def test_chamfer_symmetric():
    a, b = body_like_cloud(5), body_like_cloud(6)
    assert chamfer(a, b) == pytest.approx(chamfer(b, a))


def test_chamfer_known_offset():
    # Two parallel planes of points offset by d: every nearest neighbor is
    # the directly opposite point, so chamfer == d exactly.
    grid = np.stack(np.meshgrid(np.linspace(0, 1, 10), np.linspace(0, 1, 10)), -1).reshape(-1, 2)
    a = SensorPointCloud(np.column_stack([grid, np.zeros(len(grid))]))
    b = SensorPointCloud(np.column_stack([grid, np.full(len(grid), 0.05)]))
    assert chamfer(a, b) == pytest.approx(0.05)


# ---------------------------------------------------------------------------
# template matching and box transfer


def make_template(seed):
    cloud = body_like_cloud(seed)
    boxes = {
        1: AxisAlignedBox([-0.1 - 0.01 * seed, -0.1, 1.8], [0.1, 0.1, 2.0]),
        2: AxisAlignedBox([0.0, -0.05, 2.0], [0.15, 0.08, 2.3]),
        3: None,
    }
    return Template(f"t{seed:02d}", cloud, boxes)


def test_match_selects_moved_template():
    templates = [make_template(s) for s in range(8)]
    true = RigidTransform(rotation_matrix_xyz((6, -4, 9)), np.array([0.08, -0.03, 0.05]))
    patient = SensorPointCloud(true.inverse().apply(templates[3].cloud.points))
    boxes, winner, score = match_and_transfer(patient, templates)
    assert winner == "t03"
    assert score < 1e-6
    # Transferred boxes match the moved ground truth within 1 mm.
    for class_id, ref_box in templates[3].boxes.items():
        if ref_box is None:
            assert boxes[class_id] is None
            continue
        moved = true.inverse().apply(ref_box.corners())
        expect = AxisAlignedBox(moved.min(axis=0), moved.max(axis=0))
        assert np.all(np.abs(boxes[class_id].min_corner - expect.min_corner) < 1e-3)
        assert np.all(np.abs(boxes[class_id].max_corner - expect.max_corner) < 1e-3)


def test_transferred_box_never_smaller_than_rotated_original():
    # Re-tightening takes the AABB of the 8 transformed corners, which can
    # only grow the box (conservative containment).
    template = make_template(0)
    true = RigidTransform(rotation_matrix_xyz((15, 10, -10)), np.array([0.05, 0.0, 0.0]))
    patient = SensorPointCloud(true.inverse().apply(template.cloud.points))
    boxes, _, _ = match_and_transfer(patient, [template])
    assert boxes[1].volume >= template.boxes[1].volume - 1e-12


def test_match_empty_library():
    with pytest.raises(ValueError):
        match_and_transfer(body_like_cloud(0), [])


def test_template_library_roundtrip(tmp_path):
    templates = [make_template(s) for s in range(3)]
    save_template_library(templates, tmp_path / "lib")
    back = load_template_library(tmp_path / "lib")
    assert [t.template_id for t in back] == ["t00", "t01", "t02"]
    for orig, loaded in zip(templates, back):
        assert np.allclose(loaded.cloud.points, orig.cloud.points, atol=1e-7)
        assert loaded.boxes[3] is None
        assert np.allclose(loaded.boxes[1].min_corner, orig.boxes[1].min_corner)
