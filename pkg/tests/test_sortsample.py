import numpy as np
import pytest

from occatlas.phantom import PhantomSpec, generate_phantom
from occatlas.sortsample import (
    DistanceField,
    NonTermination,
    OccupancySampleSet,
    StructureAbsentError,
    build_training_pair,
    load_pair,
    save_pair,
    sort_sample_original,
    sort_sample_revised,
)
from occatlas.volume import VoxelLabelVolume, aabb_of_class, signed_distance_oracle


def make_volume(labels, spacing=0.01):
    return VoxelLabelVolume(np.asarray(labels, dtype=np.uint16), spacing, np.zeros(3))


def nested_volume(n=20, spacing=0.01):
    """Class 2 cube fully embedded in a class 1 cube (no free space around
    class 2): the original algorithm's non-termination case."""
    g = np.zeros((n, n, n), dtype=np.uint16)
    g[2 : n - 2, 2 : n - 2, 2 : n - 2] = 1
    c = n // 2
    g[c - 2 : c + 2, c - 2 : c + 2, c - 2 : c + 2] = 2
    return make_volume(g, spacing)


def separated_volume(spacing=0.01):
    g = np.zeros((24, 12, 12), dtype=np.uint16)
    g[2:8, 3:9, 3:9] = 1
    g[14:22, 3:9, 3:9] = 2
    return make_volume(g, spacing)


# ---------------------------------------------------------------------------
# DistanceField


def test_distance_field_matches_oracle_within_voxel():
    v = separated_volume()
    df = DistanceField(v, 1)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, [0.24, 0.12, 0.12], size=(200, 3))
    approx = df(pts)
    exact = signed_distance_oracle(v, pts, 1)
    assert np.all(np.abs(approx - exact) <= v.spacing + 1e-12)


def test_distance_field_sign():
    v = separated_volume()
    df = DistanceField(v, 1)
    inside = np.array([[0.05, 0.06, 0.06]])  # deep inside class 1
    outside = np.array([[0.18, 0.06, 0.06]])  # inside class 2, outside class 1
    assert df(inside)[0] < 0
    assert df(outside)[0] > 0


def test_distance_field_absent_class():
    with pytest.raises(StructureAbsentError):
        DistanceField(separated_volume(), 7)


# ---------------------------------------------------------------------------
# original SortSample


def test_original_terminates_with_free_space():
    v = separated_volume()
    out = sort_sample_original(v, 1, 32, np.random.default_rng(0))
    assert isinstance(out, OccupancySampleSet)
    assert out.n == 32
    assert (out.outside_labels == 0).all()


def test_original_nontermination_on_embedded_structure():
    # Class 2 has zero free space inside its enlarged AABB, so the outside
    # set stays empty for the entire draw budget.
    v = nested_volume()
    out = sort_sample_original(v, 2, 32, np.random.default_rng(0), max_draws=10**5)
    assert isinstance(out, NonTermination)
    assert out.num_outside == 0
    assert out.draws >= 10**5
    assert out.num_inside > 0


def test_original_outside_excludes_other_structures():
    v = separated_volume()
    out = sort_sample_original(v, 1, 64, np.random.default_rng(1))
    labels = v.label_at(out.outside_points)
    assert (labels == 0).all()


# ---------------------------------------------------------------------------
# revised SortSample


def test_revised_terminates_on_embedded_structure():
    v = nested_volume()
    out = sort_sample_revised(v, 2, 32, np.random.default_rng(0))
    assert out.n == 32
    # All outside points sit in the surrounding structure -> relabeled 1.
    assert (out.outside_labels == 1).all()


def test_revised_labels_match_volume_lookup():
    v = separated_volume()
    out = sort_sample_revised(v, 1, 64, np.random.default_rng(2))
    assert np.array_equal(out.outside_labels, v.label_at(out.outside_points))
    assert np.array_equal(v.label_at(out.inside_points), np.ones(64, dtype=np.uint16))


def test_revised_sides_balanced_and_points_in_enlarged_box():
    v = separated_volume()
    n = 48
    out = sort_sample_revised(v, 2, n, np.random.default_rng(3))
    assert len(out.inside_points) == n and len(out.outside_points) == n
    big = aabb_of_class(v, 2).enlarged(0.5)
    for pts in (out.inside_points, out.outside_points):
        assert np.all(pts >= big.min_corner - 1e-12)
        assert np.all(pts <= big.max_corner + 1e-12)


def test_revised_sdf_signs():
    v = separated_volume()
    out = sort_sample_revised(v, 1, 64, np.random.default_rng(4))
    # SDF is relative to the sampled structure: negative inside it. The
    # interpolated field may straddle zero within half a voxel of the
    # surface, so allow that tolerance.
    assert np.all(out.inside_sdf <= 0.5 * v.spacing)
    assert np.all(out.outside_sdf >= -0.5 * v.spacing)


def test_revised_keeps_nearest():
    # Instrumented run: every kept sample is at least as close to the
    # surface as every discarded outside candidate.
    v = separated_volume()
    out, discarded_pts, discarded_d = sort_sample_revised(
        v, 1, 32, np.random.default_rng(5), _return_discards=True
    )
    assert np.abs(out.outside_sdf).max() <= np.abs(discarded_d).min() + 1e-12


def test_revised_deterministic():
    v = separated_volume()
    a = sort_sample_revised(v, 1, 32, np.random.default_rng(7))
    b = sort_sample_revised(v, 1, 32, np.random.default_rng(7))
    assert np.array_equal(a.inside_points, b.inside_points)
    assert np.array_equal(a.outside_points, b.outside_points)


def test_revised_absent_class():
    with pytest.raises(StructureAbsentError):
        sort_sample_revised(separated_volume(), 9, 8, np.random.default_rng(0))


def test_sample_set_concatenation():
    v = separated_volume()
    out = sort_sample_revised(v, 2, 16, np.random.default_rng(8))
    assert out.all_points().shape == (32, 3)
    labels = out.all_labels()
    assert (labels[:16] == 2).all()
    assert out.all_sdf().shape == (32,)


def test_sample_set_transformed_preserves_sdf():
    v = separated_volume()
    out = sort_sample_revised(v, 1, 16, np.random.default_rng(9))
    shifted = out.transformed(lambda p: p + 1.0)
    assert np.array_equal(shifted.inside_sdf, out.inside_sdf)
    assert np.allclose(shifted.inside_points, out.inside_points + 1.0)


# ---------------------------------------------------------------------------
# training pairs


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomSpec(seed=0, num_structures=3, dims=(30, 24, 70), spacing=0.015))


def test_build_pair_deterministic(phantom):
    a = build_training_pair(phantom, seed=5)
    b = build_training_pair(phantom, seed=5)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.sdf, b.sdf)


def test_build_pair_shapes(phantom):
    pair = build_training_pair(phantom, seed=1, n=16)
    assert pair.num_classes == 3
    assert len(pair.positions) == 3 * 32  # 3 classes x (16 inside + 16 outside)
    assert len(pair.labels) == len(pair.sdf) == len(pair.positions)
    assert len(pair.cloud) > 0
    assert pair.labels.max() <= 3


def test_build_pair_camera_space(phantom):
    # Sample positions should sit in front of the camera (positive z) and
    # roughly at the camera distance.
    pair = build_training_pair(phantom, seed=2, n=8)
    assert (pair.positions[:, 2] > 0.5).all()
    assert (pair.positions[:, 2] < 3.5).all()
    assert (np.linalg.norm(pair.cloud.points, axis=1) > 0.5).all()


def test_build_pair_no_deform_label_consistency(phantom):
    # Without deformation the pair samples, pulled back to world space, must
    # agree with a direct volume lookup.
    pair = build_training_pair(phantom, seed=3, n=16, deform=False)
    rng = np.random.default_rng(3)
    from occatlas.sortsample import _union_box
    from occatlas.sensor import sample_camera_pose

    pose = sample_camera_pose(rng, _union_box(phantom).center)
    world = pose.camera_to_world(pair.positions)
    assert np.array_equal(phantom.label_at(world), pair.labels)


def test_pair_file_roundtrip(phantom, tmp_path):
    pair = build_training_pair(phantom, seed=4, n=8)
    path = tmp_path / "pair_0000.bin"
    save_pair(pair, path)
    back = load_pair(path)
    assert np.array_equal(back.cloud.points, pair.cloud.points)
    assert np.array_equal(back.positions, pair.positions)
    assert np.array_equal(back.labels, pair.labels)
    assert np.array_equal(back.sdf, pair.sdf)
    assert back.num_classes == pair.num_classes
    assert back.seed == pair.seed
    assert back.samples_per_side == pair.samples_per_side
