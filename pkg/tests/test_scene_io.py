import math

import numpy as np
import pytest

from scipy.spatial import cKDTree

from orthoplanes.generic import Io, Malformed, TooFewPoints, normalize
from orthoplanes.geometry import PointCloud, point_plane_distance
from orthoplanes.scene_io import (Layout, SamplingParams, SyntheticSpec,
                                  build_hierarchy, downsample, estimate_normals,
                                  generate_synthetic_scene, ground_truth_from_dict,
                                  ground_truth_to_dict, load_point_cloud, read_ply,
                                  save_point_cloud)

EZ = np.array([0.0, 0.0, 1.0])


def close_agreeing_pairs(cloud, radius, normal_angle=30.0):
    """Point pairs within radius whose normals agree within normal_angle."""
    pairs = cKDTree(cloud.positions).query_pairs(radius, output_type="ndarray")
    if cloud.normals is None or pairs.shape[0] == 0:
        return pairs.shape[0]
    dots = np.abs(np.einsum("ij,ij->i", cloud.normals[pairs[:, 0]],
                            cloud.normals[pairs[:, 1]]))
    return int(np.count_nonzero(dots >= math.cos(math.radians(normal_angle))))


def test_binary_ply_keeps_doubles(tmp_path, noisy_box):
    cloud, truth = noisy_box
    path = str(tmp_path / "box.ply")
    save_point_cloud(cloud, path, labels=truth.point_labels)
    back, labels = load_point_cloud(path, with_labels=True)
    np.testing.assert_array_equal(back.positions, cloud.positions)
    np.testing.assert_array_equal(back.normals, cloud.normals)
    np.testing.assert_array_equal(labels, truth.point_labels)


def test_ascii_ply(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(25, 3)))
    path = str(tmp_path / "points.ply")
    save_point_cloud(cloud, path, binary=False)
    back = load_point_cloud(path)
    assert back.normals is None
    np.testing.assert_allclose(back.positions, cloud.positions, rtol=1e-8)
    assert load_point_cloud(path, with_labels=True)[1] is None


def test_handwritten_ascii_ply(tmp_path):
    path = tmp_path / "hand.ply"
    path.write_text("ply\nformat ascii 1.0\ncomment made by hand\n"
                    "element vertex 2\nproperty float x\nproperty float y\n"
                    "property float z\nproperty float nx\nproperty float ny\n"
                    "property float nz\nproperty uchar red\nend_header\n"
                    "0 0 1 0 0 1 255\n1.5 2 3 1 0 0 0\n")
    frame = read_ply(str(path))
    assert list(frame.columns) == ["x", "y", "z", "nx", "ny", "nz", "red"]
    cloud = load_point_cloud(str(path))
    np.testing.assert_allclose(cloud.positions, [[0, 0, 1], [1.5, 2, 3]])
    np.testing.assert_allclose(cloud.normals, [[0, 0, 1], [1, 0, 0]])


def test_big_endian_ply_with_leading_element(tmp_path):
    header = ("ply\nformat binary_big_endian 1.0\nelement camera 1\n"
              "property float focal\nelement vertex 2\nproperty float x\n"
              "property float y\nproperty float z\nproperty uchar red\n"
              "end_header\n").encode("ascii")
    camera = np.array([3.5], dtype=">f4").tobytes()
    vertices = np.array([(1.0, 2.0, 3.0, 7), (-1.0, 0.5, 0.25, 9)],
                        dtype=[("x", ">f4"), ("y", ">f4"), ("z", ">f4"), ("red", "u1")])
    path = tmp_path / "be.ply"
    path.write_bytes(header + camera + vertices.tobytes())
    cloud = load_point_cloud(str(path))
    np.testing.assert_allclose(cloud.positions, [[1, 2, 3], [-1, 0.5, 0.25]])


def test_broken_ply(tmp_path, noisy_box):
    cloud, _ = noisy_box
    good = tmp_path / "good.ply"
    save_point_cloud(cloud, str(good))
    cut = tmp_path / "cut.ply"
    cut.write_bytes(good.read_bytes()[:-100])
    with pytest.raises(Malformed):
        load_point_cloud(str(cut))

    text = tmp_path / "text.ply"
    text.write_text("hello\n")
    with pytest.raises(Malformed):
        load_point_cloud(str(text))

    faces = tmp_path / "faces.ply"
    faces.write_text("ply\nformat ascii 1.0\nelement face 0\n"
                     "property list uchar int vertex_indices\nend_header\n")
    with pytest.raises(Malformed):
        load_point_cloud(str(faces))

    with pytest.raises(Io):
        load_point_cloud(str(tmp_path / "absent.ply"))


def test_normals_of_a_plane(rng):
    xy = rng.uniform(0, 1, size=(500, 2))
    cloud = PointCloud(np.column_stack((xy, np.zeros(500))))
    normals = estimate_normals(cloud, k=10).normals
    assert np.all(np.abs(normals @ EZ) > math.cos(math.radians(1.0)))


def test_normals_away_from_a_crease():
    cloud, truth = generate_synthetic_scene(SyntheticSpec(
        Layout.TWO_WALLS, points_per_m2=2500, seed=3, recompute_normals=False))
    estimated = estimate_normals(PointCloud(cloud.positions), k=20, workers=2, chunk=1000)
    labels = truth.point_labels
    # wall 0 is x = 0, wall 1 is y = 0; the crease is the z axis
    interior = np.where(labels == 0, cloud.positions[:, 1], cloud.positions[:, 0]) > 0.15
    for k, plane in enumerate(truth.planes):
        mine = interior & (labels == k)
        dots = np.abs(estimated.normals[mine] @ plane.normal)
        assert np.all(dots > math.cos(math.radians(2.0)))


def test_normals_need_points():
    with pytest.raises(TooFewPoints):
        estimate_normals(PointCloud(np.zeros((2, 3))))
    few = estimate_normals(PointCloud([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]]), k=20)
    np.testing.assert_allclose(np.abs(few.normals @ EZ), 1.0)


def test_downsample_grid():
    i, j = np.meshgrid(np.arange(100), np.arange(100))
    positions = np.column_stack((0.005 + 0.01 * i.ravel(), 0.005 + 0.01 * j.ravel(),
                                 np.zeros(i.size)))
    cloud = PointCloud(positions, np.tile(EZ, (i.size, 1)))
    coarse = downsample(cloud, SamplingParams(d_min=0.05))
    assert len(coarse) == 400
    np.testing.assert_allclose(coarse.normals, np.tile(EZ, (400, 1)))

    fine = downsample(cloud, SamplingParams(d_min=0.001))
    assert len(fine) == len(cloud)
    np.testing.assert_allclose(np.sort(fine.positions, axis=0),
                               np.sort(cloud.positions, axis=0))


def test_downsample_averages(rng):
    truth = np.array([0.3, 0.3, 0.3])
    cloud = PointCloud(truth + rng.normal(0.0, 0.01, size=(1000, 3)))
    (point,) = downsample(cloud, SamplingParams(d_min=100.0)).positions
    assert np.linalg.norm(point - truth) < 4 * 0.01 / math.sqrt(1000)


def test_downsample_drops_invalid_points():
    positions = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]])
    cloud = PointCloud(positions, valid=[True, False, True])
    assert len(downsample(cloud, SamplingParams(d_min=0.01))) == 2


def test_hierarchy(noisy_box):
    cloud, _ = noisy_box
    params = SamplingParams(d_min=0.01, hierarchy_levels=3)
    levels = build_hierarchy(cloud, params)
    assert len(levels) == 3
    sizes = [len(level) for level in levels]
    assert sizes == sorted(sizes)
    for level, cloud_l in enumerate(levels):
        cell = 0.01 * 2 ** (2 - level)
        assert close_agreeing_pairs(cloud_l, cell / math.sqrt(3.0) * (1 - 1e-9)) == 0
    assert len(build_hierarchy(cloud, SamplingParams(hierarchy_levels=1))) == 1


def test_corner_room_points_lie_on_faces(corner_room):
    cloud, truth = corner_room
    assert len(truth.planes) == 3 and len(truth.lines) == 3 and len(truth.corners) == 1
    for k, plane in enumerate(truth.planes):
        mine = cloud.positions[truth.point_labels == k]
        assert mine.shape[0] > 0
        np.testing.assert_array_equal(point_plane_distance(mine, plane), 0.0)
    np.testing.assert_allclose(truth.corners[0].position, 0.0)


def test_synthetic_scenes_are_reproducible():
    spec = SyntheticSpec(Layout.CORNER_ROOM, points_per_m2=500, noise_sigma=0.002, seed=9)
    a, _ = generate_synthetic_scene(spec)
    b, _ = generate_synthetic_scene(spec)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.normals, b.normals)


def test_box_scene():
    cloud, truth = generate_synthetic_scene(SyntheticSpec(Layout.BOX, seed=5))
    assert abs(len(cloud) - 5e4) < 1000
    assert len(truth.planes) == 5
    assert len(truth.edges) == 8 and len(truth.lines) == 8
    assert len(truth.corners) == 4
    for corner, triple in zip(truth.corners, truth.corner_planes):
        assert np.linalg.det(corner.frame) == pytest.approx(1.0)
        for k in triple:
            assert point_plane_distance(corner.position, truth.planes[k]) \
                == pytest.approx(0.0, abs=1e-12)


def test_outliers_and_noise_ball():
    cloud, truth = generate_synthetic_scene(SyntheticSpec(
        Layout.SINGLE_PLANE, points_per_m2=1000, outlier_fraction=0.2, seed=1))
    outliers = np.count_nonzero(truth.point_labels == -1)
    assert outliers == int(round(0.2 / (1.0 - 0.2) * (len(cloud) - outliers)))

    ball, ball_truth = generate_synthetic_scene(SyntheticSpec(
        Layout.NOISE_BALL, points_per_m2=300))
    assert ball_truth.planes == [] and ball_truth.corners == []
    assert np.all(ball_truth.point_labels == -1)
    assert len(ball) == len(ball_truth.point_labels)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(outlier_fraction=1.0)
    with pytest.raises(ValueError):
        SyntheticSpec(noise_sigma=-0.1)


def test_ground_truth_json(corner_room):
    _, truth = corner_room
    back = ground_truth_from_dict(ground_truth_to_dict(truth))
    assert back.planes == truth.planes
    assert back.edges == truth.edges
    assert back.corner_planes == truth.corner_planes
    with pytest.raises(Malformed):
        ground_truth_from_dict({"lines": []})


def test_downsample_keeps_points_farther_apart_than_d_min():
    positions = np.array([[0.01, 0.01, 0.01], [0.99, 0.99, 0.99], [3.0, 0.0, 0.0]])
    out = downsample(PointCloud(positions), SamplingParams(d_min=1.0))
    assert len(out) == 3
    np.testing.assert_allclose(np.sort(out.positions, axis=0),
                               np.sort(positions, axis=0))


def test_downsample_separates_planes_in_crease_voxels():
    cloud, _ = generate_synthetic_scene(SyntheticSpec(
        Layout.TWO_WALLS, points_per_m2=2500, seed=3, recompute_normals=False))
    out = downsample(cloud, SamplingParams(d_min=0.05))
    # walls x = 0 and y = 0 share the voxels along the z axis
    off_plane = np.minimum(np.abs(out.positions[:, 0]), np.abs(out.positions[:, 1]))
    np.testing.assert_allclose(off_plane, 0.0, atol=1e-12)
    axis_dot = np.abs(out.normals[:, :2]).max(axis=1)
    np.testing.assert_allclose(axis_dot, 1.0, atol=1e-12)
    assert np.count_nonzero(np.abs(out.positions[:, 0]) < 1e-12) > 300
    assert np.count_nonzero(np.abs(out.positions[:, 1]) < 1e-12) > 300


def test_downsample_normal_angle():
    positions = np.array([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]])
    normals = normalize(np.array([[0.0, 0.0, 1.0], [0.0, 0.5, 1.0]]))
    cloud = PointCloud(positions, normals)
    assert len(downsample(cloud, SamplingParams(d_min=0.1))) == 1
    assert len(downsample(cloud, SamplingParams(d_min=0.1, normal_angle=20.0))) == 2
    with pytest.raises(ValueError):
        SamplingParams(normal_angle=0.0)


def test_hierarchy_of_noiseless_walls_stays_on_planes():
    cloud, _ = generate_synthetic_scene(SyntheticSpec(
        Layout.TWO_WALLS, points_per_m2=2500, seed=4))
    for level in build_hierarchy(cloud, SamplingParams()):
        off_plane = np.minimum(np.abs(level.positions[:, 0]),
                               np.abs(level.positions[:, 1]))
        assert off_plane.max() < 1e-12
