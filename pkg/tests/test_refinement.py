import math
import warnings

import numpy as np
import pytest

from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from orthoplanes.generic import (EmptyAssignment, InsufficientSupport, Singular,
                                 normalize, so3_exp)
from orthoplanes.geometry import Corner, Plane, PointCloud
from orthoplanes.refinement import (CornerRefiner, GraphRefiner, RefinementParams,
                                    RobustLoss, assign_points_to_bundles,
                                    bundle_jacobian, bundle_residuals,
                                    corner_jacobian, corner_residuals,
                                    initial_corner, orthogonality_jacobian,
                                    orthogonality_residuals, project_to_rotation,
                                    refine_corner, refine_graph,
                                    select_corner_support)
from orthoplanes.relation_graph import ParallelBundle
from orthoplanes.scene_io import (Layout, SamplingParams, SyntheticSpec, downsample,
                                  generate_synthetic_scene)

EX, EY, EZ = np.eye(3)
ALL_POINTS = SamplingParams(d_min=1e-5, hierarchy_levels=1)


@given(st.floats(-1.0, 1.0))
def test_huber_weight_matches_derivative(r):
    loss = RobustLoss("huber", 0.02)
    h = 1e-7
    slope = (loss.rho(r + h) - loss.rho(r - h)) / (2 * h)
    assert slope == pytest.approx(2 * loss.weight(r) * r, abs=1e-5)


def test_robust_loss():
    huber = RobustLoss("huber", 0.1)
    np.testing.assert_allclose(huber.rho([0.05, -0.3]), [0.0025, 0.05])
    np.testing.assert_allclose(huber.weight([0.05, 0.4]), [1.0, 0.25])
    np.testing.assert_allclose(RobustLoss().rho([-3.0]), [9.0])
    with pytest.raises(ValueError):
        RefinementParams(robust="cauchy")
    with pytest.raises(ValueError):
        RefinementParams(epsilon=0.0)


def test_project_to_rotation(random_rotation, rng):
    np.testing.assert_allclose(project_to_rotation(random_rotation), random_rotation,
                               atol=1e-12)
    R = project_to_rotation(random_rotation + 0.05 * rng.normal(size=(3, 3)))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)

    R = project_to_rotation(np.diag([1.0, 1.0, -1.0]))
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(R, [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-12)

    with pytest.raises(Singular):
        project_to_rotation([[1, 0, 0], [0, 1, 0], [0, 1, 0]])


@given(arrays(np.float64, 3, elements=st.floats(-1, 1)))
def test_corner_jacobian(w0):
    rng = np.random.default_rng(0)
    R, d = so3_exp(w0), rng.normal(size=3)
    points = rng.normal(size=(8, 3))
    planes = rng.integers(0, 3, size=8)
    J = corner_jacobian(R, d, points, planes)
    h = 1e-6
    for c in range(6):
        step = np.zeros(6)
        step[c] = h
        plus = corner_residuals(R @ so3_exp(step[:3]), d + step[3:], points, planes)
        minus = corner_residuals(R @ so3_exp(-step[:3]), d - step[3:], points, planes)
        np.testing.assert_allclose((plus - minus) / (2 * h), J[:, c], atol=1e-6)


def test_bundle_jacobian(rng):
    normals = normalize(rng.normal(size=(2, 3)))
    distances = [np.array([-0.5, 0.3]), np.array([0.1])]
    points = rng.normal(size=(10, 3))
    bundle = np.array([0, 0, 1, 0, 1, 1, 0, 0, 1, 0])
    index = np.array([0, 1, 0, 1, 0, 0, 0, 1, 0, 0])
    J = bundle_jacobian(normals, distances, points, bundle, index)
    assert J.shape == (10, 7)
    h = 1e-6
    for c in range(7):
        step = np.zeros(7)
        step[c] = h
        n_p, d_p = GraphRefiner.retract(normals, distances, step)
        n_m, d_m = GraphRefiner.retract(normals, distances, -step)
        numeric = (bundle_residuals(n_p, d_p, points, bundle, index)
                   - bundle_residuals(n_m, d_m, points, bundle, index)) / (2 * h)
        np.testing.assert_allclose(numeric, J[:, c], atol=1e-6)


def test_orthogonality_jacobian(rng):
    normals = normalize(rng.normal(size=(3, 3)))
    edges = [(0, 1), (1, 2)]
    lam = 4.0
    J = orthogonality_jacobian(normals, edges, lam)
    np.testing.assert_allclose(orthogonality_residuals(normals, edges, lam),
                               [2 * normals[0] @ normals[1], 2 * normals[1] @ normals[2]])
    h = 1e-6
    distances = [np.zeros(0)] * 3
    for c in range(6):
        step = np.zeros(6)
        step[c] = h
        n_p, _ = GraphRefiner.retract(normals, distances, step)
        n_m, _ = GraphRefiner.retract(normals, distances, -step)
        numeric = (orthogonality_residuals(n_p, edges, lam)
                   - orthogonality_residuals(n_m, edges, lam)) / (2 * h)
        np.testing.assert_allclose(numeric, J[:, c], atol=1e-6)


def perturbed_frame():
    return so3_exp(np.radians([1.5, -1.0, 2.0]))


def test_corner_refinement_recovers_exact_corner(corner_room):
    cloud, truth = corner_room
    init = Corner(perturbed_frame(), [0.01, -0.008, 0.005])
    support = select_corner_support(cloud, init, 0.15)
    refiner = CornerRefiner(support, init)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        corner = refiner.process()
    np.testing.assert_allclose(corner.position, truth.corners[0].position, atol=1e-4)
    np.testing.assert_allclose(np.abs(np.diag(corner.frame)), 1.0, atol=1e-6)
    assert refiner.cost_history[-1] < refiner.cost_history[0]
    assert all(b <= a for a, b in zip(refiner.cost_history, refiner.cost_history[1:]))


def test_initial_corner(corner_room):
    cloud, _ = corner_room
    planes = [Plane(normalize([1.0, 0.02, 0.0]), 0.01), Plane(EY, 0.0), Plane(EZ, -0.01)]
    corner, support = initial_corner(planes, cloud, 0.15)
    np.testing.assert_allclose(corner.frame @ corner.frame.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(corner.frame) == pytest.approx(1.0)
    assert np.all(np.linalg.norm(support.positions - corner.position, axis=1) < 0.2)
    refined = refine_corner(support, corner)
    np.testing.assert_allclose(refined.position, 0.0, atol=1e-4)


def test_corner_support_checks(corner_room):
    cloud, _ = corner_room
    far = Corner(np.eye(3), [-5.0, -5.0, -5.0])
    with pytest.raises(InsufficientSupport):
        CornerRefiner(select_corner_support(cloud, far, 0.15), far)

    walls, _ = generate_synthetic_scene(SyntheticSpec(
        Layout.TWO_WALLS, points_per_m2=2500, recompute_normals=False))
    corner = Corner(np.eye(3), np.zeros(3))
    with pytest.raises(InsufficientSupport):
        CornerRefiner(select_corner_support(walls, corner, 0.15), corner)


def test_assign_points_to_bundles():
    z = ParallelBundle(EZ, [-1.0, 0.0], [[1], [0]])
    x = ParallelBundle(EX, [0.0], [[2]])
    positions = [[0.5, 0.5, 0.1], [0.5, 0.5, 0.8], [0.05, 0.5, 0.5], [0.5, 0.5, 0.5]]
    normals = [EZ, -EZ, EX, normalize([1.0, 1.0, 0.0])]
    cloud = PointCloud(positions, normals)

    a = assign_points_to_bundles(cloud, [z, x], eps_n=30.0)
    np.testing.assert_array_equal(a.bundle, [0, 0, 1, -1])
    np.testing.assert_array_equal(a.index, [1, 0, 0, -1])
    np.testing.assert_allclose(a.residual[:3], [0.1, -0.2, 0.05])
    assert np.isnan(a.residual[3])

    everything = assign_points_to_bundles(cloud, [z, x], eps_n=90.0)
    assert np.all(everything.assigned)
    bare = assign_points_to_bundles(PointCloud(positions), [z, x])
    np.testing.assert_array_equal(bare.bundle, [0, 0, 1, 0])


def corner_bundles(tilt_deg=1.0, shift=0.01):
    tilt = so3_exp(np.radians([tilt_deg, -tilt_deg, 0.5 * tilt_deg]))
    edges = frozenset({(0, 1), (0, 2), (1, 2)})
    return [ParallelBundle(tilt @ axis, [shift * (k + 1)], [[k]], edges)
            for k, axis in enumerate(np.eye(3))]


def test_graph_refinement_recovers_exact_planes(corner_room):
    cloud, _ = corner_room
    refiner = GraphRefiner(cloud, corner_bundles(), RefinementParams(), ALL_POINTS)
    refined = refiner.process()
    assert len(refined) == 3
    for k, bundle in enumerate(refined):
        assert abs(bundle.normal[k]) == pytest.approx(1.0, abs=1e-8)
        np.testing.assert_allclose(bundle.distances, [0.0], atol=1e-5)
        assert bundle.members == [[k]]
    assert refiner.cost_history[-1] < refiner.cost_history[0]


def test_unconstrained_refinement_is_least_squares_fit():
    cloud, _ = generate_synthetic_scene(SyntheticSpec(
        Layout.SINGLE_PLANE, points_per_m2=2000, noise_sigma=0.005, seed=4,
        recompute_normals=False))
    tilt = so3_exp(np.radians([2.0, 1.0, 0.0]))
    init = ParallelBundle(tilt @ EZ, [0.01], [[0]])
    params = RefinementParams(eps_n=90.0, lam=0.0, robust=None,
                              convergence_tol=1e-12, max_iterations=100)
    (bundle,) = refine_graph(cloud, [init], params, ALL_POINTS)
    fit = Plane.fit(cloud.positions).aligned_with(bundle.normal)
    np.testing.assert_allclose(bundle.normal, fit.normal, atol=1e-6)
    assert bundle.distances[0] == pytest.approx(fit.offset, abs=1e-6)


def test_graph_refinement_needs_points(corner_room):
    cloud, _ = corner_room
    with pytest.raises(EmptyAssignment):
        refine_graph(cloud, [], RefinementParams(), ALL_POINTS)

    plane, _ = generate_synthetic_scene(SyntheticSpec(
        Layout.SINGLE_PLANE, points_per_m2=500, recompute_normals=False))
    wall = ParallelBundle(EX, [0.0], [[0]])
    with pytest.raises(EmptyAssignment):
        refine_graph(plane, [wall], RefinementParams(), ALL_POINTS)


def exhaustive_assignment(points, point_normals, bundles, eps_n):
    cos_eps = math.cos(math.radians(eps_n))
    out_b, out_l, out_r = [], [], []
    for x, n in zip(points, point_normals):
        best = (np.inf, -1, -1, np.nan)
        for k, bundle in enumerate(bundles):
            if abs(n @ bundle.normal) < cos_eps:
                continue
            for l, d in enumerate(bundle.distances):
                r = float(bundle.normal @ x + d)
                if abs(r) < best[0]:
                    best = (abs(r), k, l, r)
        out_b.append(best[1])
        out_l.append(best[2])
        out_r.append(best[3])
    return np.array(out_b), np.array(out_l), np.array(out_r)


@given(st.integers(0, 2**32 - 1), st.sampled_from([20.0, 30.0, 60.0]))
def test_assignment_matches_exhaustive_search(seed, eps_n):
    rng = np.random.default_rng(seed)
    bundles = [ParallelBundle(normalize(rng.normal(size=3)),
                              np.sort(rng.uniform(-2.0, 2.0, size=rng.integers(1, 4))))
               for _ in range(rng.integers(1, 4))]
    points = rng.uniform(-2.0, 2.0, size=(40, 3))
    point_normals = normalize(rng.normal(size=(40, 3)))
    a = assign_points_to_bundles(PointCloud(points, point_normals), bundles, eps_n)
    b, l, r = exhaustive_assignment(points, point_normals, bundles, eps_n)
    np.testing.assert_array_equal(a.bundle, b)
    np.testing.assert_array_equal(a.index, l)
    np.testing.assert_allclose(a.residual, r, atol=1e-12)


def test_default_refinement_of_noiseless_walls():
    cloud, truth = generate_synthetic_scene(SyntheticSpec(
        Layout.TWO_WALLS, points_per_m2=2500, seed=5))
    tilt_a = so3_exp(np.radians(5.0) * normalize([0.0, 1.0, 1.0]))
    tilt_b = so3_exp(np.radians(5.0) * normalize([1.0, 0.0, -1.0]))
    edges = frozenset({(0, 1)})
    bundles = [ParallelBundle(tilt_a @ EX, [0.02], [[0]], edges),
               ParallelBundle(tilt_b @ EY, [-0.02], [[1]], edges)]
    a, b = refine_graph(cloud, bundles)
    assert abs(a.normal @ b.normal) < 1e-8
    for bundle, plane in zip((a, b), truth.planes):
        angle = math.acos(min(abs(float(bundle.normal @ plane.normal)), 1.0))
        assert angle < 1e-6
        np.testing.assert_allclose(bundle.distances, [0.0], atol=1e-6)


def box_room(sigma, density, seed):
    """Floor z=0, ceiling z=2.5 and walls x=0, y=0 over a 2 m square."""
    rng = np.random.default_rng(seed)
    faces = [(EZ, 0.0, EX, EY, 2.0, 2.0), (EZ, 2.5, EX, EY, 2.0, 2.0),
             (EX, 0.0, EY, EZ, 2.0, 2.5), (EY, 0.0, EX, EZ, 2.0, 2.5)]
    positions, normals = [], []
    for n, height, u, v, a, b in faces:
        count = int(density * a * b)
        uv = rng.uniform(0.0, 1.0, size=(count, 2)) * [a, b]
        x = height * n + uv[:, :1] * u + uv[:, 1:] * v
        positions.append(x + rng.normal(0.0, sigma, size=(count, 1)) * n)
        normals.append(np.tile(n, (count, 1)) * rng.choice([-1.0, 1.0], size=(count, 1)))
    return PointCloud(np.vstack(positions), np.vstack(normals))


def test_floor_and_ceiling_share_a_bundle():
    cloud = box_room(0.003, 1500, seed=6)
    tilt = so3_exp(np.radians([1.5, -1.0, 0.5]))
    edges = frozenset({(0, 1), (0, 2), (1, 2)})
    bundles = [ParallelBundle(tilt @ EZ, [-2.49, 0.01], [[1], [0]], edges),
               ParallelBundle(tilt @ EX, [0.01], [[2]], edges),
               ParallelBundle(tilt @ EY, [-0.01], [[3]], edges)]
    refined = refine_graph(cloud, bundles)
    for i, j in edges:
        assert abs(refined[i].normal @ refined[j].normal) < 1e-4
    for bundle, axis, expected in zip(refined, (EZ, EX, EY),
                                      ([-2.5, 0.0], [0.0], [0.0])):
        assert bundle.normal @ axis > 0.9999
        np.testing.assert_allclose(bundle.distances, expected, atol=2e-3)
    assert refined[0].members == [[1], [0]]


# 8 points per voxel at 14000 points/m^2; voxel faces stay 12 mm off the box faces
EIGHTFOLD = SamplingParams(d_min=1.0 / 41.5)


def box_corner_error(seed, sampling=None):
    cloud, truth = generate_synthetic_scene(SyntheticSpec(
        Layout.BOX, points_per_m2=14000, noise_sigma=0.005, seed=seed,
        recompute_normals=False))
    corner = max(truth.corners, key=lambda c: float(np.sum(c.position)))
    cloud = select_corner_support(cloud, corner, 0.4)
    if sampling is not None:
        cloud = downsample(cloud, sampling)
    init = Corner.from_position(corner.frame, corner.position + [0.01, -0.008, 0.005])
    support = select_corner_support(cloud, init, 0.3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        refined = refine_corner(support, init)
    return float(np.linalg.norm(refined.position - corner.position)), len(support)


def test_corner_accuracy_barely_depends_on_density():
    dense = [box_corner_error(seed) for seed in range(20)]
    sparse = [box_corner_error(seed, EIGHTFOLD) for seed in range(20)]
    reduction = np.median([n for _, n in dense]) / np.median([n for _, n in sparse])
    assert 6.0 < reduction < 11.0
    dense_error = np.median([e for e, _ in dense])
    sparse_error = np.median([e for e, _ in sparse])
    assert dense_error < 1e-3
    assert 0.5 < sparse_error / dense_error < 2.0
