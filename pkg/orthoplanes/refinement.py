#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Constrained least-squares refinement of corners (rotation + offsets on
# SO(3) x R^3) and of whole plane graphs (bundle normals on S^2 with sorted
# parallel distances, orthogonality regularizer, optional Huber loss).
#
#
# (C) Copyright the orthoplanes contributors
#
#     This program is free software: you can redistribute it and/or modify
#     it under the terms of the GNU General Public License as published by
#     the Free Software Foundation, either version 3 of the License, or
#     (at your option) any later version.
#
#     This program is distributed in the hope that it will be useful,
#     but WITHOUT ANY WARRANTY; without even the implied warranty of
#     MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#     GNU General Public License for more details.
#
#     You should have received a copy of the GNU General Public License
#     along with this program.  If not, see <http://www.gnu.org/licenses/>.
#
#===============================================================================
from __future__ import annotations

import logging
import math
import warnings

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from orthoplanes.generic import (DidNotConverge, EmptyAssignment,
                                 InsufficientSupport, OrthogonalityViolation,
                                 Singular, normalize, so3_exp, tangent_basis)
from orthoplanes.geometry import Corner, Plane, PointCloud
from orthoplanes.relation_graph import ParallelBundle
from orthoplanes.scene_io import SamplingParams, build_hierarchy

logger = logging.getLogger(__name__)

ORTHOGONALITY_BOUND = 1e-4
MIN_CORNER_SUPPORT = 6
MIN_POINTS_PER_PLANE = 3

# Levenberg-Marquardt damping schedule
MU_START = 1e-4
MU_MAX = 1e12


@dataclass(frozen=True)
class RefinementParams:
    """Angles in degrees, lengths in meters."""
    epsilon: float = 0.15
    lam: float = 1e4
    eps_n: float = 30.0
    robust: Optional[str] = "huber"
    robust_scale: float = 0.02
    max_iterations: int = 50
    convergence_tol: float = 1e-8
    hierarchy_levels: int = 3

    def __post_init__(self):
        for name in ("epsilon", "eps_n", "robust_scale", "max_iterations",
                     "convergence_tol", "hierarchy_levels"):
            if not getattr(self, name) > 0:
                raise ValueError("{} must be positive".format(name))
        if self.lam < 0:
            raise ValueError("lam must not be negative")
        if self.robust not in (None, "huber"):
            raise ValueError("unknown robust loss {!r}".format(self.robust))

    @property
    def loss(self) -> "RobustLoss":
        return RobustLoss(self.robust, self.robust_scale)


@dataclass(frozen=True)
class RobustLoss:
    """
    kind None: r^2. kind "huber": r^2 inside the scale, 2 s |r| - s^2 beyond.
    weight() gives the IRLS weights so that d rho / dr = 2 w r.
    """
    kind: Optional[str] = None
    scale: float = 0.02

    def __post_init__(self):
        if self.kind == "huber" and not self.scale > 0:
            raise ValueError("Huber scale must be positive")

    def rho(self, r) -> np.ndarray:
        r = np.abs(np.asarray(r, dtype=np.float64))
        if self.kind is None:
            return r**2
        s = self.scale
        return np.where(r <= s, r**2, 2.0 * s * r - s**2)

    def weight(self, r) -> np.ndarray:
        r = np.abs(np.asarray(r, dtype=np.float64))
        if self.kind is None:
            return np.ones_like(r)
        return np.where(r <= self.scale, 1.0, self.scale / np.maximum(r, 1e-300))


# === ROTATIONS ================================================================

def project_to_rotation(m) -> np.ndarray:
    """
    Nearest rotation in Frobenius norm (U V^T of the SVD). A reflection is
    resolved by swapping rows 2 and 3 of the input and projecting again.
    """
    m = np.asarray(m, dtype=np.float64).reshape(3, 3)
    U, S, Vt = np.linalg.svd(m)
    if S[-1] < 1e-9:
        raise Singular("matrix with singular value {:.3g} has no nearest "
                       "rotation".format(S[-1]))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U, S, Vt = np.linalg.svd(m[[0, 2, 1]])
        R = U @ Vt
    return R


# === CORNERS ==================================================================

def select_corner_support(cloud: PointCloud, corner: Corner,
                          epsilon: float) -> PointCloud:
    """Points strictly inside the epsilon ball around the corner."""
    if len(cloud) == 0:
        return cloud
    dist = np.linalg.norm(cloud.positions - corner.position, axis=1)
    return cloud.subset(dist < epsilon)


def corner_assignment(frame, offsets, points) -> np.ndarray:
    """Index of the closest of the three planes for every point."""
    s = as_array(points) @ np.asarray(frame).T + np.asarray(offsets)
    return np.argmin(np.abs(s), axis=1)


def as_array(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def corner_residuals(frame, offsets, points, planes=None) -> np.ndarray:
    """(R x + d)_k per point; k is the closest plane unless given."""
    points = as_array(points)
    s = points @ np.asarray(frame).T + np.asarray(offsets)
    if planes is None:
        planes = np.argmin(np.abs(s), axis=1)
    return s[np.arange(points.shape[0]), planes]


def corner_jacobian(frame, offsets, points, planes) -> np.ndarray:
    """
    Derivative of corner_residuals for the update R <- R exp([w]x),
    d <- d + delta: columns (w, delta).
    """
    points = as_array(points)
    rows = np.asarray(frame)[planes]
    J = np.zeros((points.shape[0], 6))
    J[:, :3] = np.cross(points, rows)
    J[np.arange(points.shape[0]), 3 + np.asarray(planes)] = 1.0
    return J


def corner_energy(frame, offsets, points) -> float:
    r = corner_residuals(frame, offsets, points)
    return float(np.sum(r**2))


class CornerRefiner(object):
    """
    Minimize sum_i min_k (R x_i + d)_k^2 over a frozen support set.

    refiner = CornerRefiner(support, init_corner, RefinementParams())
    corner = refiner.process()
    refiner.cost_history, refiner.converged
    """

    def __init__(self, support: PointCloud, init: Corner,
                 params: Optional[RefinementParams] = None):
        self.support = support
        self.init = init
        self.params = params or RefinementParams()
        self.cost_history: List[float] = []
        self.iterations = 0
        self.converged = False
        self.check_support()

    def check_support(self):
        n = len(self.support)
        if n < MIN_CORNER_SUPPORT:
            raise InsufficientSupport(
                "corner support has {} points, at least {} needed".format(
                    n, MIN_CORNER_SUPPORT))
        points = self.support.positions
        s = points @ self.init.frame.T + self.init.offsets
        k = np.argmin(np.abs(s), axis=1)
        near = np.abs(s[np.arange(n), k]) < self.params.epsilon / 2.0
        counts = np.bincount(k[near], minlength=3)
        if np.any(counts < MIN_POINTS_PER_PLANE):
            raise InsufficientSupport(
                "corner planes carry {} support points; each needs {}".format(
                    counts.tolist(), MIN_POINTS_PER_PLANE))

    def process(self) -> Corner:
        points = self.support.positions
        R = np.array(self.init.frame)
        d = np.array(self.init.offsets)
        cost = corner_energy(R, d, points)
        self.cost_history = [cost]
        mu = MU_START
        self.converged = cost == 0.0

        while not self.converged and self.iterations < self.params.max_iterations:
            planes = corner_assignment(R, d, points)
            r = corner_residuals(R, d, points, planes)
            J = corner_jacobian(R, d, points, planes)
            H = J.T @ J
            g = J.T @ r

            accepted = False
            while mu < MU_MAX:
                A = H + mu * np.diag(np.diag(H) + 1e-12)
                step = np.linalg.solve(A, -g)
                R_trial = project_to_rotation(R @ so3_exp(step[:3]))
                d_trial = d + step[3:]
                trial = corner_energy(R_trial, d_trial, points)
                if trial < cost:
                    accepted = True
                    mu = max(mu / 3.0, 1e-12)
                    break
                mu *= 4.0

            if not accepted:
                # no descent direction left: stationary point
                self.converged = True
                break

            self.iterations += 1
            decrease = (cost - trial) / cost
            R, d, cost = R_trial, d_trial, trial
            self.cost_history.append(cost)
            logger.debug("corner iteration %d: cost %.6e", self.iterations, cost)
            if decrease < self.params.convergence_tol or cost == 0.0:
                self.converged = True

        if not self.converged:
            warnings.warn("corner refinement stopped after {} iterations".format(
                self.iterations), DidNotConverge)
        return Corner(R, d)


def refine_corner(support: PointCloud, init: Corner,
                  params: Optional[RefinementParams] = None) -> Corner:
    return CornerRefiner(support, init, params).process()


def initial_corner(planes: Sequence[Plane], cloud: PointCloud,
                   epsilon: float) -> Tuple[Corner, PointCloud]:
    """
    Corner frame from three (roughly orthogonal) planes: normals stacked and
    projected onto SO(3), offsets re-estimated as per-plane medians of
    -n_k.x over the support. Returns the corner and its frozen support.
    """
    normals = np.array([p.normal for p in planes])
    offsets = np.array([p.offset for p in planes])
    try:
        position = np.linalg.solve(normals, -offsets)
    except np.linalg.LinAlgError:
        raise Singular("corner planes do not meet in a point")
    frame = project_to_rotation(normals)
    start = Corner.from_position(frame, position)
    support = select_corner_support(cloud, start, epsilon)
    if len(support) == 0:
        return start, support

    points = support.positions
    k = corner_assignment(start.frame, start.offsets, points)
    d = np.array(start.offsets)
    for plane in range(3):
        mine = points[k == plane]
        if mine.shape[0]:
            d[plane] = float(np.median(-mine @ frame[plane]))
    return Corner(frame, d), support


# === GRAPH REFINEMENT =========================================================

@dataclass
class BundleAssignment:
    """Per point (bundle k, distance index l) or (-1, -1); residual n_k.x + d_kl."""
    bundle: np.ndarray
    index: np.ndarray
    residual: np.ndarray

    @property
    def assigned(self) -> np.ndarray:
        return self.bundle >= 0

    def __len__(self):
        return self.bundle.size


def _assign(points, point_normals, normals, distances, eps_n) -> BundleAssignment:
    n_points = points.shape[0]
    best_b = np.full(n_points, -1, dtype=np.int64)
    best_l = np.full(n_points, -1, dtype=np.int64)
    best_r = np.full(n_points, np.inf)
    all_eligible = point_normals is None or eps_n >= 90.0
    cos_eps = math.cos(math.radians(min(eps_n, 90.0)))

    for k, (n, d) in enumerate(zip(normals, distances)):
        d = np.asarray(d, dtype=np.float64)
        if d.size == 0:
            continue
        order = np.argsort(d, kind="stable")
        sd = d[order]
        s = points @ n
        pos = np.searchsorted(sd, -s)
        lo = np.clip(pos - 1, 0, sd.size - 1)
        hi = np.clip(pos, 0, sd.size - 1)
        r_lo = s + sd[lo]
        r_hi = s + sd[hi]
        take_hi = np.abs(r_hi) < np.abs(r_lo)
        l = np.where(take_hi, hi, lo)
        r = np.where(take_hi, r_hi, r_lo)

        better = np.abs(r) < np.abs(best_r)
        if not all_eligible:
            better &= np.abs(point_normals @ n) >= cos_eps
        best_b[better] = k
        best_l[better] = order[l[better]]
        best_r[better] = r[better]

    best_r[best_b < 0] = np.nan
    return BundleAssignment(best_b, best_l, best_r)


def assign_points_to_bundles(cloud: PointCloud, bundles: Sequence[ParallelBundle],
                             eps_n: float = 30.0) -> BundleAssignment:
    """
    Closest (bundle, distance) per point among the bundles whose normal
    agrees with the point normal within eps_n [deg], sign-insensitive.
    Clouds without normals consider every bundle.
    """
    normals = [b.normal for b in bundles]
    distances = [b.distances for b in bundles]
    out = _assign(cloud.positions, cloud.normals, normals, distances, eps_n)
    if cloud.valid is not None:
        out.bundle[~cloud.valid] = -1
        out.index[~cloud.valid] = -1
        out.residual[~cloud.valid] = np.nan
    return out


def _layout(distances: Sequence[np.ndarray]) -> Tuple[int, np.ndarray]:
    """Number of parameters and first distance column per bundle."""
    K = len(distances)
    sizes = np.array([len(d) for d in distances], dtype=np.int64)
    starts = 2 * K + np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)
    return int(2 * K + sizes.sum()), starts


def bundle_residuals(normals, distances, points, bundle, index) -> np.ndarray:
    """n_k.x + d_kl for points with a fixed assignment."""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    points = as_array(points)
    d = np.array([distances[k][l] for k, l in zip(bundle, index)], dtype=np.float64)
    return np.einsum("ij,ij->i", points, normals[bundle]) + d


def bundle_jacobian(normals, distances, points, bundle, index) -> np.ndarray:
    """
    Jacobian of bundle_residuals for n_k <- normalize(n_k + B_k delta_k),
    d_kl <- d_kl + e_kl. Columns: 2 tangent coordinates per bundle, then all
    distances bundle by bundle.
    """
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    points = as_array(points)
    bundle = np.asarray(bundle, dtype=np.int64)
    index = np.asarray(index, dtype=np.int64)
    size, starts = _layout(distances)
    J = np.zeros((points.shape[0], size))
    rows = np.arange(points.shape[0])
    for k, n in enumerate(normals):
        mine = bundle == k
        if np.any(mine):
            J[np.ix_(rows[mine], [2 * k, 2 * k + 1])] = points[mine] @ tangent_basis(n)
    J[rows, starts[bundle] + index] = 1.0
    return J


def orthogonality_residuals(normals, edges, lam: float) -> np.ndarray:
    """sqrt(lam) n_k.n_k' per edge; their squares sum to the regularizer."""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    root = math.sqrt(lam)
    return np.array([root * normals[k] @ normals[m] for k, m in edges])


def orthogonality_jacobian(normals, edges, lam: float, size: Optional[int] = None) -> np.ndarray:
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    size = 2 * normals.shape[0] if size is None else size
    root = math.sqrt(lam)
    J = np.zeros((len(edges), size))
    for row, (k, m) in enumerate(edges):
        J[row, 2 * k:2 * k + 2] = root * tangent_basis(normals[k]).T @ normals[m]
        J[row, 2 * m:2 * m + 2] = root * tangent_basis(normals[m]).T @ normals[k]
    return J


def _rebuild_bundle(template: ParallelBundle, normal, distances) -> ParallelBundle:
    distances = np.asarray(distances, dtype=np.float64)
    order = np.argsort(distances, kind="stable")
    values, members = [], []
    for i in order:
        if values and distances[i] <= values[-1]:
            members[-1] = sorted(members[-1] + list(template.members[i]))
            continue
        values.append(float(distances[i]))
        members.append(list(template.members[i]))
    return ParallelBundle(normal, values, members, template.member_edges)


class GraphRefiner(object):
    """
    Joint refinement of all bundles: robust point-to-plane energy with the
    closest-plane assignment plus lam * sum over edges of (n_k.n_k')^2,
    solved coarse to fine over a hierarchy of downsampled clouds and finished
    on the full-resolution cloud.
    """

    def __init__(self, cloud: PointCloud, bundles: Sequence[ParallelBundle],
                 params: Optional[RefinementParams] = None,
                 sampling: Optional[SamplingParams] = None):
        self.cloud = cloud
        self.bundles = list(bundles)
        self.params = params or RefinementParams()
        self.sampling = sampling or SamplingParams(
            hierarchy_levels=int(self.params.hierarchy_levels))
        self.loss = self.params.loss
        edges = set()
        for b in self.bundles:
            edges |= set(b.member_edges)
        self.edges = sorted(edges)
        self.cost_history: List[float] = []
        self.iterations = 0
        self.converged = False

    def energy(self, points, point_normals, normals, distances):
        a = _assign(points, point_normals, normals, distances, self.params.eps_n)
        mask = a.assigned
        e = float(np.sum(self.loss.rho(a.residual[mask])))
        if self.params.lam > 0 and self.edges:
            e += float(np.sum(orthogonality_residuals(normals, self.edges,
                                                     self.params.lam)**2))
        return e, a

    @staticmethod
    def retract(normals, distances, step):
        K = len(normals)
        _, starts = _layout(distances)
        new_normals = np.array([normalize(n + tangent_basis(n) @ step[2 * k:2 * k + 2])
                                for k, n in enumerate(normals)]).reshape(K, 3)
        new_distances = [np.asarray(d) + step[s:s + len(d)]
                         for d, s in zip(distances, starts)]
        return new_normals, new_distances

    def solve_level(self, cloud: PointCloud, normals, distances):
        points, point_normals = cloud.positions, cloud.normals
        size, _ = _layout(distances)
        cost, a = self.energy(points, point_normals, normals, distances)
        self.cost_history.append(cost)
        mu = MU_START
        converged = cost == 0.0
        iterations = 0

        while not converged and iterations < self.params.max_iterations:
            mask = a.assigned
            b, l = a.bundle[mask], a.index[mask]
            r = a.residual[mask]
            J = bundle_jacobian(normals, distances, points[mask], b, l)
            w = self.loss.weight(r)
            H = J.T @ (w[:, None] * J)
            g = J.T @ (w * r)
            if self.params.lam > 0 and self.edges:
                Jo = orthogonality_jacobian(normals, self.edges, self.params.lam, size)
                ro = orthogonality_residuals(normals, self.edges, self.params.lam)
                H += Jo.T @ Jo
                g += Jo.T @ ro

            accepted = False
            while mu < MU_MAX:
                A = H + mu * np.diag(np.diag(H) + 1e-12)
                try:
                    step = np.linalg.solve(A, -g)
                except np.linalg.LinAlgError:
                    mu *= 10.0
                    continue
                n_trial, d_trial = self.retract(normals, distances, step)
                trial, a_trial = self.energy(points, point_normals, n_trial, d_trial)
                if trial < cost:
                    accepted = True
                    mu = max(mu / 3.0, 1e-12)
                    break
                mu *= 4.0

            if not accepted:
                converged = True
                break

            iterations += 1
            decrease = (cost - trial) / cost
            normals, distances, cost, a = n_trial, d_trial, trial, a_trial
            self.cost_history.append(cost)
            logger.debug("graph iteration %d: energy %.6e, %d points assigned",
                         iterations, cost, int(np.count_nonzero(a.assigned)))
            if decrease < self.params.convergence_tol or cost == 0.0:
                converged = True

        self.iterations += iterations
        return normals, distances, converged

    def process(self) -> List[ParallelBundle]:
        if not self.bundles:
            raise EmptyAssignment("no bundles to refine")
        levels = build_hierarchy(self.cloud, self.sampling)
        full = self.cloud.usable()
        if len(full) > len(levels[-1]):
            levels.append(full)
        normals = np.array([b.normal for b in self.bundles])
        distances = [np.array(b.distances) for b in self.bundles]

        finest = levels[-1]
        a = _assign(finest.positions, finest.normals, normals, distances,
                    self.params.eps_n)
        if not np.any(a.assigned):
            raise EmptyAssignment("no point matches any bundle")

        self.converged = False
        for level, cloud in enumerate(levels):
            covered = _assign(cloud.positions, cloud.normals, normals, distances,
                              self.params.eps_n)
            if not np.any(covered.assigned):
                logger.warning("hierarchy level %d: no assigned points, skipped", level)
                continue
            logger.info("refining on level %d of %d (%d points)",
                        level + 1, len(levels), len(cloud))
            normals, distances, self.converged = self.solve_level(cloud, normals,
                                                                  distances)

        if not self.converged:
            warnings.warn("graph refinement stopped after {} iterations".format(
                self.iterations), DidNotConverge)

        worst = max((abs(float(normals[k] @ normals[m])) for k, m in self.edges),
                    default=0.0)
        if worst >= ORTHOGONALITY_BOUND:
            warnings.warn("largest edge dot product after refinement is "
                          "{:.2e}".format(worst), OrthogonalityViolation)
        return [_rebuild_bundle(b, n, d)
                for b, n, d in zip(self.bundles, normals, distances)]


def refine_graph(cloud: PointCloud, bundles: Sequence[ParallelBundle],
                 params: Optional[RefinementParams] = None,
                 sampling: Optional[SamplingParams] = None) -> List[ParallelBundle]:
    return GraphRefiner(cloud, bundles, params, sampling).process()
