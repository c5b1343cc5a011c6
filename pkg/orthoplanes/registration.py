#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Corner-assisted registration of two point clouds: corner matching, closed
# form alignment from three or more corners and point-to-plane ICP with the
# degrees of freedom left open by one or two matched corners.
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

import enum
import itertools
import logging
import math

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from scipy.spatial import cKDTree

from orthoplanes.generic import (Collinear, EmptyCloud, MissingNormals,
                                 NoOverlap, TooFewCorners, as_points,
                                 normalize, rotation_angle, so3_exp)
from orthoplanes.geometry import Corner, PointCloud, shortest_arc_rotation

logger = logging.getLogger(__name__)

STEP_HALVINGS = 8


@dataclass(frozen=True, eq=False)
class RigidMotion:
    """x -> R x + t, mapping source coordinates into destination coordinates."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if (np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6
                or np.linalg.det(R) < 0):
            raise ValueError("rotation is not in SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidMotion":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidMotion") -> "RigidMotion":
        """self after other."""
        return RigidMotion(self.rotation @ other.rotation,
                           self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidMotion":
        return RigidMotion(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points) -> np.ndarray:
        return as_points(points) @ self.rotation.T + self.translation

    def apply_cloud(self, cloud: PointCloud) -> PointCloud:
        normals = None if cloud.normals is None else cloud.normals @ self.rotation.T
        return PointCloud(self.apply(cloud.positions), normals, cloud.valid)

    def apply_corner(self, corner: Corner) -> Corner:
        return corner.transformed(self.rotation, self.translation)


class ConstraintKind(enum.Enum):
    FULL_6DOF = "Full6DoF"
    ONE_CORNER_3DOF = "OneCorner3DoF"
    TWO_CORNER_1DOF = "TwoCorner1DoF"
    MULTI_CORNER_0DOF = "MultiCorner0DoF"


@dataclass(frozen=True)
class CornerMatch:
    src_index: int
    dst_index: int
    src: Corner
    dst: Corner


@dataclass
class ConstraintClass:
    """Kind of constrained problem and the (source, destination) corner positions used."""
    kind: ConstraintKind
    anchors: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def dof(self) -> int:
        return {ConstraintKind.FULL_6DOF: 6, ConstraintKind.ONE_CORNER_3DOF: 3,
                ConstraintKind.TWO_CORNER_1DOF: 1,
                ConstraintKind.MULTI_CORNER_0DOF: 0}[self.kind]


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 30
    correspondence_radius: float = 0.1
    convergence_tol: float = 1e-8
    collinearity_tol: float = 2.0
    min_overlap: float = 0.3
    workers: int = 1

    def __post_init__(self):
        for name in ("max_iterations", "correspondence_radius", "convergence_tol",
                     "collinearity_tol", "workers"):
            if not getattr(self, name) > 0:
                raise ValueError("{} must be positive".format(name))
        if not 0.0 <= self.min_overlap <= 1.0:
            raise ValueError("min_overlap must lie in [0, 1]")


# === CLOSED FORM ==============================================================

def is_collinear(points, collinearity_tol: float = 2.0) -> bool:
    """True when the points spread along one line within collinearity_tol [deg]."""
    points = as_points(points)
    if points.shape[0] < 3:
        return True
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    return bool(s[1] <= math.tan(math.radians(collinearity_tol)) * s[0])


def kabsch_align(src, dst, collinearity_tol: float = 2.0) -> RigidMotion:
    """Least-squares rigid motion with R src_k + t ~ dst_k, reflections excluded."""
    src, dst = as_points(src), as_points(dst)
    if src.shape != dst.shape:
        raise ValueError("src and dst need the same number of corners")
    if src.shape[0] < 3:
        raise TooFewCorners("closed form alignment needs 3 corners, got {}".format(
            src.shape[0]))
    if is_collinear(src, collinearity_tol) or is_collinear(dst, collinearity_tol):
        raise Collinear("corner positions lie on one line")

    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidMotion(R, mu_d - R @ mu_s)


# === MATCHING =================================================================

def frames_agree(a, b, angle_tol: float) -> bool:
    """Whether the axes of two frames coincide up to permutation and sign."""
    cos_tol = math.cos(math.radians(angle_tol))
    dots = np.abs(np.asarray(a) @ np.asarray(b).T)
    return any(all(dots[k, p[k]] > cos_tol for k in range(3))
               for p in itertools.permutations(range(3)))


def match_corners(src: Sequence[Corner], dst: Sequence[Corner],
                  coarse: Optional[RigidMotion] = None,
                  max_distance: float = 1.0,
                  angle_tol: float = 20.0) -> List[CornerMatch]:
    """
    Greedy matching by increasing corner distance (after the coarse motion);
    a pair is kept when both corners are unused and their frames agree.
    """
    moved = [coarse.apply_corner(c) if coarse is not None else c for c in src]
    pairs = []
    for i, a in enumerate(moved):
        for j, b in enumerate(dst):
            dist = float(np.linalg.norm(a.position - b.position))
            if dist <= max_distance:
                pairs.append((dist, i, j))
    pairs.sort()

    used_src, used_dst, matches = set(), set(), []
    for dist, i, j in pairs:
        if i in used_src or j in used_dst:
            continue
        if not frames_agree(moved[i].frame, dst[j].frame, angle_tol):
            continue
        used_src.add(i)
        used_dst.add(j)
        matches.append(CornerMatch(i, j, src[i], dst[j]))
    logger.info("corner matching: %d of %d/%d corners matched",
                len(matches), len(src), len(dst))
    return matches


# === CONSTRAINED ICP ==========================================================

def _axis_rotation(axis, angle: float) -> np.ndarray:
    return so3_exp(normalize(axis) * angle)


def _vee(m) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


class IcpSolver(object):
    """
    Point-to-plane ICP restricted to the motions compatible with the matched
    corners.

    solver = IcpSolver(src, dst, matches, IcpParams())
    motion = solver.process()
    solver.constraint.kind, solver.iterations, solver.cost_history
    """

    def __init__(self, src: PointCloud, dst: PointCloud,
                 matches: Sequence[CornerMatch] = (),
                 params: Optional[IcpParams] = None,
                 init: Optional[RigidMotion] = None):
        if len(src) == 0 or len(dst) == 0:
            raise EmptyCloud("registration needs two non-empty clouds")
        if dst.normals is None:
            raise MissingNormals("the destination cloud needs normals")
        self.src = src.usable()
        self.dst = dst.usable()
        self.matches = list(matches)
        self.params = params or IcpParams()
        self.init = init
        self.tree = cKDTree(self.dst.positions)
        self.constraint = self.classify()
        self.iterations = 0
        self.cost_history: List[float] = []
        self.converged = False

    def classify(self) -> ConstraintClass:
        anchors = [(m.src.position, m.dst.position) for m in self.matches]
        if len(anchors) >= 3:
            src = np.array([a for a, _ in anchors])
            if not is_collinear(src, self.params.collinearity_tol):
                return ConstraintClass(ConstraintKind.MULTI_CORNER_0DOF, anchors)
            # farthest pair spans the common line
            dist = np.linalg.norm(src[:, None] - src[None], axis=2)
            i, j = np.unravel_index(int(np.argmax(dist)), dist.shape)
            anchors = [anchors[min(i, j)], anchors[max(i, j)]]
        if len(anchors) == 2:
            return ConstraintClass(ConstraintKind.TWO_CORNER_1DOF, anchors)
        if len(anchors) == 1:
            return ConstraintClass(ConstraintKind.ONE_CORNER_3DOF, anchors)
        return ConstraintClass(ConstraintKind.FULL_6DOF, [])

    def correspond(self, motion: RigidMotion):
        """Moved source points, nearest destination index, matched mask."""
        y = motion.apply(self.src.positions)
        dist, j = self.tree.query(y, k=1,
                                  distance_upper_bound=self.params.correspondence_radius,
                                  workers=self.params.workers)
        return y, j, np.isfinite(dist)

    def cost(self, motion: RigidMotion) -> float:
        """Point-to-plane cost; points without a partner count radius^2."""
        y, j, mask = self.correspond(motion)
        r = np.einsum("ij,ij->i", y[mask] - self.dst.positions[j[mask]],
                      self.dst.normals[j[mask]])
        missing = np.count_nonzero(~mask)
        return float(np.sum(r**2) + missing * self.params.correspondence_radius**2)

    def overlap(self, motion: RigidMotion) -> float:
        _, _, mask = self.correspond(motion)
        return float(np.count_nonzero(mask)) / max(mask.size, 1)

    # --- parameterizations: each returns a start motion and a linearizer ---

    def _full(self):
        start = self.init or RigidMotion.identity()

        def linearize(motion, y, r, n):
            J = np.hstack((np.cross(y, n), n))
            step = _solve(J, r)

            def propose(s):
                E = so3_exp(s * step[:3])
                return RigidMotion(E @ motion.rotation,
                                   E @ motion.translation + s * step[3:])
            return propose
        return start, linearize

    def _one_corner(self):
        c_src, c_dst = self.constraint.anchors[0]
        R0 = self.init.rotation if self.init is not None else np.eye(3)

        def pinned(R):
            return RigidMotion(R, c_dst - R @ c_src)

        def linearize(motion, y, r, n):
            J = np.cross(y - c_dst, n)
            step = _solve(J, r)
            return lambda s: pinned(so3_exp(s * step) @ motion.rotation)
        return pinned(R0), linearize

    def _two_corner(self):
        (s1, d1), (s2, d2) = self.constraint.anchors
        a_src, a_dst = normalize(s2 - s1), normalize(d2 - d1)
        m_src, m_dst = (s1 + s2) / 2.0, (d1 + d2) / 2.0
        R0 = shortest_arc_rotation(a_src, a_dst)

        def about(alpha):
            R = _axis_rotation(a_dst, alpha) @ R0
            return RigidMotion(R, m_dst - R @ m_src)

        alpha0 = 0.0
        if self.init is not None:
            M = R0 @ self.init.rotation.T
            alpha0 = math.atan2(float(a_dst @ _vee(M.T - M)),
                                float(np.trace(M) - a_dst @ M @ a_dst))
        self.alpha = alpha0

        def linearize(motion, y, r, n):
            J = np.cross(y - m_dst, n) @ a_dst
            denom = float(J @ J)
            step = -float(J @ r) / denom if denom > 0 else 0.0
            alpha = self.alpha

            def propose(s):
                self._alpha_trial = alpha + s * step
                return about(self._alpha_trial)
            return propose
        return about(alpha0), linearize

    def process(self) -> RigidMotion:
        kind = self.constraint.kind
        logger.info("registration mode %s with %d matched corners",
                    kind.value, len(self.matches))

        if kind is ConstraintKind.MULTI_CORNER_0DOF:
            src = np.array([a for a, _ in self.constraint.anchors])
            dst = np.array([b for _, b in self.constraint.anchors])
            motion = kabsch_align(src, dst, self.params.collinearity_tol)
            self.cost_history = [self.cost(motion)]
            self.iterations = 0
            self.converged = True
            self._report(motion)
            return motion

        start, linearize = {ConstraintKind.FULL_6DOF: self._full,
                            ConstraintKind.ONE_CORNER_3DOF: self._one_corner,
                            ConstraintKind.TWO_CORNER_1DOF: self._two_corner}[kind]()
        motion = start
        cost = self.cost(motion)
        self.cost_history = [cost]

        for iteration in range(1, int(self.params.max_iterations) + 1):
            self.iterations = iteration
            y, j, mask = self.correspond(motion)
            if not np.any(mask):
                if kind is ConstraintKind.FULL_6DOF:
                    raise NoOverlap("no source point has a destination partner "
                                    "within {} m".format(self.params.correspondence_radius))
                logger.warning("no correspondences, keeping the corner-constrained pose")
                self.converged = True
                break
            n = self.dst.normals[j[mask]]
            r = np.einsum("ij,ij->i", y[mask] - self.dst.positions[j[mask]], n)
            propose = linearize(motion, y[mask], r, n)

            accepted, scale = False, 1.0
            for _ in range(STEP_HALVINGS):
                trial = propose(scale)
                trial_cost = self.cost(trial)
                if trial_cost < cost:
                    accepted = True
                    break
                scale /= 2.0
            if not accepted:
                self.converged = True
                break

            if kind is ConstraintKind.TWO_CORNER_1DOF:
                self.alpha = self._alpha_trial
            decrease = (cost - trial_cost) / cost
            motion, cost = trial, trial_cost
            self.cost_history.append(cost)
            logger.debug("icp iteration %d: cost %.6e", iteration, cost)
            if decrease < self.params.convergence_tol:
                self.converged = True
                break

        self._report(motion)
        return motion

    def _report(self, motion: RigidMotion):
        overlap = self.overlap(motion)
        if overlap < self.params.min_overlap:
            logger.warning("overlap after alignment is %.2f (below %.2f)",
                           overlap, self.params.min_overlap)
        else:
            logger.info("overlap after alignment: %.2f", overlap)


def _solve(J: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Gauss-Newton step -(J^T J)^-1 J^T r with a tiny ridge for flat directions."""
    J = J.reshape(r.size, -1)
    H = J.T @ J
    ridge = 1e-12 * max(float(np.trace(H)), 1e-300)
    return np.linalg.solve(H + ridge * np.eye(H.shape[0]), -(J.T @ r))


def constrained_icp(src: PointCloud, dst: PointCloud,
                    matches: Sequence[CornerMatch] = (),
                    params: Optional[IcpParams] = None,
                    init: Optional[RigidMotion] = None
                    ) -> Tuple[RigidMotion, ConstraintClass, int]:
    solver = IcpSolver(src, dst, matches, params, init)
    motion = solver.process()
    return motion, solver.constraint, solver.iterations


def compute_rpe(estimate: RigidMotion, ground_truth: RigidMotion) -> Tuple[float, float]:
    """Rotation error [deg] and translation error [m] of estimate against ground truth."""
    relative = ground_truth.inverse() @ estimate
    return (math.degrees(rotation_angle(relative.rotation)),
            float(np.linalg.norm(relative.translation)))


def overlap_fraction(src: PointCloud, dst: PointCloud, motion: RigidMotion,
                     radius: float) -> float:
    """Share of moved source points with a destination point within radius."""
    if len(src) == 0 or len(dst) == 0:
        return 0.0
    dist, _ = cKDTree(dst.positions).query(motion.apply(src.positions), k=1,
                                           distance_upper_bound=radius)
    return float(np.mean(np.isfinite(dist)))
