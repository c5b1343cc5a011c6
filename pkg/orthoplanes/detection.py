#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Segmentation-free detection of orthogonal plane pairs by local Hough voting.
# Every sampled reference point owns a private (theta, rho) accumulator, fed by
# point pairs inside a tau_d neighbourhood; the winning bin describes the plane
# orthogonal to the reference plane.
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

from dataclasses import dataclass, field
from multiprocessing.dummy import Pool as ThreadPool
from typing import List, Optional, Sequence, Tuple

import numpy as np

from scipy.spatial import cKDTree

from orthoplanes.generic import EmptyCloud, MissingNormals, canonical_sign
from orthoplanes.geometry import (DetectionParams, Line3D, OrientedPoint,
                                  PairClass, Plane, PointCloud,
                                  classify_pairs, compute_ppf_batch,
                                  intersect_two_planes, shortest_arc_rotation)

logger = logging.getLogger(__name__)

E_Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class LocalFrame:
    """Reference point with canonical normal and the rotation R_z n1 = e_z."""
    reference: OrientedPoint
    rot_to_z: np.ndarray

    @classmethod
    def from_point(cls, position, normal) -> "LocalFrame":
        n1 = np.asarray(normal, dtype=np.float64)
        n1 = canonical_sign(n1) * n1 / np.linalg.norm(n1)
        return cls(OrientedPoint(position, n1), shortest_arc_rotation(n1, E_Z))

    def in_plane_normal(self, theta_deg: float) -> np.ndarray:
        """Unit vector in the reference plane at angle theta about n1."""
        t = math.radians(theta_deg)
        return self.rot_to_z.T @ np.array([math.cos(t), math.sin(t), 0.0])


@dataclass
class Accumulator2D:
    """
    Voting table over theta in [0, 360) deg x rho in [0, tau_d). Votes are
    stored with rho >= 0; (theta, rho) and (theta + 180, -rho) are the same
    plane, so negative rho is folded before voting.
    """
    theta_bin: float
    rho_bin: float
    bins: np.ndarray
    coplanar_count: int = 0

    @classmethod
    def empty(cls, params: DetectionParams) -> "Accumulator2D":
        n_theta = int(math.ceil(360.0 / params.theta_bin - 1e-9))
        n_rho = int(math.ceil(params.tau_d / params.rho_bin - 1e-9))
        return cls(params.theta_bin, params.rho_bin,
                   np.zeros((n_theta, n_rho), dtype=np.int64))

    def bin_index(self, theta_deg, rho) -> Tuple[np.ndarray, np.ndarray]:
        n_theta, n_rho = self.bins.shape
        i = np.clip(np.floor(np.asarray(theta_deg) / self.theta_bin).astype(np.int64),
                    0, n_theta - 1)
        j = np.clip(np.floor(np.asarray(rho) / self.rho_bin).astype(np.int64),
                    0, n_rho - 1)
        return i, j

    def vote(self, theta_deg, rho):
        i, j = self.bin_index(theta_deg, rho)
        np.add.at(self.bins, (i, j), 1)

    def argmax(self) -> Tuple[int, int, int]:
        """(theta index, rho index, votes); ties go to the lowest index."""
        flat = int(np.argmax(self.bins))
        i, j = np.unravel_index(flat, self.bins.shape)
        return int(i), int(j), int(self.bins[i, j])

    def theta_center(self, i: int) -> float:
        return min((i + 0.5) * self.theta_bin, 360.0)

    def rho_center(self, j: int) -> float:
        return (j + 0.5) * self.rho_bin


@dataclass(frozen=True, eq=False)
class OppCandidate:
    plane_ref: Plane
    plane_other: Plane
    votes: int
    reference_index: int
    reference_point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bin: Tuple[int, int] = (0, 0)
    coplanar_count: int = 0

    def line(self) -> Line3D:
        return intersect_two_planes(self.plane_ref, self.plane_other)

    def anchors(self) -> Tuple[np.ndarray, np.ndarray]:
        """Reference point and its foot point on the orthogonal plane."""
        x1 = np.asarray(self.reference_point, dtype=np.float64)
        return x1, self.plane_other.project(x1)


def fold_votes(theta_rad, rho) -> Tuple[np.ndarray, np.ndarray]:
    """Map (theta, rho) to the representative with rho >= 0, theta in degrees."""
    theta = np.degrees(np.asarray(theta_rad, dtype=np.float64))
    rho = np.asarray(rho, dtype=np.float64)
    flip = rho < 0
    theta = np.where(flip, theta + 180.0, theta)
    rho = np.abs(rho)
    theta = np.mod(theta, 360.0)
    theta = np.where(rho == 0.0, np.mod(theta, 180.0), theta)
    # mod can return 360.0 for tiny negative inputs
    theta = np.where(theta >= 360.0, 0.0, theta)
    return theta, rho


def sample_reference_points(cloud: PointCloud, params: DetectionParams,
                            seed: int) -> np.ndarray:
    """min(N, |cloud|) distinct indices, ascending, reproducible per seed."""
    n = len(cloud)
    if n == 0:
        raise EmptyCloud("cannot sample reference points from an empty cloud")
    candidates = np.arange(n) if cloud.valid is None else np.flatnonzero(cloud.valid)
    if candidates.size == 0:
        raise EmptyCloud("no valid points to sample reference points from")
    count = min(int(params.n_refs), candidates.size)
    rng = np.random.default_rng(seed)
    picked = rng.choice(candidates.size, size=count, replace=False)
    return np.sort(candidates[picked])


def _neighbourhood(cloud: PointCloud, ref_index: int, params: DetectionParams,
                   seed: int, tree: Optional[cKDTree],
                   neighbours: Optional[Sequence[int]]) -> np.ndarray:
    if neighbours is None:
        if tree is None:
            tree = cKDTree(cloud.positions)
        neighbours = tree.query_ball_point(cloud.positions[ref_index], params.tau_d)
    idx = np.asarray(sorted(neighbours), dtype=np.int64)
    idx = idx[idx != ref_index]
    if cloud.valid is not None:
        idx = idx[cloud.valid[idx]]
    if idx.size > params.k_pairs:
        rng = np.random.default_rng((int(seed), int(ref_index)))
        idx = np.sort(rng.choice(idx, size=int(params.k_pairs), replace=False))
    return idx


def local_accumulator(cloud: PointCloud, ref_index: int, params: DetectionParams,
                      seed: int, tree: Optional[cKDTree] = None,
                      neighbours: Optional[Sequence[int]] = None
                      ) -> Tuple[Optional[LocalFrame], Accumulator2D]:
    """
    Fill the accumulator of one reference point. The frame is None when the
    reference normal is unusable (the accumulator then stays empty).
    """
    if cloud.normals is None:
        raise MissingNormals("voting needs point normals; estimate them first")
    acc = Accumulator2D.empty(params)
    n1 = cloud.normals[ref_index]
    norm = np.linalg.norm(n1)
    if not np.isfinite(norm) or norm < 1e-9:
        return None, acc
    frame = LocalFrame.from_point(cloud.positions[ref_index], n1)
    idx = _neighbourhood(cloud, ref_index, params, seed, tree, neighbours)
    if idx.size == 0:
        return frame, acc

    x1, n1 = frame.reference.position, frame.reference.normal
    x2, n2 = cloud.positions[idx], cloud.normals[idx]
    f = compute_ppf_batch(x1, n1, x2, n2)
    kind = classify_pairs(f, params)

    acc.coplanar_count = int(np.count_nonzero(kind == PairClass.COPLANAR.value))
    orth = kind == PairClass.ORTHOGONAL.value
    if np.any(orth):
        local = n2[orth] @ frame.rot_to_z.T
        theta, rho = fold_votes(np.arctan2(local[:, 1], local[:, 0]), f[orth, 2])
        acc.vote(theta, rho)
    return frame, acc


def vote_local(cloud: PointCloud, ref_index: int, params: DetectionParams,
               seed: int, tree: Optional[cKDTree] = None,
               neighbours: Optional[Sequence[int]] = None) -> Optional[OppCandidate]:
    """
    Most likely orthogonal plane pair through one reference point, or None
    when the winning bin or the coplanar tally does not exceed c_max.
    """
    frame, acc = local_accumulator(cloud, ref_index, params, seed, tree, neighbours)
    if frame is None:
        return None
    i, j, votes = acc.argmax()
    if votes <= params.c_max or acc.coplanar_count <= params.c_max:
        return None

    x1, n1 = frame.reference.position, frame.reference.normal
    m = frame.in_plane_normal(acc.theta_center(i))
    plane_other = Plane(m, -float(m @ x1) + acc.rho_center(j)).canonical()
    plane_ref = Plane(n1, -float(n1 @ x1)).canonical()
    return OppCandidate(plane_ref, plane_other, votes, int(ref_index),
                        np.array(x1), (i, j), acc.coplanar_count)


def detect_opps(cloud: PointCloud, params: DetectionParams, seed: int,
                workers: int = 1) -> List[OppCandidate]:
    """
    Orthogonal plane pair candidates of all sampled reference points, in
    ascending reference index. With workers > 1 the references are voted on
    a thread pool; the result is identical to the serial run.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot detect planes in an empty cloud")
    if cloud.normals is None:
        raise MissingNormals("voting needs point normals; estimate them first")

    refs = sample_reference_points(cloud, params, seed)
    tree = cKDTree(cloud.positions)
    hoods = tree.query_ball_point(cloud.positions[refs], params.tau_d,
                                  workers=max(int(workers), 1))

    def one(k):
        return vote_local(cloud, int(refs[k]), params, seed, tree, hoods[k])

    if workers > 1:
        pool = ThreadPool(int(workers))
        results = pool.map(one, range(len(refs)))
        pool.close()
        pool.join()
    else:
        results = [one(k) for k in range(len(refs))]

    candidates = [c for c in results if c is not None]
    logger.info("voting: %d of %d reference points produced a plane pair",
                len(candidates), len(refs))
    return candidates
