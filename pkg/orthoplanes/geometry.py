#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Geometric types and closed-form primitives: oriented points, planes, lines,
# corners, point pair features and plane intersections.
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

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from orthoplanes.generic import NearParallel, as_points, canonical_sign, normalize, skew

EPS_PARALLEL = 1e-6


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class OrientedPoint:
    position: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position))
        object.__setattr__(self, "normal", _frozen(self.normal))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """
    Unorganized point cloud backed by arrays. Normals may be missing (None)
    and need not be consistently oriented. `valid` optionally flags points
    that downstream stages may use.
    """
    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = as_points(self.positions)
        if not np.all(np.isfinite(pos)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "positions", _frozen(pos))
        if self.normals is not None:
            nrm = as_points(self.normals)
            if nrm.shape != pos.shape:
                raise ValueError("normals must match positions in shape")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.valid is not None:
            valid = np.array(self.valid, dtype=bool).reshape(-1)
            if valid.shape[0] != pos.shape[0]:
                raise ValueError("validity flags must match positions in length")
            valid.setflags(write=False)
            object.__setattr__(self, "valid", valid)

    @classmethod
    def from_points(cls, points: Sequence[OrientedPoint]) -> "PointCloud":
        points = list(points)
        if not points:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(np.array([p.position for p in points]),
                   np.array([p.normal for p in points]))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> OrientedPoint:
        normal = self.normals[i] if self.normals is not None else np.full(3, np.nan)
        return OrientedPoint(self.positions[i], normal)

    def __iter__(self) -> Iterator[OrientedPoint]:
        for i in range(len(self)):
            yield self[i]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, index) -> "PointCloud":
        """Cloud restricted to an index array or boolean mask."""
        index = np.asarray(index)
        return PointCloud(self.positions[index],
                          None if self.normals is None else self.normals[index],
                          None if self.valid is None else self.valid[index])

    def usable(self) -> "PointCloud":
        """Drop points flagged invalid."""
        if self.valid is None:
            return self
        return self.subset(self.valid)

    def bounding_box_diagonal(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.positions.max(0) - self.positions.min(0)))


@dataclass(frozen=True)
class Plane:
    """Plane n.x + d = 0; (n, d) and (-n, -d) are the same plane."""
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        object.__setattr__(self, "normal", _frozen(self.normal))
        object.__setattr__(self, "offset", float(self.offset))

    def __neg__(self) -> "Plane":
        return Plane(-self.normal, -self.offset)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Plane):
            return NotImplemented
        return (np.array_equal(self.normal, other.normal)
                and self.offset == other.offset)

    def __hash__(self):
        return hash((tuple(self.normal), self.offset))

    @classmethod
    def from_point_normal(cls, point, normal) -> "Plane":
        n = normalize(normal)
        return cls(n, -float(n @ np.asarray(point, dtype=np.float64)))

    @classmethod
    def fit(cls, points) -> "Plane":
        """Total least squares plane through points (smallest eigenvector)."""
        points = as_points(points)
        if points.shape[0] < 3:
            raise ValueError("a plane fit needs at least 3 points")
        centroid = points.mean(axis=0)
        centered = points - centroid
        _, vecs = np.linalg.eigh(centered.T @ centered)
        return cls.from_point_normal(centroid, vecs[:, 0]).canonical()

    def canonical(self) -> "Plane":
        return self if canonical_sign(self.normal) > 0 else -self

    def aligned_with(self, direction) -> "Plane":
        """Representation whose normal has non-negative dot with direction."""
        return self if self.normal @ np.asarray(direction) >= 0 else -self

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x - np.multiply.outer(point_plane_distance(x, self), self.normal)

    def as_list(self):
        return [*map(float, self.normal), self.offset]


@dataclass(frozen=True)
class PairFeature:
    f1: float
    f2: float
    f3: float
    f4: float

    def as_tuple(self):
        return (self.f1, self.f2, self.f3, self.f4)


@dataclass(frozen=True, eq=False)
class Line3D:
    """Infinite line; anchor is the line point closest to the origin."""
    direction: np.ndarray
    anchor: np.ndarray

    def __post_init__(self):
        d = normalize(self.direction)
        a = np.asarray(self.anchor, dtype=np.float64)
        a = a - (a @ d) * d
        object.__setattr__(self, "direction", _frozen(d))
        object.__setattr__(self, "anchor", _frozen(a))

    def distance_to(self, point) -> float:
        v = np.asarray(point, dtype=np.float64) - self.anchor
        return float(np.linalg.norm(v - (v @ self.direction) * self.direction))

    def angle_to(self, other: "Line3D") -> float:
        """Sign-insensitive angle between the directions [deg]."""
        c = abs(float(self.direction @ other.direction))
        return float(np.degrees(np.arccos(min(c, 1.0))))

    def as_dict(self):
        return {"direction": self.direction, "anchor": self.anchor}


@dataclass(frozen=True, eq=False)
class Corner:
    """
    Intersection of three orthogonal planes with its local reference frame.
    frame rows are the plane normals, plane k is frame[k].x + offsets[k] = 0.
    """
    frame: np.ndarray
    offsets: np.ndarray
    position: np.ndarray = field(default=None)

    def __post_init__(self):
        frame = _frozen(np.asarray(self.frame, dtype=np.float64).reshape(3, 3))
        offsets = _frozen(np.asarray(self.offsets, dtype=np.float64).reshape(3))
        object.__setattr__(self, "frame", frame)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "position",
                           _frozen(intersect_three_planes(frame, offsets)))

    @classmethod
    def from_frame(cls, frame, offsets) -> "Corner":
        return cls(frame, offsets)

    @classmethod
    def from_position(cls, frame, position) -> "Corner":
        frame = np.asarray(frame, dtype=np.float64)
        return cls(frame, -frame @ np.asarray(position, dtype=np.float64))

    @property
    def planes(self):
        return [Plane(self.frame[k], self.offsets[k]) for k in range(3)]

    def transformed(self, rotation, translation) -> "Corner":
        """Corner moved by x -> R x + t."""
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        return Corner.from_position(self.frame @ R.T, R @ self.position + t)

    def as_dict(self):
        return {"frame": self.frame.reshape(-1), "offsets": self.offsets,
                "position": self.position}


@dataclass(frozen=True)
class DetectionParams:
    """Voting parameters; angles in degrees, lengths in meters."""
    delta_n: float = 20.0
    tau_d: float = 1.0
    n_refs: int = 1000
    k_pairs: int = 250
    theta_bin: float = 10.0
    rho_bin: float = 0.08
    c_max: int = 4

    def __post_init__(self):
        for name in ("delta_n", "tau_d", "n_refs", "k_pairs", "theta_bin",
                     "rho_bin", "c_max"):
            if not getattr(self, name) > 0:
                raise ValueError("{} must be positive".format(name))
        if not self.delta_n < 45.0:
            raise ValueError("delta_n must be below 45 degrees")

    @property
    def sin_delta(self) -> float:
        return float(np.sin(np.radians(self.delta_n)))

    @property
    def cos_delta(self) -> float:
        return float(np.cos(np.radians(self.delta_n)))


class PairClass(enum.Enum):
    NEITHER = 0
    ORTHOGONAL = 1
    COPLANAR = 2


# === OPERATIONS ===============================================================

def compute_ppf_batch(x1, n1, x2, n2) -> np.ndarray:
    """
    Point pair features (n1.n2, n1.d, n2.d, |d|) with d = x1 - x2 for arrays
    of pairs; inputs broadcast against each other, output has a trailing 4.
    """
    x1, n1 = np.asarray(x1, dtype=np.float64), np.asarray(n1, dtype=np.float64)
    x2, n2 = np.asarray(x2, dtype=np.float64), np.asarray(n2, dtype=np.float64)
    d = x1 - x2
    return np.stack(np.broadcast_arrays(np.sum(n1 * n2, axis=-1),
                                        np.sum(n1 * d, axis=-1),
                                        np.sum(n2 * d, axis=-1),
                                        np.linalg.norm(d, axis=-1)), axis=-1)


def compute_ppf(p1: OrientedPoint, p2: OrientedPoint) -> PairFeature:
    f = compute_ppf_batch(p1.position, p1.normal, p2.position, p2.normal)
    return PairFeature(*map(float, f))


def classify_pairs(f, params: DetectionParams) -> np.ndarray:
    """PairClass values (as int array) for an (..., 4) feature array."""
    f = np.asarray(f, dtype=np.float64)
    f1, f2, f3, f4 = f[..., 0], f[..., 1], f[..., 2], f[..., 3]
    sin_d, cos_d = params.sin_delta, params.cos_delta
    orthogonal = (np.abs(f1) < sin_d) & (f4 <= params.tau_d)
    coplanar = ((np.abs(f1) > cos_d)
                & (np.abs(f2) < f4 * sin_d)
                & (np.abs(f3) < f4 * sin_d))
    out = np.full(f1.shape, PairClass.NEITHER.value, dtype=np.int8)
    out[coplanar] = PairClass.COPLANAR.value
    out[orthogonal] = PairClass.ORTHOGONAL.value
    return out


def classify_pair(f: PairFeature, params: DetectionParams) -> PairClass:
    return PairClass(int(classify_pairs(np.array(f.as_tuple()), params)))


def point_plane_distance(x, p: Plane):
    """Signed distance n.x + d; x may be a single point or an (N,3) array."""
    x = np.asarray(x, dtype=np.float64)
    r = x @ p.normal + p.offset
    return float(r) if np.ndim(r) == 0 else r


def intersect_two_planes(p1: Plane, p2: Plane,
                         eps_parallel: float = EPS_PARALLEL) -> Line3D:
    if abs(float(p1.normal @ p2.normal)) >= 1.0 - eps_parallel:
        raise NearParallel("planes are parallel within {}".format(eps_parallel))
    direction = normalize(np.cross(p1.normal, p2.normal))
    # point on both planes and orthogonal to the direction
    A = np.vstack((p1.normal, p2.normal, direction))
    anchor = np.linalg.solve(A, np.array([-p1.offset, -p2.offset, 0.0]))
    return Line3D(direction, anchor)


def intersect_three_planes(frame, offsets) -> np.ndarray:
    """Corner position -frame^T offsets of three orthonormal planes."""
    frame = np.asarray(frame, dtype=np.float64)
    return -frame.T @ np.asarray(offsets, dtype=np.float64)


def shortest_arc_rotation(a, b) -> np.ndarray:
    """
    Rotation taking unit vector a onto unit vector b along the shortest arc.
    For antiparallel inputs a fixed 180 deg turn about e_x is used (about e_y
    if a is along e_x).
    """
    a, b = normalize(a), normalize(b)
    v = np.cross(a, b)
    c = float(a @ b)
    if c < -1.0 + 1e-12:
        axis = np.array([1.0, 0.0, 0.0])
        if abs(a @ axis) > 0.9:
            axis = np.array([0.0, 1.0, 0.0])
        axis = normalize(axis - (axis @ a) * a)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    K = skew(v)
    return np.eye(3) + K + K @ K / (1.0 + c)
