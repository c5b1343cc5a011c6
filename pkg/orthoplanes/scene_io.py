#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Point cloud input and output (PLY), normal estimation, min-distance
# downsampling, sampling hierarchies and synthetic test scenes with ground
# truth.
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
import io
import logging
import math

from dataclasses import dataclass, field
from multiprocessing.dummy import Pool as ThreadPool
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from orthoplanes.generic import (DisjointForest, Io, Malformed, TooFewPoints,
                                 normalize)
from orthoplanes.geometry import Corner, Line3D, Plane, PointCloud, intersect_two_planes

logger = logging.getLogger(__name__)

# neighbours per point linked during voxel averaging
LINK_NEIGHBOURS = 8


# === PLY ======================================================================

ply_dtypes = {
    "int8": "i1", "char": "i1", "uint8": "u1", "uchar": "u1",
    "int16": "i2", "short": "i2", "uint16": "u2", "ushort": "u2",
    "int32": "i4", "int": "i4", "uint32": "u4", "uint": "u4",
    "float32": "f4", "float": "f4", "float64": "f8", "double": "f8",
}

valid_formats = {"ascii": "", "binary_big_endian": ">",
                 "binary_little_endian": "<"}


@dataclass
class PlyElement:
    name: str
    count: int
    properties: List[Tuple[str, str]] = field(default_factory=list)
    has_list: bool = False

    def dtype(self, byte_order: str) -> np.dtype:
        return np.dtype([(name, byte_order + ply_dtypes[kind])
                         for name, kind in self.properties])


def _parse_header(raw: bytes, path) -> Tuple[str, List[PlyElement], int]:
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise Malformed("{} is not a PLY file".format(path))
    body_start = raw.index(b"\n", end) + 1 if b"\n" in raw[end:] else len(raw)

    fmt = None
    elements: List[PlyElement] = []
    for line in raw[:end].decode("ascii", errors="replace").splitlines()[1:]:
        words = line.split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "format":
            fmt = words[1] if len(words) > 1 else None
        elif words[0] == "element":
            try:
                elements.append(PlyElement(words[1], int(words[2])))
            except (IndexError, ValueError):
                raise Malformed("{}: bad element line {!r}".format(path, line))
        elif words[0] == "property":
            if not elements:
                raise Malformed("{}: property outside an element".format(path))
            if len(words) > 1 and words[1] == "list":
                elements[-1].has_list = True
            elif len(words) == 3 and words[1] in ply_dtypes:
                elements[-1].properties.append((words[2], words[1]))
            else:
                raise Malformed("{}: bad property line {!r}".format(path, line))

    if fmt not in valid_formats:
        raise Malformed("{}: unknown PLY format {!r}".format(path, fmt))
    return fmt, elements, body_start


def read_ply(path) -> pd.DataFrame:
    """
    Vertex element of a PLY file as a DataFrame with one column per scalar
    property. Elements in front of the vertices are skipped.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise Io("cannot read {}: {}".format(path, e))

    fmt, elements, body_start = _parse_header(raw, path)
    names = [e.name for e in elements]
    if "vertex" not in names:
        raise Malformed("{} has no vertex element".format(path))
    vertex = elements[names.index("vertex")]
    preceding = elements[:names.index("vertex")]
    if vertex.has_list or any(e.has_list for e in preceding):
        raise Malformed("{}: list properties before or in the vertex element "
                        "are not supported".format(path))
    columns = [name for name, _ in vertex.properties]

    if fmt == "ascii":
        skip = sum(e.count for e in preceding)
        text = raw[body_start:].decode("ascii", errors="replace")
        try:
            frame = pd.read_csv(io.StringIO(text), sep=r"\s+", header=None,
                                skiprows=skip, nrows=vertex.count,
                                usecols=range(len(columns)), names=columns)
        except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            if vertex.count == 0:
                return pd.DataFrame(columns=columns, dtype=np.float64)
            raise Malformed("{}: unreadable vertex data: {}".format(path, e))
        if len(frame) != vertex.count or frame.isnull().values.any():
            raise Malformed("{}: expected {} vertices, found {}".format(
                path, vertex.count, len(frame)))
        return frame

    order = valid_formats[fmt]
    offset = body_start + sum(e.count * e.dtype(order).itemsize for e in preceding)
    dtype = vertex.dtype(order)
    if len(raw) < offset + vertex.count * dtype.itemsize:
        raise Malformed("{} is truncated: {} vertices announced".format(
            path, vertex.count))
    data = np.frombuffer(raw, dtype=dtype, count=vertex.count, offset=offset)
    return pd.DataFrame({name: data[name].astype(data[name].dtype.newbyteorder("="))
                         for name in columns})


def load_point_cloud(path, with_labels: bool = False):
    """
    PointCloud from a PLY file (x, y, z, optional nx, ny, nz). With
    with_labels the integer `label` property is returned alongside (or None).
    """
    frame = read_ply(path)
    if not {"x", "y", "z"} <= set(frame.columns):
        raise Malformed("{}: vertex element lacks x, y, z".format(path))
    positions = frame[["x", "y", "z"]].to_numpy(dtype=np.float64)
    normals = None
    if {"nx", "ny", "nz"} <= set(frame.columns):
        normals = frame[["nx", "ny", "nz"]].to_numpy(dtype=np.float64)
    try:
        cloud = PointCloud(positions, normals)
    except ValueError as e:
        raise Malformed("{}: {}".format(path, e))
    logger.info("loaded %d points from %s (normals: %s)", len(cloud), path,
                "yes" if normals is not None else "no")
    if not with_labels:
        return cloud
    labels = frame["label"].to_numpy(dtype=np.int64) if "label" in frame else None
    return cloud, labels


def save_point_cloud(cloud: PointCloud, path, binary: bool = True,
                     labels: Optional[np.ndarray] = None):
    """Write double precision PLY, binary little endian or ascii."""
    columns = ["x", "y", "z"]
    arrays = [cloud.positions]
    if cloud.normals is not None:
        columns += ["nx", "ny", "nz"]
        arrays.append(cloud.normals)

    header = ["ply",
              "format {} 1.0".format("binary_little_endian" if binary else "ascii"),
              "element vertex {}".format(len(cloud))]
    header += ["property double {}".format(c) for c in columns]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.size != len(cloud):
            raise ValueError("one label per point expected")
        header.append("property int label")
    header.append("end_header")
    header = ("\n".join(header) + "\n").encode("ascii")

    values = np.hstack(arrays) if arrays else np.zeros((len(cloud), 0))
    try:
        with open(path, "wb") as f:
            f.write(header)
            if binary:
                dtype = [(c, "<f8") for c in columns]
                if labels is not None:
                    dtype.append(("label", "<i4"))
                table = np.empty(len(cloud), dtype=dtype)
                for k, c in enumerate(columns):
                    table[c] = values[:, k]
                if labels is not None:
                    table["label"] = labels
                f.write(table.tobytes())
            else:
                frame = pd.DataFrame(values, columns=columns)
                if labels is not None:
                    frame["label"] = labels
                frame.to_csv(f, sep=" ", header=False, index=False,
                             float_format="%.9g", lineterminator="\n")
    except OSError as e:
        raise Io("cannot write {}: {}".format(path, e))
    logger.info("wrote %d points to %s", len(cloud), path)


# === NORMALS ==================================================================

def _smallest_eigenvectors(neighbours: np.ndarray) -> np.ndarray:
    centered = neighbours - neighbours.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def estimate_normals(cloud: PointCloud, k: int = 20, workers: int = 1,
                     chunk: int = 65536) -> PointCloud:
    """
    Normal of every point from the covariance of its k nearest neighbours
    (the point itself included). Signs are left arbitrary.
    """
    n = len(cloud)
    if n < 3:
        raise TooFewPoints("normal estimation needs 3 points, got {}".format(n))
    if k < 3:
        raise ValueError("k must be at least 3")
    if k > n:
        logger.info("only %d points, using k=%d instead of %d", n, n, k)
        k = n

    tree = cKDTree(cloud.positions)
    _, idx = tree.query(cloud.positions, k=k, workers=max(int(workers), 1))
    starts = range(0, n, chunk)

    def one(s):
        return _smallest_eigenvectors(cloud.positions[idx[s:s + chunk]])

    if workers > 1 and n > chunk:
        pool = ThreadPool(int(workers))
        parts = pool.map(one, starts)
        pool.close()
        pool.join()
    else:
        parts = [one(s) for s in starts]
    return PointCloud(cloud.positions, np.vstack(parts), cloud.valid)


# === SAMPLING =================================================================

@dataclass(frozen=True)
class SamplingParams:
    """
    d_min None means bounding-box diagonal / ADAPTIVE_DIVISOR. Points are
    only averaged together when their normals agree within normal_angle [deg].
    """
    d_min: Optional[float] = None
    hierarchy_levels: int = 3
    normal_angle: float = 30.0

    ADAPTIVE_DIVISOR = 200.0

    def __post_init__(self):
        if self.d_min is not None and not self.d_min > 0:
            raise ValueError("d_min must be positive")
        if int(self.hierarchy_levels) < 1:
            raise ValueError("at least one hierarchy level is needed")
        if not 0.0 < self.normal_angle <= 90.0:
            raise ValueError("normal_angle must be in (0, 90]")

    def resolve(self, cloud: PointCloud) -> float:
        if self.d_min is not None:
            return float(self.d_min)
        return cloud.bounding_box_diagonal() / self.ADAPTIVE_DIVISOR

    @property
    def cos_normal_angle(self) -> float:
        return math.cos(math.radians(self.normal_angle))


def _average_groups(positions, normals, weights, inverse, count):
    """Weighted mean positions and sign-aligned mean normals per group."""
    total = np.bincount(inverse, weights=weights, minlength=count)
    mean = np.column_stack([np.bincount(inverse, weights=weights * positions[:, c],
                                        minlength=count) for c in range(3)])
    mean /= total[:, None]
    if normals is None:
        return mean, None, total
    first = np.full(count, -1, dtype=np.int64)
    first[inverse[::-1]] = np.arange(inverse.size)[::-1]
    signs = np.where(np.einsum("ij,ij->i", normals, normals[first[inverse]]) < 0,
                     -1.0, 1.0)
    signed = normals * (signs * weights)[:, None]
    summed = np.column_stack([np.bincount(inverse, weights=signed[:, c],
                                          minlength=count) for c in range(3)])
    return mean, normalize(summed), total


def _link_cells(positions, normals, keys, d_min, cos_angle):
    """
    Connected components of the graph joining each point to its nearest
    neighbours in the same voxel that are closer than d_min and, with
    normals, agree within the normal angle.
    """
    n = positions.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64), 1
    # voxels pushed 2 * d_min apart: no neighbour within d_min crosses a voxel
    separated = positions + keys * (2.0 * d_min)
    k = min(LINK_NEIGHBOURS + 1, n)
    dist, idx = cKDTree(separated).query(separated, k=k, distance_upper_bound=d_min)
    rows = np.repeat(np.arange(n), k)
    cols = idx.ravel()
    keep = (cols < n) & (cols != rows) & (dist.ravel() < d_min)
    rows, cols = rows[keep], cols[keep]
    if normals is not None:
        agree = np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) >= cos_angle
        rows, cols = rows[agree], cols[agree]
    graph = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    count, labels = connected_components(graph, directed=False)
    return labels.astype(np.int64), int(count)


def downsample(cloud: PointCloud, params: SamplingParams) -> PointCloud:
    """
    Voxel averaging at cell size d_min, followed by merging of any output
    points closer than d_min / sqrt(3). Averaging never joins points that are
    d_min or more apart or whose normals disagree by more than the normal
    angle, so a voxel on a crease yields one point per plane. Invalid points
    are dropped.
    """
    cloud = cloud.usable()
    if len(cloud) == 0:
        return cloud
    d_min = params.resolve(cloud)
    if not d_min > 0:
        return cloud
    cos_angle = params.cos_normal_angle

    keys = np.floor(cloud.positions / d_min).astype(np.int64)
    inverse, count = _link_cells(cloud.positions, cloud.normals, keys, d_min,
                                 cos_angle)
    positions, normals, weights = _average_groups(
        cloud.positions, cloud.normals, np.ones(len(cloud)), inverse, count)

    radius = d_min / math.sqrt(3.0)
    while positions.shape[0] > 1:
        pairs = cKDTree(positions).query_pairs(radius, output_type="ndarray")
        if normals is not None and pairs.shape[0] > 0:
            agree = np.abs(np.einsum("ij,ij->i", normals[pairs[:, 0]],
                                     normals[pairs[:, 1]])) >= cos_angle
            pairs = pairs[agree]
        if pairs.shape[0] == 0:
            break
        forest = DisjointForest(positions.shape[0])
        for i, j in pairs:
            forest.union(int(i), int(j))
        labels = forest.labels()
        positions, normals, weights = _average_groups(
            positions, normals, weights, labels, int(labels.max()) + 1)

    logger.debug("downsampled %d -> %d points at d_min=%.4g", len(cloud),
                 positions.shape[0], d_min)
    return PointCloud(positions, normals)


def build_hierarchy(cloud: PointCloud, params: SamplingParams) -> List[PointCloud]:
    """Clouds from coarsest to finest; level l uses d_min * 2**(levels-1-l)."""
    d_min = params.resolve(cloud.usable())
    levels = int(params.hierarchy_levels)
    if not d_min > 0:
        return [cloud.usable()] * levels
    return [downsample(cloud, SamplingParams(d_min * 2.0**(levels - 1 - level), 1,
                                             params.normal_angle))
            for level in range(levels)]


# === SYNTHETIC SCENES =========================================================

class Layout(enum.Enum):
    CORNER_ROOM = "CornerRoom"
    TWO_WALLS = "TwoWalls"
    BOX = "Box"
    SINGLE_PLANE = "SinglePlane"
    NOISE_BALL = "NoiseBall"


@dataclass(frozen=True)
class SyntheticSpec:
    layout: Layout = Layout.CORNER_ROOM
    extent: float = 1.0
    points_per_m2: float = 1e4
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0
    recompute_normals: bool = True
    flip_normals: bool = True
    normal_k: int = 20

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        if not self.points_per_m2 > 0:
            raise ValueError("points_per_m2 must be positive")
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must not be negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")


@dataclass
class GroundTruth:
    planes: List[Plane] = field(default_factory=list)
    lines: List[Line3D] = field(default_factory=list)
    corners: List[Corner] = field(default_factory=list)
    edges: List[Tuple[int, int]] = field(default_factory=list)
    corner_planes: List[Tuple[int, int, int]] = field(default_factory=list)
    point_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class _Face:
    """Rectangle origin + a*u + b*v, a, b in [0, extent]."""
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    @property
    def plane(self) -> Plane:
        return Plane.from_point_normal(self.origin, self.normal).canonical()


def _faces(layout: Layout, e: float) -> List[_Face]:
    ex, ey, ez = np.eye(3)
    o = np.zeros(3)
    if layout is Layout.CORNER_ROOM:
        return [_Face(o, ey, ez), _Face(o, ex, ez), _Face(o, ex, ey)]
    if layout is Layout.TWO_WALLS:
        return [_Face(o, ey, ez), _Face(o, ex, ez)]
    if layout is Layout.BOX:
        return [_Face(o, ey, ez), _Face(e * ex, ey, ez),
                _Face(o, ex, ez), _Face(e * ey, ex, ez),
                _Face(e * ez, ex, ey)]
    if layout is Layout.SINGLE_PLANE:
        return [_Face(o, ex, ey)]
    return []


def _structure(planes: List[Plane]):
    """Orthogonal edges, their lines, and corners of an axis-aligned layout."""
    edges = [(i, j) for i in range(len(planes)) for j in range(i + 1, len(planes))
             if abs(planes[i].normal @ planes[j].normal) < 1e-12]
    lines = [intersect_two_planes(planes[i], planes[j]) for i, j in edges]
    adjacent = set(edges)
    corners, triples = [], []
    for i, j in edges:
        for k in range(j + 1, len(planes)):
            if (i, k) in adjacent and (j, k) in adjacent:
                triple = (i, j, k)
                frame = np.array([planes[m].normal for m in triple])
                if np.linalg.det(frame) < 0:
                    triple = (i, k, j)
                frame = np.array([planes[m].normal for m in triple])
                offsets = np.array([planes[m].offset for m in triple])
                corners.append(Corner(frame, offsets))
                triples.append(triple)
    return edges, lines, corners, triples


def _random_unit(rng, n: int) -> np.ndarray:
    return normalize(rng.normal(size=(n, 3)))


def generate_synthetic_scene(spec: SyntheticSpec) -> Tuple[PointCloud, GroundTruth]:
    """Deterministic synthetic cloud and its exact ground truth."""
    rng = np.random.default_rng(spec.seed)
    e = float(spec.extent)
    faces = _faces(spec.layout, e)

    positions, normals, labels = [], [], []
    for k, face in enumerate(faces):
        count = int(rng.poisson(spec.points_per_m2 * e * e))
        ab = rng.uniform(0.0, e, size=(count, 2))
        n = normalize(face.normal)
        x = face.origin + ab[:, :1] * face.u + ab[:, 1:] * face.v
        if spec.noise_sigma > 0:
            x = x + rng.normal(0.0, spec.noise_sigma, size=(count, 1)) * n
        positions.append(x)
        normals.append(np.tile(n, (count, 1)))
        labels.append(np.full(count, k, dtype=np.int64))

    if spec.layout is Layout.NOISE_BALL:
        count = int(rng.poisson(spec.points_per_m2 * e * e))
        positions.append(rng.normal(0.0, e / 4.0, size=(count, 3)))
        normals.append(_random_unit(rng, count))
        labels.append(np.full(count, -1, dtype=np.int64))

    inliers = sum(p.shape[0] for p in positions)
    f = spec.outlier_fraction
    n_out = int(round(f / (1.0 - f) * inliers)) if f > 0 else 0
    if n_out:
        if faces:
            lo, hi = np.zeros(3), np.full(3, e)
        else:
            stacked = np.vstack(positions)
            lo, hi = stacked.min(axis=0), stacked.max(axis=0)
        positions.append(rng.uniform(lo, hi, size=(n_out, 3)))
        normals.append(_random_unit(rng, n_out))
        labels.append(np.full(n_out, -1, dtype=np.int64))

    positions = np.vstack(positions) if positions else np.zeros((0, 3))
    normals = np.vstack(normals) if normals else np.zeros((0, 3))
    labels = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    if spec.flip_normals and len(normals):
        normals = normals * rng.choice([-1.0, 1.0], size=(len(normals), 1))

    cloud = PointCloud(positions, normals)
    if spec.noise_sigma > 0 and spec.recompute_normals and len(cloud) >= 3:
        cloud = estimate_normals(cloud, k=spec.normal_k)

    planes = [face.plane for face in faces]
    edges, lines, corners, triples = _structure(planes)
    truth = GroundTruth(planes, lines, corners, edges, triples, labels)
    logger.info("synthetic %s: %d points, %d planes, %d corners",
                spec.layout.value, len(cloud), len(planes), len(corners))
    return cloud, truth


def ground_truth_to_dict(truth: GroundTruth) -> Dict[str, Any]:
    return {"planes": [p.as_list() for p in truth.planes],
            "lines": [line.as_dict() for line in truth.lines],
            "corners": [c.as_dict() for c in truth.corners],
            "edges": [list(e) for e in truth.edges],
            "corner_planes": [list(t) for t in truth.corner_planes]}


def ground_truth_from_dict(content: Dict[str, Any]) -> GroundTruth:
    try:
        planes = [Plane(p[:3], p[3]) for p in content["planes"]]
        lines = [Line3D(l["direction"], l["anchor"]) for l in content.get("lines", [])]
        corners = [Corner(c["frame"], c["offsets"]) for c in content.get("corners", [])]
        edges = [tuple(e) for e in content.get("edges", [])]
        triples = [tuple(t) for t in content.get("corner_planes", [])]
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise Malformed("not a ground truth record: {}".format(e))
    return GroundTruth(planes, lines, corners, edges, triples)
