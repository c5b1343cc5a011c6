#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Relation graph of detected planes: clustering of plane-pair hypotheses,
# orthogonality edges, corner triangles and bundles of parallel planes.
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

from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from orthoplanes.detection import OppCandidate
from orthoplanes.generic import (ConflictingStructure, DisjointForest,
                                 Malformed, canonical_sign, normalize)
from orthoplanes.geometry import (DetectionParams, Line3D, Plane,
                                  intersect_two_planes)

logger = logging.getLogger(__name__)

MERGE_DIST = 0.05

Edge = Tuple[int, int]


def _edge(i: int, j: int) -> Edge:
    return (i, j) if i < j else (j, i)


class PlaneClusters(SequenceABC):
    """
    Representative planes of the hypothesis clusters. Hypothesis 2q is the
    reference plane of candidate q, 2q+1 its orthogonal plane; labels maps
    every hypothesis to its plane index, -1 when its cluster was pruned.
    """

    def __init__(self, planes: Sequence[Plane], labels, support: Sequence[int]):
        self._planes = list(planes)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.support = list(support)

    def __len__(self):
        return len(self._planes)

    def __getitem__(self, i):
        return self._planes[i]

    def __repr__(self):
        return "PlaneClusters({} planes from {} hypotheses)".format(
            len(self._planes), self.labels.size)


@dataclass(frozen=True)
class PlaneGraph:
    vertices: Tuple[Plane, ...] = ()
    edges: FrozenSet[Edge] = frozenset()

    def __post_init__(self):
        vertices = tuple(self.vertices)
        edges = frozenset(_edge(int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if i == j:
                raise ValueError("self-loop on vertex {}".format(i))
            if j >= len(vertices) or i < 0:
                raise ValueError("edge ({}, {}) outside the graph".format(i, j))
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "edges", edges)

    def __len__(self):
        return len(self.vertices)

    def adjacency(self) -> List[List[int]]:
        adj: List[List[int]] = [[] for _ in self.vertices]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return [sorted(a) for a in adj]

    def sorted_edges(self) -> List[Edge]:
        return sorted(self.edges)


@dataclass
class ParallelBundle:
    """
    Parallel planes n.x + d_l = 0 sharing one normal. distances is strictly
    increasing; members[l] lists the graph vertices represented by d_l.
    """
    normal: np.ndarray
    distances: np.ndarray
    members: List[List[int]] = field(default_factory=list)
    member_edges: FrozenSet[Edge] = frozenset()

    def __post_init__(self):
        self.normal = normalize(self.normal)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if np.any(np.diff(self.distances) <= 0):
            raise ValueError("bundle distances must be strictly increasing")
        if not self.members:
            self.members = [[] for _ in self.distances]

    def __len__(self):
        return self.distances.size

    @property
    def planes(self) -> List[Plane]:
        return [Plane(self.normal, d) for d in self.distances]


@dataclass(frozen=True)
class CornerTriangle:
    plane_indices: Tuple[int, int, int]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.plane_indices)
        if len(set(idx)) != 3:
            raise ValueError("corner triangle needs 3 distinct planes")
        object.__setattr__(self, "plane_indices", idx)


# === CLUSTERING ===============================================================

def _hypotheses(candidates: Sequence[OppCandidate]):
    """Normals, offsets, anchors and votes of the 2|candidates| hypotheses."""
    n = len(candidates)
    normals = np.zeros((2 * n, 3))
    offsets = np.zeros(2 * n)
    anchors = np.zeros((2 * n, 3))
    votes = np.zeros(2 * n)
    for q, c in enumerate(candidates):
        a_ref, a_other = c.anchors()
        for k, (plane, anchor) in enumerate(((c.plane_ref, a_ref),
                                             (c.plane_other, a_other))):
            normals[2 * q + k] = plane.normal
            offsets[2 * q + k] = plane.offset
            anchors[2 * q + k] = anchor
            votes[2 * q + k] = c.votes
    return normals, offsets, anchors, votes


def _representative(normals, offsets, votes) -> Plane:
    top = int(np.argmax(votes))
    signs = np.where(normals @ normals[top] < 0, -1.0, 1.0)
    n = normalize((votes * signs) @ normals)
    d = float(np.sum(votes * signs * offsets) / np.sum(votes))
    return Plane(n, d).canonical()


def cluster_candidates(candidates: Sequence[OppCandidate],
                       merge_dist: float = MERGE_DIST,
                       merge_angle: float = 20.0,
                       min_support: int = 1) -> PlaneClusters:
    """
    Union-find clustering of plane hypotheses. Two hypotheses unite when
    their normals differ by less than merge_angle [deg] and each anchor lies
    within merge_dist of the other plane. Clusters with fewer than
    min_support hypotheses are dropped.
    """
    normals, offsets, anchors, votes = _hypotheses(candidates)
    count = normals.shape[0]
    forest = DisjointForest(count)
    cos_merge = math.cos(math.radians(merge_angle))

    for i in range(count - 1):
        rest = slice(i + 1, count)
        close = np.abs(normals[rest] @ normals[i]) > cos_merge
        close &= np.abs(normals[rest] @ anchors[i] + offsets[rest]) < merge_dist
        close &= np.abs(anchors[rest] @ normals[i] + offsets[i]) < merge_dist
        for j in np.flatnonzero(close):
            forest.union(i, i + 1 + int(j))

    planes, support = [], []
    labels = np.full(count, -1, dtype=np.int64)
    for members in forest.groups():
        if len(members) < min_support:
            continue
        labels[members] = len(planes)
        planes.append(_representative(normals[members], offsets[members],
                                      votes[members]))
        support.append(len(members))

    logger.info("clustering: %d hypotheses -> %d planes (%d pruned)",
                count, len(planes), int(np.count_nonzero(labels < 0)))
    return PlaneClusters(planes, labels, support)


def _assign_hypotheses(planes: Sequence[Plane], candidates: Sequence[OppCandidate],
                       merge_dist: float, merge_angle: float) -> np.ndarray:
    # plain plane lists carry no labels: take the closest matching plane
    normals, offsets, anchors, _ = _hypotheses(candidates)
    labels = np.full(normals.shape[0], -1, dtype=np.int64)
    if not len(planes) or not normals.shape[0]:
        return labels
    pn = np.array([p.normal for p in planes])
    pd = np.array([p.offset for p in planes])
    dots = np.abs(normals @ pn.T)
    dist = np.abs(anchors @ pn.T + pd)
    ok = (dots > math.cos(math.radians(merge_angle))) & (dist < merge_dist)
    score = np.where(ok, dist, np.inf)
    best = np.argmin(score, axis=1)
    hit = np.isfinite(score[np.arange(score.shape[0]), best])
    labels[hit] = best[hit]
    return labels


def build_graph(planes: Sequence[Plane], candidates: Sequence[OppCandidate],
                params: DetectionParams, merge_dist: float = MERGE_DIST) -> PlaneGraph:
    """
    One vertex per plane; an edge for every candidate whose two hypotheses
    landed in different planes that are orthogonal within delta_n.
    """
    labels = getattr(planes, "labels", None)
    if labels is None or labels.size != 2 * len(candidates):
        labels = _assign_hypotheses(planes, candidates, merge_dist, params.delta_n)

    edges = set()
    for q in range(len(candidates)):
        a, b = int(labels[2 * q]), int(labels[2 * q + 1])
        if a < 0 or b < 0 or a == b:
            continue
        if abs(float(planes[a].normal @ planes[b].normal)) < params.sin_delta:
            edges.add(_edge(a, b))
    graph = PlaneGraph(tuple(planes), frozenset(edges))
    logger.info("relation graph: %d vertices, %d edges", len(graph), len(edges))
    return graph


def enumerate_triangles(g: PlaneGraph) -> List[CornerTriangle]:
    """All 3-cliques, each once, in lexicographic order."""
    adj = [set(a) for a in g.adjacency()]
    triangles = []
    for i, j in g.sorted_edges():
        for k in sorted(adj[i] & adj[j]):
            if k > j:
                triangles.append(CornerTriangle((i, j, k)))
    return triangles


# === PARALLEL BUNDLES =========================================================

def _collapse(distances: np.ndarray, vertices: np.ndarray, merge_dist: float):
    order = np.lexsort((vertices, distances))
    groups: List[List[int]] = []
    for k in order:
        if groups and distances[k] - distances[groups[-1][-1]] <= merge_dist:
            groups[-1].append(k)
        else:
            groups.append([k])
    values = np.array([distances[g].mean() for g in groups])
    members = [sorted(int(vertices[k]) for k in g) for g in groups]
    # averaging a collapsed run keeps order but may tie with a neighbour
    keep = np.concatenate(([True], np.diff(values) > 0))
    if not np.all(keep):
        merged_values, merged_members = [], []
        for v, m, k in zip(values, members, keep):
            if k:
                merged_values.append(v)
                merged_members.append(m)
            else:
                merged_members[-1] = sorted(merged_members[-1] + m)
        values, members = np.array(merged_values), merged_members
    return values, members


def reduce_parallel(g: PlaneGraph, parallel_angle: float = 20.0,
                    merge_dist: float = 0.0) -> List[ParallelBundle]:
    """
    Merge vertices with parallel normals into bundles. Distances are the
    member offsets expressed against the averaged bundle normal, ascending;
    offsets within merge_dist of each other collapse into one.
    """
    count = len(g)
    normals = np.array([p.normal for p in g.vertices]).reshape(-1, 3)
    offsets = np.array([p.offset for p in g.vertices])
    cos_par = math.cos(math.radians(parallel_angle))

    forest = DisjointForest(count)
    for i in range(count - 1):
        close = np.abs(normals[i + 1:] @ normals[i]) > cos_par
        for j in np.flatnonzero(close):
            forest.union(i, i + 1 + int(j))

    groups = forest.groups()
    vertex_bundle = np.empty(count, dtype=np.int64)
    for b, members in enumerate(groups):
        vertex_bundle[members] = b

    for i, j in g.sorted_edges():
        if vertex_bundle[i] == vertex_bundle[j]:
            raise ConflictingStructure(
                "planes {} and {} are parallel but joined by an orthogonality "
                "edge".format(i, j))

    edges_of: Dict[int, set] = {b: set() for b in range(len(groups))}
    for i, j in g.edges:
        e = _edge(int(vertex_bundle[i]), int(vertex_bundle[j]))
        edges_of[e[0]].add(e)
        edges_of[e[1]].add(e)

    bundles = []
    for b, members in enumerate(groups):
        members = np.asarray(members)
        ref = normals[members[0]]
        signs = np.where(normals[members] @ ref < 0, -1.0, 1.0)
        n = normalize(signs @ normals[members])
        n = canonical_sign(n) * n
        distances = offsets[members] * (normals[members] @ n)
        values, grouped = _collapse(distances, members, merge_dist)
        bundles.append(ParallelBundle(n, values, grouped, frozenset(edges_of[b])))

    logger.info("parallel reduction: %d planes -> %d bundles", count, len(bundles))
    return bundles


def bundles_to_planes(bundles: Sequence[ParallelBundle], n_vertices: int) -> List[Optional[Plane]]:
    """Per-vertex planes of (refined) bundles; vertices not covered are None."""
    planes: List[Optional[Plane]] = [None] * n_vertices
    for bundle in bundles:
        for d, members in zip(bundle.distances, bundle.members):
            for v in members:
                planes[v] = Plane(bundle.normal, d)
    return planes


def graph_lines(g: PlaneGraph) -> List[Tuple[Edge, Line3D]]:
    """Intersection line of every orthogonality edge."""
    return [((i, j), intersect_two_planes(g.vertices[i], g.vertices[j]))
            for i, j in g.sorted_edges()]


# === JSON =====================================================================

def graph_to_dict(g: PlaneGraph, bundles: Optional[Sequence[ParallelBundle]] = None,
                  triangles: Optional[Sequence[CornerTriangle]] = None) -> Dict[str, Any]:
    out = {"vertices": [p.as_list() for p in g.vertices],
           "edges": [list(e) for e in g.sorted_edges()],
           "lines": [{"edge": list(e), **line.as_dict()} for e, line in graph_lines(g)]}
    if bundles is not None:
        out["bundles"] = [{"normal": b.normal, "distances": b.distances,
                           "members": b.members,
                           "edges": [list(e) for e in sorted(b.member_edges)]}
                          for b in bundles]
    if triangles is not None:
        out["triangles"] = [list(t.plane_indices) for t in triangles]
    return out


def graph_from_dict(content: Dict[str, Any]) -> PlaneGraph:
    try:
        vertices = tuple(Plane(v[:3], v[3]) for v in content["vertices"])
        edges = frozenset(tuple(e) for e in content["edges"])
        return PlaneGraph(vertices, edges)
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise Malformed("not a plane graph: {}".format(e))


def bundles_from_dict(content: Dict[str, Any]) -> List[ParallelBundle]:
    try:
        return [ParallelBundle(b["normal"], b["distances"], b["members"],
                               frozenset(tuple(e) for e in b["edges"]))
                for b in content.get("bundles", [])]
    except (KeyError, TypeError, ValueError) as e:
        raise Malformed("not a bundle list: {}".format(e))
