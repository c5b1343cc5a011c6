#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Pipeline stages: detection, refinement, registration, synthetic scenes,
# evaluation and benchmarking, and the configuration they share.
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
import time

from dataclasses import dataclass, field
from multiprocessing.dummy import Pool as ThreadPool
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from orthoplanes.detection import OppCandidate, detect_opps
from orthoplanes.evaluation import (DetectionReport, evaluate_lines,
                                    evaluate_planes, label_points)
from orthoplanes.generic import (ConfigError, InsufficientSupport, Malformed,
                                 ParameterIO, Singular)
from orthoplanes.geometry import Corner, DetectionParams, Line3D, Plane, PointCloud
from orthoplanes.refinement import (CornerRefiner, RefinementParams,
                                    initial_corner, refine_graph)
from orthoplanes.registration import (ConstraintClass, IcpParams, IcpSolver,
                                      RigidMotion, match_corners)
from orthoplanes.relation_graph import (CornerTriangle, ParallelBundle, PlaneGraph,
                                        bundles_from_dict, bundles_to_planes,
                                        build_graph, cluster_candidates,
                                        enumerate_triangles, graph_from_dict,
                                        graph_lines, graph_to_dict, reduce_parallel)
from orthoplanes.scene_io import (GroundTruth, Layout, SamplingParams, SyntheticSpec,
                                  estimate_normals,
                                  generate_synthetic_scene, load_point_cloud)

logger = logging.getLogger(__name__)


# === CONFIGURATION ============================================================

# keyword: (default, type); None defaults mean "derived" (see PipelineConfig)
KEYWORDS: Dict[str, Tuple[Any, type]] = {
    "delta_n":               (20.0, float),
    "tau_d":                 (1.0, float),
    "n_refs":                (1000, int),
    "k_pairs":               (250, int),
    "theta_bin":             (10.0, float),
    "rho_bin":               (0.08, float),
    "c_max":                 (4, int),
    "epsilon":               (0.15, float),
    "lambda":                (1e4, float),
    "eps_n":                 (30.0, float),
    "robust":                ("huber", str),
    "robust_scale":          (0.02, float),
    "max_iterations":        (50, int),
    "convergence_tol":       (1e-8, float),
    "d_min":                 (None, float),
    "levels":                (3, int),
    "merge_dist":            (0.05, float),
    "merge_angle":           (None, float),
    "parallel_angle":        (None, float),
    "min_support":           (3, int),
    "normal_k":              (20, int),
    "icp_max_iterations":    (30, int),
    "correspondence_radius": (0.1, float),
    "collinearity_tol":      (2.0, float),
    "min_overlap":           (0.3, float),
    "corner_distance":       (1.0, float),
    "angle_tol":             (10.0, float),
    "dist_tol":              (0.05, float),
    "seed":                  (0, int),
    "workers":               (1, int),
}


def _coerce(key: str, value):
    if value is None:
        return None
    kind = KEYWORDS[key][1]
    if kind is str:
        value = str(value).strip().lower()
        return None if value in ("none", "false", "") else value
    if isinstance(value, str) and value.strip().lower() in ("auto", "none"):
        return None
    try:
        if kind is int:
            as_float = float(value)
            if as_float != int(as_float):
                raise ValueError(value)
            return int(as_float)
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError("{} expects a {} value, got {!r}".format(
            key, kind.__name__, value))


class PipelineConfig(object):
    """
    All tunable values of the pipeline under their parameter-file keywords.

    config = PipelineConfig.from_file('par/room.orthoplanes')
    config = config.override(delta_n=15, seed=None)   # None: keep file value
    config.detection, config.refinement, config.sampling, config.icp
    """

    def __init__(self, **values):
        self.values = {key: default for key, (default, _) in KEYWORDS.items()}
        self._update(values)

    def _update(self, values: Dict[str, Any]):
        for key, value in values.items():
            if key not in KEYWORDS:
                raise ConfigError("unknown parameter {!r}".format(key))
            self.values[key] = _coerce(key, value)

    @classmethod
    def from_file(cls, pfile) -> "PipelineConfig":
        par = ParameterIO(pfile)
        return cls(**par.as_dict())

    def override(self, **flags) -> "PipelineConfig":
        """New config with every flag that is not None applied."""
        out = PipelineConfig(**self.values)
        out._update({k: v for k, v in flags.items() if v is not None})
        return out

    def __getitem__(self, key):
        return self.values[key]

    def __getattr__(self, key):
        if key != "values" and key in KEYWORDS:
            return self.values[key]
        raise AttributeError(key)

    def _build(self, factory, **kwargs):
        try:
            return factory(**kwargs)
        except ValueError as e:
            raise ConfigError(str(e))

    @property
    def detection(self) -> DetectionParams:
        v = self.values
        return self._build(DetectionParams, delta_n=v["delta_n"], tau_d=v["tau_d"],
                           n_refs=v["n_refs"], k_pairs=v["k_pairs"],
                           theta_bin=v["theta_bin"], rho_bin=v["rho_bin"],
                           c_max=v["c_max"])

    @property
    def refinement(self) -> RefinementParams:
        v = self.values
        return self._build(RefinementParams, epsilon=v["epsilon"], lam=v["lambda"],
                           eps_n=v["eps_n"], robust=v["robust"],
                           robust_scale=v["robust_scale"],
                           max_iterations=v["max_iterations"],
                           convergence_tol=v["convergence_tol"],
                           hierarchy_levels=v["levels"])

    @property
    def sampling(self) -> SamplingParams:
        return self._build(SamplingParams, d_min=self.values["d_min"],
                           hierarchy_levels=self.values["levels"])

    @property
    def icp(self) -> IcpParams:
        v = self.values
        return self._build(IcpParams, max_iterations=v["icp_max_iterations"],
                           correspondence_radius=v["correspondence_radius"],
                           convergence_tol=v["convergence_tol"],
                           collinearity_tol=v["collinearity_tol"],
                           min_overlap=v["min_overlap"], workers=v["workers"])

    @property
    def merge_angle(self) -> float:
        value = self.values["merge_angle"]
        return self.values["delta_n"] if value is None else value

    @property
    def parallel_angle(self) -> float:
        value = self.values["parallel_angle"]
        return self.values["delta_n"] if value is None else value


# === RESULTS ==================================================================

@dataclass
class DetectionResult:
    cloud: PointCloud
    candidates: List[OppCandidate] = field(default_factory=list)
    graph: PlaneGraph = field(default_factory=PlaneGraph)
    triangles: List[CornerTriangle] = field(default_factory=list)
    bundles: List[ParallelBundle] = field(default_factory=list)
    corners: List[Corner] = field(default_factory=list)
    corner_triangles: List[CornerTriangle] = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def planes(self) -> List[Plane]:
        return list(self.graph.vertices)

    @property
    def lines(self) -> List[Line3D]:
        return [line for _, line in graph_lines(self.graph)]

    def graph_dict(self) -> Dict[str, Any]:
        return graph_to_dict(self.graph, self.bundles, self.triangles)

    def primitives_dict(self) -> Dict[str, Any]:
        return {"planes": [p.as_list() for p in self.planes],
                "lines": [{"edge": list(e), **line.as_dict()}
                          for e, line in graph_lines(self.graph)],
                "corners": [{"planes": list(t.plane_indices), **c.as_dict()}
                            for t, c in zip(self.corner_triangles, self.corners)]}


@dataclass
class RegistrationResult:
    motion: RigidMotion
    constraint: ConstraintClass
    iterations: int
    cost: float
    overlap: float

    def stats_line(self) -> str:
        return "mode={} iterations={} cost={:.6e} overlap={:.3f}".format(
            self.constraint.kind.value, self.iterations, self.cost, self.overlap)


def _cloud(source: Union[str, PointCloud]) -> PointCloud:
    return load_point_cloud(source) if isinstance(source, str) else source


def _with_normals(cloud: PointCloud, config: PipelineConfig) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    logger.info("cloud has no normals, estimating them from %d neighbours",
                config.normal_k)
    return estimate_normals(cloud, k=config.normal_k, workers=config.workers)


# === STAGES ===================================================================

def OrthoCorners(cloud: PointCloud, graph: PlaneGraph,
                 triangles: Sequence[CornerTriangle], params: RefinementParams,
                 workers: int = 1) -> Tuple[List[Corner], List[CornerTriangle]]:
    """
    Refine one corner per triangle. Triangles whose corner lacks support on
    one of its planes are dropped. Corners are independent and may be
    refined on a thread pool.
    """
    def one(triangle):
        planes = [graph.vertices[i] for i in triangle.plane_indices]
        try:
            init, support = initial_corner(planes, cloud, params.epsilon)
            return CornerRefiner(support, init, params).process()
        except (InsufficientSupport, Singular) as e:
            logger.info("corner %s dropped: %s", triangle.plane_indices, e)
            return None

    if workers > 1 and len(triangles) > 1:
        pool = ThreadPool(int(workers))
        results = pool.map(one, triangles)
        pool.close()
        pool.join()
    else:
        results = [one(t) for t in triangles]

    kept = [(t, c) for t, c in zip(triangles, results) if c is not None]
    return [c for _, c in kept], [t for t, _ in kept]


def _refine(cloud: PointCloud, graph: PlaneGraph, bundles: List[ParallelBundle],
            config: PipelineConfig) -> Tuple[PlaneGraph, List[ParallelBundle]]:
    bundles = refine_graph(cloud, bundles, config.refinement, config.sampling)
    refined = bundles_to_planes(bundles, len(graph))
    vertices = tuple(r if r is not None else p for r, p in zip(refined, graph.vertices))
    return PlaneGraph(vertices, graph.edges), bundles


def OrthoDetect(source: Union[str, PointCloud], config: Optional[PipelineConfig] = None,
                refine: bool = True) -> DetectionResult:
    """
    Orthogonal plane pairs, relation graph, parallel bundles, corners and
    point labels of one point cloud.
    """
    config = config or PipelineConfig()
    logger.info("=== ORTHOPLANES DETECT: START ===")
    cloud = _with_normals(_cloud(source), config)
    result = DetectionResult(cloud)

    start = time.perf_counter()
    result.candidates = detect_opps(cloud, config.detection, config.seed,
                                    workers=config.workers)
    result.timings["voting"] = time.perf_counter() - start

    clusters = cluster_candidates(result.candidates, config.merge_dist,
                                  config.merge_angle, config.min_support)
    graph = build_graph(clusters, result.candidates, config.detection,
                        config.merge_dist)
    result.triangles = enumerate_triangles(graph)
    bundles = reduce_parallel(graph, config.parallel_angle, config.merge_dist)

    start = time.perf_counter()
    if refine and bundles:
        graph, bundles = _refine(cloud, graph, bundles, config)
    result.graph, result.bundles = graph, bundles
    result.corners, result.corner_triangles = OrthoCorners(
        cloud, graph, result.triangles, config.refinement, config.workers)
    result.timings["refinement"] = time.perf_counter() - start

    result.labels = label_points(cloud, bundles, config.dist_tol, config.eps_n)
    logger.info("%d planes, %d edges, %d corners", len(graph), len(graph.edges),
                len(result.corners))
    logger.info("=== ORTHOPLANES DETECT: DONE ===")
    return result


def OrthoRefine(source: Union[str, PointCloud], graph_content: Dict[str, Any],
                config: Optional[PipelineConfig] = None) -> DetectionResult:
    """Refine a previously detected graph (graph JSON content) on a cloud."""
    config = config or PipelineConfig()
    logger.info("=== ORTHOPLANES REFINE: START ===")
    cloud = _with_normals(_cloud(source), config)
    graph = graph_from_dict(graph_content)
    bundles = bundles_from_dict(graph_content) or reduce_parallel(
        graph, config.parallel_angle, config.merge_dist)
    if sum(len(m) for b in bundles for m in b.members) != len(graph):
        raise Malformed("bundles do not cover the graph vertices")

    result = DetectionResult(cloud)
    result.triangles = enumerate_triangles(graph)
    start = time.perf_counter()
    result.graph, result.bundles = _refine(cloud, graph, bundles, config)
    result.corners, result.corner_triangles = OrthoCorners(
        cloud, result.graph, result.triangles, config.refinement, config.workers)
    result.timings["refinement"] = time.perf_counter() - start
    result.labels = label_points(cloud, result.bundles, config.dist_tol, config.eps_n)
    logger.info("=== ORTHOPLANES REFINE: DONE ===")
    return result


def corners_from_dict(content: Dict[str, Any]) -> List[Corner]:
    try:
        return [Corner(c["frame"], c["offsets"]) for c in content["corners"]]
    except (KeyError, TypeError, ValueError) as e:
        raise Malformed("not a corner list: {}".format(e))


def OrthoRegister(source: Union[str, PointCloud], target: Union[str, PointCloud],
                  config: Optional[PipelineConfig] = None,
                  src_corners: Optional[Sequence[Corner]] = None,
                  dst_corners: Optional[Sequence[Corner]] = None,
                  init: Optional[RigidMotion] = None) -> RegistrationResult:
    """
    Motion that maps source onto target. Corners are detected when not
    given; their matches decide how many degrees of freedom ICP keeps.
    """
    config = config or PipelineConfig()
    logger.info("=== ORTHOPLANES REGISTER: START ===")
    src = _with_normals(_cloud(source), config)
    dst = _with_normals(_cloud(target), config)
    if src_corners is None:
        src_corners = OrthoDetect(src, config).corners
    if dst_corners is None:
        dst_corners = OrthoDetect(dst, config).corners

    matches = match_corners(src_corners, dst_corners, coarse=init,
                            max_distance=config.corner_distance,
                            angle_tol=config.delta_n)
    solver = IcpSolver(src, dst, matches, config.icp, init)
    motion = solver.process()
    result = RegistrationResult(motion, solver.constraint, solver.iterations,
                                solver.cost_history[-1], solver.overlap(motion))
    logger.info(result.stats_line())
    logger.info("=== ORTHOPLANES REGISTER: DONE ===")
    return result


def OrthoSynth(spec: SyntheticSpec) -> Tuple[PointCloud, GroundTruth]:
    logger.info("=== ORTHOPLANES SYNTH: START ===")
    out = generate_synthetic_scene(spec)
    logger.info("=== ORTHOPLANES SYNTH: DONE ===")
    return out


def detected_primitives(content: Dict[str, Any]) -> Tuple[List[Plane], List[Line3D]]:
    """Planes and lines from a primitives or graph JSON document."""
    try:
        rows = content["planes"] if "planes" in content else content["vertices"]
        planes = [Plane(r[:3], r[3]) for r in rows]
        lines = [Line3D(l["direction"], l["anchor"]) for l in content.get("lines", [])]
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise Malformed("no planes found in detection output: {}".format(e))
    return planes, lines


def OrthoEvaluate(detected: Dict[str, Any], truth: GroundTruth,
                  config: Optional[PipelineConfig] = None) -> Dict[str, DetectionReport]:
    config = config or PipelineConfig()
    logger.info("=== ORTHOPLANES EVALUATE: START ===")
    planes, lines = detected_primitives(detected)
    reports = {"planes": evaluate_planes(planes, truth, config.angle_tol, config.dist_tol)}
    if truth.lines:
        reports["lines"] = evaluate_lines(lines, truth, config.dist_tol)
    logger.info("=== ORTHOPLANES EVALUATE: DONE ===")
    return reports


def OrthoBench(config: Optional[PipelineConfig] = None,
               layouts: Sequence[Layout] = (Layout.CORNER_ROOM, Layout.BOX),
               seeds: Sequence[int] = (0, 1, 2), sigma: float = 0.003,
               density: float = 5e3) -> pd.DataFrame:
    """Voting and refinement times [ms] on synthetic scenes."""
    config = config or PipelineConfig()
    rows = []
    for layout in layouts:
        for seed in seeds:
            cloud, _ = generate_synthetic_scene(SyntheticSpec(
                layout, points_per_m2=density, noise_sigma=sigma, seed=seed))
            result = OrthoDetect(cloud, config.override(seed=seed))
            rows.append({"layout": Layout(layout).value, "seed": seed,
                         "points": len(cloud), "planes": len(result.graph),
                         "corners": len(result.corners),
                         "voting_ms": 1e3 * result.timings["voting"],
                         "refinement_ms": 1e3 * result.timings["refinement"]})
    return pd.DataFrame(rows, columns=["layout", "seed", "points", "planes", "corners",
                                       "voting_ms", "refinement_ms"])
