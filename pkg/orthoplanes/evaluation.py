#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Evaluation against ground truth: precision/recall of detected planes and
# lines, and per-point plane labels.
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
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from orthoplanes.geometry import Line3D, Plane, PointCloud
from orthoplanes.refinement import assign_points_to_bundles
from orthoplanes.relation_graph import ParallelBundle
from orthoplanes.scene_io import GroundTruth

logger = logging.getLogger(__name__)

LINE_ANGLE_TOL = 10.0

Match = Tuple[int, int, float]


@dataclass
class DetectionReport:
    """precision / recall are None when their denominator is zero."""
    precision: Optional[float]
    recall: Optional[float]
    correct: int
    noise: int
    miss: int
    matches: List[Match] = field(default_factory=list)

    @classmethod
    def from_matches(cls, matches: List[Match], n_detected: int,
                     n_truth: int) -> "DetectionReport":
        correct = len(matches)
        return cls(correct / n_detected if n_detected else None,
                   correct / n_truth if n_truth else None,
                   correct, n_detected - correct, n_truth - correct, matches)

    def as_dict(self) -> Dict[str, Any]:
        return {"precision": self.precision, "recall": self.recall,
                "correct": self.correct, "noise": self.noise, "miss": self.miss,
                "matches": [{"detected": d, "truth": g, "score": s}
                            for d, g, s in self.matches]}


def greedy_match(n_detected: int, n_truth: int,
                 score: Callable[[int, int], Optional[float]]) -> List[Match]:
    """
    One-to-one matching, best (lowest) score first. score returns None for
    pairs that may not match. Ties resolve by detected then truth index.
    """
    pairs = []
    for i in range(n_detected):
        for j in range(n_truth):
            s = score(i, j)
            if s is not None:
                pairs.append((s, i, j))
    pairs.sort()
    used_d, used_g, out = set(), set(), []
    for s, i, j in pairs:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        out.append((i, j, float(s)))
    return sorted(out)


def _truth(gt, attribute: str) -> list:
    return list(getattr(gt, attribute)) if isinstance(gt, GroundTruth) else list(gt)


def evaluate_planes(detected: Sequence[Plane], gt: Union[GroundTruth, Sequence[Plane]],
                    angle_tol: float = 10.0, dist_tol: float = 0.05) -> DetectionReport:
    """
    A detected plane matches a ground-truth plane when the normals differ by
    less than angle_tol [deg] (sign-insensitive) and the offsets, with the
    normals aligned, by less than dist_tol.
    """
    truth = _truth(gt, "planes")
    detected = list(detected)

    def score(i, j):
        g = truth[j]
        p = detected[i].aligned_with(g.normal)
        angle = math.degrees(math.acos(min(float(p.normal @ g.normal), 1.0)))
        dist = abs(p.offset - g.offset)
        if angle < angle_tol and dist < dist_tol:
            return angle / angle_tol + dist / dist_tol
        return None

    report = DetectionReport.from_matches(
        greedy_match(len(detected), len(truth), score), len(detected), len(truth))
    logger.info("plane evaluation: %d correct, %d noise, %d missed",
                report.correct, report.noise, report.miss)
    return report


def line_distance(a: Line3D, b: Line3D) -> float:
    """Larger of the two anchor-to-other-line distances."""
    return max(a.distance_to(b.anchor), b.distance_to(a.anchor))


def evaluate_lines(detected: Sequence[Line3D], gt: Union[GroundTruth, Sequence[Line3D]],
                   dist_tol: float = 0.05,
                   angle_tol: float = LINE_ANGLE_TOL) -> DetectionReport:
    truth = _truth(gt, "lines")
    detected = list(detected)

    def score(i, j):
        angle = detected[i].angle_to(truth[j])
        dist = line_distance(detected[i], truth[j])
        if angle < angle_tol and dist < dist_tol:
            return angle / angle_tol + dist / dist_tol
        return None

    report = DetectionReport.from_matches(
        greedy_match(len(detected), len(truth), score), len(detected), len(truth))
    logger.info("line evaluation: %d correct, %d noise, %d missed",
                report.correct, report.noise, report.miss)
    return report


def label_offsets(bundles: Sequence[ParallelBundle]) -> np.ndarray:
    """First label of every bundle; labels run over all (bundle, distance) pairs."""
    sizes = [len(b) for b in bundles]
    return np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64) if sizes \
        else np.zeros(0, dtype=np.int64)


def label_points(cloud: PointCloud, bundles: Sequence[ParallelBundle],
                 dist_tol: float = 0.05, eps_n: float = 30.0) -> np.ndarray:
    """Integer plane label per point, -1 where no plane is within dist_tol."""
    if not bundles or len(cloud) == 0:
        return np.full(len(cloud), -1, dtype=np.int64)
    a = assign_points_to_bundles(cloud, bundles, eps_n)
    offsets = label_offsets(bundles)
    ok = a.assigned.copy()
    ok[ok] = np.abs(a.residual[ok]) < dist_tol
    labels = np.full(len(cloud), -1, dtype=np.int64)
    labels[ok] = offsets[a.bundle[ok]] + a.index[ok]
    logger.info("labelled %d of %d points", int(np.count_nonzero(ok)), len(cloud))
    return labels


def report_table(reports: Mapping[str, DetectionReport]) -> pd.DataFrame:
    """Pr / Rec / #Cor / Noise / Miss, one row per report."""
    rows = {name: {"Pr": np.nan if r.precision is None else r.precision,
                   "Rec": np.nan if r.recall is None else r.recall,
                   "#Cor": r.correct, "Noise": r.noise, "Miss": r.miss}
            for name, r in reports.items()}
    return pd.DataFrame.from_dict(rows, orient="index",
                                  columns=["Pr", "Rec", "#Cor", "Noise", "Miss"])
