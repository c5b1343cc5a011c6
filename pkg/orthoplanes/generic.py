#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Generic classes, methods, functions used by more than one processing stage.
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

import json
import logging

from typing import Any, Dict, Iterable, List, Optional

import numpy as np

logger = logging.getLogger(__name__)


# === ERRORS ===================================================================

class OrthoError(Exception):
    """Root of all errors raised by orthoplanes."""

    @property
    def name(self) -> str:
        return type(self).__name__


class EmptyCloud(OrthoError, ValueError):
    pass


class NearParallel(OrthoError, ValueError):
    pass


class ConflictingStructure(OrthoError, ValueError):
    pass


class Singular(OrthoError, ValueError):
    pass


class InsufficientSupport(OrthoError, ValueError):
    pass


class EmptyAssignment(OrthoError, ValueError):
    pass


class TooFewCorners(OrthoError, ValueError):
    pass


class Collinear(OrthoError, ValueError):
    pass


class NoOverlap(OrthoError):
    pass


class TooFewPoints(OrthoError, ValueError):
    pass


class MissingNormals(OrthoError, ValueError):
    pass


class Malformed(OrthoError):
    pass


class Io(OrthoError):
    pass


class ConfigError(OrthoError, ValueError):
    pass


class OrthoWarning(UserWarning):
    pass


class DidNotConverge(OrthoWarning):
    pass


class OrthogonalityViolation(OrthoWarning):
    pass


# === PARAMETER FILES ==========================================================

class ParameterIO(object):
    """
    Reads generic parameter files and makes values available as attributes.

    # read file
    par = ParameterIO('par/room.orthoplanes')

    # access the normal threshold
    par.delta_n

    # everything that was read, in file order
    par.keys
    """

    def __init__(self, pfile):
        """
        Instantiate a new object and set conventions.
        """
        self.pfile   = pfile
        self.comment = "#"
        self.assign  = "="
        self.keys    = []
        self.file_read()

    def __getitem__(self, item):
        attr = getattr(self, item)
        return(attr)

    def __contains__(self, item):
        return item in self.keys

    def as_dict(self) -> Dict[str, Any]:
        return {key: getattr(self, key) for key in self.keys}

    def file_read(self):
        """
        Read parameter file into a list of strings (each line is one entry) and
        parse content into attributes.
        """
        try:
            with open(self.pfile, "r") as myfile:
                inpts_str = myfile.readlines()
        except OSError as e:
            raise Io("cannot read parameter file {}: {}".format(self.pfile, e))

        for line in inpts_str:
            d = self.line2dict(line)
            if d is not None:
                name, valu = list(d.items())[0]
                if name not in self.keys:
                    self.keys.append(name)
                self.__dict__[name] = valu

    def __is_only_comment(self, lin):
        # checks whether line contains nothing but comment
        for c in lin:
            if c != " ":
                return c == self.comment
        return False

    @staticmethod
    def __string2logical(valu):
        # true / false become booleans, anything else is returned unchanged
        if not isinstance(valu, str):
            return valu
        if valu.lower() == "false":
            valu = False
        elif valu.lower() == "true":
            valu = True
        return valu

    def line2dict(self, lin):
        """
        Converts one line of a parameter file into a dictionary. Comments
        are recognised and ignored, float vectors are preserved, logicals
        converted from string.
        """
        if self.__is_only_comment(lin):
            return None

        # Remove possible trailing comment form line
        lin = lin.split(self.comment)[0]

        # Discard lines without value assignment
        if len(lin.split(self.assign)) != 2:
            return None

        name = lin.split(self.assign)[0].strip()
        valu = lin.split(self.assign)[1].strip()
        if not name:
            return None

        # Make a vector if commas are found
        if valu.find(",") > 0:
            try:
                valu = list(map(float, valu.split(",")))
            except ValueError:
                valu = [v.strip() for v in valu.split(",")]
        else:
            try:
                valu = float(valu)
            except ValueError:
                pass

        valu = self.__string2logical(valu)

        return {name: valu}


# === UNION-FIND ===============================================================

class DisjointForest(object):
    """
    Union-find over the integers 0..n-1 with path halving and union by size.
    Set representatives are reported as the smallest member index, so that
    labels do not depend on the order in which unions happened.
    """

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size   = [1] * n

    def __len__(self):
        return len(self.parent)

    def find(self, i: int) -> int:
        parent = self.parent
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(self, i: int, j: int) -> bool:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return False
        if self.size[ri] < self.size[rj]:
            ri, rj = rj, ri
        self.parent[rj] = ri
        self.size[ri] += self.size[rj]
        return True

    def groups(self) -> List[List[int]]:
        """Members of every set, sets ordered by their smallest member."""
        by_root: Dict[int, List[int]] = {}
        for i in range(len(self.parent)):
            by_root.setdefault(self.find(i), []).append(i)
        return sorted(by_root.values(), key=lambda g: g[0])

    def labels(self) -> np.ndarray:
        """Dense set index per element, sets numbered as in groups()."""
        out = np.empty(len(self.parent), dtype=np.int64)
        for k, members in enumerate(self.groups()):
            out[members] = k
        return out


# === SMALL LINEAR ALGEBRA =====================================================

def normalize(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.where(norm > 0, norm, 1.0)


def canonical_sign(n) -> float:
    """
    +1 or -1 such that the first component of sign*n whose magnitude exceeds
    1e-12 is positive (unoriented normals are compared in this orientation).
    """
    for c in np.asarray(n, dtype=np.float64):
        if abs(c) > 1e-12:
            return 1.0 if c > 0 else -1.0
    return 1.0


def skew(w) -> np.ndarray:
    """Cross-product matrix [w]x."""
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0,  -w[2],  w[1]],
                     [w[2],   0.0, -w[0]],
                     [-w[1], w[0],   0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rotation matrix of the rotation vector omega (Rodrigues)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * K @ K)


def rotation_angle(R) -> float:
    """Rotation angle [rad] of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm(np.array([R[2, 1] - R[1, 2],
                                 R[0, 2] - R[2, 0],
                                 R[1, 0] - R[0, 1]])) / 2.0
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


def tangent_basis(n) -> np.ndarray:
    """3x2 orthonormal basis of the plane orthogonal to unit vector n."""
    n = np.asarray(n, dtype=np.float64)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = normalize(np.cross(n, helper))
    b2 = np.cross(n, b1)
    return np.column_stack((b1, b2))


# === JSON =====================================================================

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        obj = float(obj)
        return obj if np.isfinite(obj) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, content: Dict[str, Any]):
    """
    Write content as JSON with sorted keys. Equal content always yields a
    byte-identical file.
    """
    try:
        with open(path, "w") as f:
            json.dump(_jsonable(content), f, indent=1, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise Io("cannot write {}: {}".format(path, e))
    logger.debug("wrote %s", path)


def read_json(path) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except OSError as e:
        raise Io("cannot read {}: {}".format(path, e))
    except ValueError as e:
        raise Malformed("{} is not valid JSON: {}".format(path, e))


def as_points(values: Optional[Iterable]) -> np.ndarray:
    """(N,3) float array from anything array-like; empty input gives (0,3)."""
    if values is None:
        return np.zeros((0, 3))
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3))
    return arr.reshape(-1, 3)
