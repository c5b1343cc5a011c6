#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# Command line interface: orthoplanes {detect,refine,register,synth,eval,bench}
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

import argparse
import logging
import os
import sys
import warnings

from typing import List, Optional

import numpy as np

from orthoplanes.generic import Io, Malformed, OrthoError, read_json, write_json
from orthoplanes.orthoplanes_main import (OrthoBench, OrthoDetect, OrthoEvaluate,
                                          OrthoRefine, OrthoRegister, OrthoSynth,
                                          PipelineConfig, corners_from_dict)
from orthoplanes.evaluation import report_table
from orthoplanes.registration import RigidMotion
from orthoplanes.scene_io import (Layout, SyntheticSpec, ground_truth_from_dict,
                                  ground_truth_to_dict, save_point_cloud)

logger = logging.getLogger(__name__)

LAYOUTS = {"corner-room": Layout.CORNER_ROOM, "two-walls": Layout.TWO_WALLS,
           "box": Layout.BOX, "single-plane": Layout.SINGLE_PLANE,
           "noise-ball": Layout.NOISE_BALL}

# flag destination -> parameter keyword
FLAG_KEYWORDS = {
    "delta_n": "delta_n", "tau_d": "tau_d", "n_refs": "n_refs",
    "k_pairs": "k_pairs", "theta_bin": "theta_bin", "rho_bin": "rho_bin",
    "c_max": "c_max", "epsilon": "epsilon", "lam": "lambda", "eps_n": "eps_n",
    "d_min": "d_min", "levels": "levels", "seed": "seed",
    "angle_tol": "angle_tol", "dist_tol": "dist_tol", "workers": "workers",
    "min_overlap": "min_overlap",
}


def _parameters() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("parameters (override the --config file)")
    g.add_argument("--config",    default=None, type=str, help="parameter file (keyword = value)")
    g.add_argument("--delta-n",   default=None, type=float, help="normal tolerance [deg] (20)")
    g.add_argument("--tau-d",     default=None, type=float, help="voting neighbourhood radius [m] (1.0)")
    g.add_argument("--n-refs",    default=None, type=int,   help="number of reference points (1000)")
    g.add_argument("--k-pairs",   default=None, type=int,   help="pairs per reference point (250)")
    g.add_argument("--theta-bin", default=None, type=float, help="accumulator angle bin [deg] (10)")
    g.add_argument("--rho-bin",   default=None, type=float, help="accumulator distance bin [m] (0.08)")
    g.add_argument("--c-max",     default=None, type=int,   help="minimum votes / coplanar pairs (4)")
    g.add_argument("--epsilon",   default=None, type=float, help="corner support radius [m] (0.15)")
    g.add_argument("--lambda",    default=None, type=float, dest="lam", help="orthogonality weight (1e4)")
    g.add_argument("--eps-n",     default=None, type=float, help="normal agreement for assignment [deg] (30)")
    g.add_argument("--d-min",     default=None, type=float, help="sampling distance [m] (bbox/200)")
    g.add_argument("--levels",    default=None, type=int,   help="sampling hierarchy levels (3)")
    g.add_argument("--seed",      default=None, type=int,   help="random seed (0)")
    g.add_argument("--angle-tol", default=None, type=float, help="evaluation angle tolerance [deg] (10)")
    g.add_argument("--dist-tol",  default=None, type=float, help="evaluation/label distance [m] (0.05)")
    g.add_argument("--workers",   default=None, type=int,   help="threads (1)")
    g.add_argument("-o", "--output", default=None, type=str, help="output prefix")
    g.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    g.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _parameters()
    parser = argparse.ArgumentParser(
        prog="orthoplanes",
        description="Orthogonal plane detection, refinement and corner-assisted registration",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("detect", parents=[common], help="detect planes, lines and corners")
    p.add_argument("cloud", type=str, help="PLY point cloud")
    p.add_argument("--no-refine", action="store_true", help="skip graph refinement")

    p = sub.add_parser("refine", parents=[common], help="refine a detected graph")
    p.add_argument("cloud", type=str, help="PLY point cloud")
    p.add_argument("graph", type=str, help="graph JSON written by detect")

    p = sub.add_parser("register", parents=[common], help="register two clouds")
    p.add_argument("source", type=str, help="PLY cloud to move")
    p.add_argument("target", type=str, help="PLY cloud to move onto")
    p.add_argument("--corners", nargs=2, default=None, metavar=("SRC", "DST"),
                   help="primitives JSON files with corners for source and target")
    p.add_argument("--min-overlap", default=None, type=float,
                   help="overlap fraction reported as sufficient (0.3)")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic scene")
    p.add_argument("layout", type=str, choices=sorted(LAYOUTS), help="scene layout")
    p.add_argument("--sigma",    default=0.0, type=float, help="noise along the face normal [m]")
    p.add_argument("--extent",   default=1.0, type=float, help="face edge length [m]")
    p.add_argument("--density",  default=1e4, type=float, help="points per square meter")
    p.add_argument("--outliers", default=0.0, type=float, help="outlier fraction")
    p.add_argument("--ascii", action="store_true", help="write ascii PLY")

    p = sub.add_parser("eval", parents=[common], help="compare detections with ground truth")
    p.add_argument("detected", type=str, help="primitives or graph JSON")
    p.add_argument("truth", type=str, help="ground truth JSON written by synth")

    p = sub.add_parser("bench", parents=[common], help="timings on synthetic scenes")
    p.add_argument("--seeds", default=3, type=int, help="scenes per layout")
    return parser


def configure_logging(verbose: int = 0, quiet: bool = False):
    level = logging.WARNING if quiet else (logging.DEBUG if verbose else logging.INFO)
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
    root.setLevel(level)
    logging.captureWarnings(True)


def _config(args) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    flags = {keyword: getattr(args, dest, None) for dest, keyword in FLAG_KEYWORDS.items()}
    return config.override(**flags)


def _prefix(args, default: str) -> str:
    if args.output:
        return args.output
    return os.path.splitext(os.path.basename(default))[0]


def write_transform(motion: RigidMotion, path: str):
    try:
        np.savetxt(path, motion.as_matrix(), fmt="%.17g")
    except OSError as e:
        raise Io("cannot write {}: {}".format(path, e))


def run_detect(args) -> int:
    config = _config(args)
    result = OrthoDetect(args.cloud, config, refine=not args.no_refine)
    prefix = _prefix(args, args.cloud)
    write_json(prefix + "_graph.json", result.graph_dict())
    write_json(prefix + "_primitives.json", result.primitives_dict())
    save_point_cloud(result.cloud, prefix + "_labels.ply", labels=result.labels)
    return 0


def run_refine(args) -> int:
    config = _config(args)
    result = OrthoRefine(args.cloud, read_json(args.graph), config)
    prefix = _prefix(args, args.cloud)
    content = result.graph_dict()
    content.update(result.primitives_dict())
    write_json(prefix + "_refined.json", content)
    return 0


def run_register(args) -> int:
    config = _config(args)
    src_corners = dst_corners = None
    if args.corners:
        src_corners = corners_from_dict(read_json(args.corners[0]))
        dst_corners = corners_from_dict(read_json(args.corners[1]))
    result = OrthoRegister(args.source, args.target, config, src_corners, dst_corners)
    write_transform(result.motion, _prefix(args, args.source) + "_transform.txt")
    print(result.stats_line())
    return 0


def run_synth(args) -> int:
    config = _config(args)
    spec = SyntheticSpec(LAYOUTS[args.layout], extent=args.extent,
                         points_per_m2=args.density, noise_sigma=args.sigma,
                         outlier_fraction=args.outliers, seed=config.seed)
    cloud, truth = OrthoSynth(spec)
    prefix = args.output or args.layout
    save_point_cloud(cloud, prefix + ".ply", binary=not args.ascii,
                     labels=truth.point_labels)
    write_json(prefix + "_gt.json", ground_truth_to_dict(truth))
    return 0


def run_eval(args) -> int:
    config = _config(args)
    truth = ground_truth_from_dict(read_json(args.truth))
    reports = OrthoEvaluate(read_json(args.detected), truth, config)
    write_json(_prefix(args, args.detected) + "_report.json",
               {name: r.as_dict() for name, r in reports.items()})
    print(report_table(reports).to_string(float_format=lambda v: "{:.3f}".format(v)))
    return 0


def run_bench(args) -> int:
    table = OrthoBench(_config(args), seeds=range(args.seeds))
    print(table.to_csv(sep="\t", index=False, float_format="%.1f"), end="")
    return 0


COMMANDS = {"detect": run_detect, "refine": run_refine, "register": run_register,
            "synth": run_synth, "eval": run_eval, "bench": run_bench}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except OrthoError as e:
        print("{}: {}".format(e.name, e), file=sys.stderr)
    except OSError as e:
        print("{}: {}".format(Io.__name__, e), file=sys.stderr)
    except ValueError as e:
        print("{}: {}".format(Malformed.__name__, e), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
