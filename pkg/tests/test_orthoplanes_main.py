import math
from pathlib import Path

import numpy as np
import pytest

from orthoplanes.generic import ConfigError, Io, Malformed
from orthoplanes.geometry import DetectionParams
from orthoplanes.orthoplanes_main import (KEYWORDS, OrthoBench, OrthoDetect,
                                          OrthoEvaluate, OrthoRefine, OrthoRegister,
                                          OrthoSynth, PipelineConfig,
                                          corners_from_dict, detected_primitives)
from orthoplanes.registration import ConstraintKind
from orthoplanes.scene_io import Layout, SyntheticSpec

PAR_FILE = Path(__file__).resolve().parents[1] / "par" / "room.orthoplanes"
FAST = dict(n_refs=300, seed=1)


@pytest.fixture(scope="module")
def noisy_room():
    return OrthoSynth(SyntheticSpec(Layout.CORNER_ROOM, points_per_m2=2500,
                                    noise_sigma=0.003, seed=11))


@pytest.fixture(scope="module")
def detected(noisy_room):
    cloud, _ = noisy_room
    return OrthoDetect(cloud, PipelineConfig(**FAST))


def test_defaults():
    config = PipelineConfig()
    assert set(config.values) == set(KEYWORDS)
    assert config.detection == DetectionParams()
    assert config.refinement.lam == 1e4
    assert config.sampling.d_min is None
    assert config.merge_angle == config.delta_n == 20.0
    assert config.min_support == 3


def test_parameter_file():
    config = PipelineConfig.from_file(str(PAR_FILE))
    assert config.robust == "huber"
    assert config.d_min is None
    assert config.levels == 3 and isinstance(config.levels, int)
    assert config["lambda"] == 1e4


def test_override_keeps_unset_values():
    config = PipelineConfig(delta_n=15).override(seed=4, delta_n=None)
    assert config.delta_n == 15.0 and config.seed == 4
    assert config.override(robust="none").refinement.robust is None


@pytest.mark.parametrize("values", [{"unknown": 1}, {"levels": 2.5}, {"tau_d": "far"}])
def test_bad_values(values):
    with pytest.raises(ConfigError):
        PipelineConfig(**values)


def test_invalid_combination_is_a_config_error():
    with pytest.raises(ConfigError):
        PipelineConfig(delta_n=50).detection
    with pytest.raises(ConfigError):
        PipelineConfig(levels=0).sampling


def test_missing_parameter_file(tmp_path):
    with pytest.raises(Io):
        PipelineConfig.from_file(str(tmp_path / "absent"))


def test_detect_noisy_room(noisy_room, detected):
    _, truth = noisy_room
    reports = OrthoEvaluate(detected.primitives_dict(), truth, PipelineConfig())
    assert reports["planes"].precision == 1.0
    assert reports["planes"].recall == 1.0
    assert reports["lines"].recall == 1.0
    assert len(detected.corners) == 1
    np.testing.assert_allclose(detected.corners[0].position, 0.0, atol=0.01)
    assert set(detected.timings) == {"voting", "refinement"}
    assert detected.labels.shape == (len(detected.cloud),)
    assert np.mean(detected.labels >= 0) > 0.9


def test_refine_stored_graph(noisy_room, detected):
    cloud, truth = noisy_room
    refined = OrthoRefine(cloud, detected.graph_dict(), PipelineConfig(**FAST))
    assert len(refined.planes) == len(detected.planes)
    reports = OrthoEvaluate(refined.graph_dict(), truth)
    assert reports["planes"].recall == 1.0


def test_refine_rejects_inconsistent_bundles(noisy_room, detected):
    cloud, _ = noisy_room
    content = detected.graph_dict()
    content["bundles"] = content["bundles"][:1]
    with pytest.raises(Malformed):
        OrthoRefine(cloud, content)


def test_register_with_given_corners(noisy_room, detected):
    cloud, _ = noisy_room
    result = OrthoRegister(cloud, cloud, PipelineConfig(**FAST),
                           detected.corners, detected.corners)
    assert result.constraint.kind is ConstraintKind.ONE_CORNER_3DOF
    np.testing.assert_allclose(result.motion.as_matrix(), np.eye(4), atol=1e-6)
    assert result.stats_line().startswith("mode=OneCorner3DoF")
    assert result.overlap == 1.0


def test_corners_from_dict(detected):
    corners = corners_from_dict(detected.primitives_dict())
    np.testing.assert_allclose(corners[0].position, detected.corners[0].position)
    with pytest.raises(Malformed):
        corners_from_dict({"planes": []})


def test_detected_primitives():
    planes, lines = detected_primitives({"vertices": [[0, 0, 1, -1]], "edges": []})
    assert len(planes) == 1 and lines == []
    with pytest.raises(Malformed):
        detected_primitives({"lines": []})


def test_bench():
    table = OrthoBench(PipelineConfig(n_refs=100), layouts=(Layout.CORNER_ROOM,),
                       seeds=(0,), density=1000)
    assert list(table.columns) == ["layout", "seed", "points", "planes", "corners",
                                   "voting_ms", "refinement_ms"]
    assert table.loc[0, "layout"] == "CornerRoom"
    assert table.loc[0, "voting_ms"] >= 0.0


def wide_room(seed, sigma=0.003, outliers=0.05):
    return OrthoSynth(SyntheticSpec(Layout.CORNER_ROOM, extent=2.0, points_per_m2=1000,
                                    noise_sigma=sigma, outlier_fraction=outliers,
                                    seed=seed))


def plane_errors(planes, matches, truth):
    """Normal angle [deg] and offset difference of every matched plane."""
    out = []
    for i, j, _ in matches:
        g = truth.planes[j]
        p = planes[i].aligned_with(g.normal)
        out.append((math.degrees(math.acos(min(float(p.normal @ g.normal), 1.0))),
                    abs(p.offset - g.offset)))
    return np.array(out).reshape(-1, 2)


def test_detect_rooms_with_outliers():
    config = PipelineConfig(n_refs=500, seed=1)
    exact = 0
    for seed in range(20):
        cloud, truth = wide_room(seed)
        result = OrthoDetect(cloud, config)
        reports = OrthoEvaluate(result.primitives_dict(), truth, config)
        planes, lines = reports["planes"], reports["lines"]
        errors = plane_errors(result.planes, planes.matches, truth)
        exact += (planes.precision == planes.recall == 1.0
                  and lines.precision == lines.recall == 1.0
                  and bool(np.all(errors[:, 0] < 2.0)))
    assert exact >= 18


def test_detect_noiseless_room_exactly():
    cloud, truth = wide_room(2, sigma=0.0, outliers=0.0)
    result = OrthoDetect(cloud, PipelineConfig(n_refs=500, seed=1))
    for i, j in result.graph.edges:
        assert abs(result.planes[i].normal @ result.planes[j].normal) < 1e-8
    reports = OrthoEvaluate(result.primitives_dict(), truth)
    assert reports["planes"].recall == 1.0
    errors = plane_errors(result.planes, reports["planes"].matches, truth)
    assert np.all(errors[:, 0] < math.degrees(1e-6))
    assert np.all(errors[:, 1] < 1e-6)


def test_refinement_time():
    cloud, _ = wide_room(0)
    result = OrthoDetect(cloud, PipelineConfig(n_refs=500, seed=1))
    assert result.timings["refinement"] < 3.0
