# -*- coding: utf-8 -*
from orthoplanes.geometry import (Corner, DetectionParams, Line3D, OrientedPoint,
                                  Plane, PointCloud)
from orthoplanes.orthoplanes_main import (OrthoBench, OrthoDetect, OrthoEvaluate,
                                          OrthoRefine, OrthoRegister, OrthoSynth,
                                          PipelineConfig)

name = "orthoplanes"
