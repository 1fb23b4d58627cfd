"""Refine a coarse 3-DoF ground-camera pose against a satellite tile by
projecting tile features into the ground view through a ground-plane
homography and minimizing feature residuals with a coarse-to-fine damped
Levenberg-Marquardt solver."""

from .features import (FeatureExtractor, FeatureMap, FeaturePyramid,
                       Grad3Extractor, Poly3Extractor, default_extractor,
                       extract_pyramid)
from .geometry import (CameraModel, DegenerateViewError, Pose3DoF,
                       SatelliteFrame, ground_to_satellite,
                       jacobian_pixel_wrt_pose, pose_to_rt,
                       satellite_to_ground)
from .metrics import (AggregateReport, PoseError, RecallTable,
                      aggregate_report, decompose_error, recall,
                      wrap_angle_deg)
from .sampler import (ProjectedFeatures, bilinear_gradient, bilinear_sample,
                      project_features)
from .solver import (LMConfig, RankDeficientError, ResidualSystem, SolveTrace,
                     build_residual_system, lm_step, pose_supervision_loss,
                     refine_pose, solve_coarse_to_fine, solve_level)
from .synth import (GroundRender, SynthScene, Trial, make_satellite_texture,
                    make_scene, make_trial_set, render_ground_view)

__version__ = "0.1.0"

__all__ = [
    "AggregateReport", "CameraModel", "DegenerateViewError",
    "FeatureExtractor", "FeatureMap", "FeaturePyramid", "Grad3Extractor",
    "GroundRender", "LMConfig", "Pose3DoF", "PoseError", "ProjectedFeatures",
    "Poly3Extractor", "RankDeficientError", "RecallTable", "ResidualSystem",
    "SatelliteFrame", "SolveTrace", "SynthScene", "Trial", "aggregate_report",
    "bilinear_gradient", "bilinear_sample", "build_residual_system",
    "decompose_error", "default_extractor", "extract_pyramid",
    "ground_to_satellite",
    "jacobian_pixel_wrt_pose", "lm_step", "make_satellite_texture",
    "make_scene", "make_trial_set", "pose_supervision_loss", "pose_to_rt",
    "project_features", "recall", "refine_pose", "render_ground_view",
    "satellite_to_ground", "solve_coarse_to_fine", "solve_level",
    "wrap_angle_deg",
]
