"""Keypoint-guided self-supervised depth objective.

Dense SIFT descriptor grids, differentiable inverse warping, the keypoint
similarity loss and the full weighted loss stack, verified by directly
optimizing depth maps and camera poses on synthetic multi-view scenes.
"""

from keydepth.image import ImageBuffer, SampleResult, bilinear_sample, gaussian_blur, image_gradient, to_grayscale
from keydepth.geometry import CameraPose, DepthField, Intrinsics, WarpField, compute_warp, se3_exp, se3_log
from keydepth.sift import Descriptor, DescriptorGrid, Keypoint, KeypointSet, compute_dense_grid, compute_descriptor, detect_keypoints, sample_descriptor
from keydepth.losses import ExplainabilityMask, GradientSet, LossBreakdown, LossModes, LossWeights, total_loss
from keydepth.metrics import EvalMetrics, compute_metrics
from keydepth.synth import SceneSample, SceneSpec, make_scene

__all__ = [
    "ImageBuffer", "SampleResult", "bilinear_sample", "gaussian_blur", "image_gradient", "to_grayscale",
    "CameraPose", "DepthField", "Intrinsics", "WarpField", "compute_warp", "se3_exp", "se3_log",
    "Descriptor", "DescriptorGrid", "Keypoint", "KeypointSet",
    "compute_dense_grid", "compute_descriptor", "detect_keypoints", "sample_descriptor",
    "ExplainabilityMask", "GradientSet", "LossBreakdown", "LossModes", "LossWeights", "total_loss",
    "EvalMetrics", "compute_metrics",
    "SceneSample", "SceneSpec", "make_scene",
]
