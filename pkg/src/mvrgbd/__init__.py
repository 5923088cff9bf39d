"""Multi-view RGB-D diffusion: geometry, generation, and point-cloud extraction."""

from __future__ import annotations

from .dataset import (Box, Dataset, RenderedView, Scene, Sphere, make_rig,
                      normalize_depth, denormalize_depth, random_scene, render,
                      read_dataset, write_dataset)
from .denoiser import Denoiser, DenoiserConfig, noise_loss
from .engine import (Adam, PointCloud, SampleResult, TrainConfig,
                     extract_pointcloud, read_ply, rendered_to_viewset, sample,
                     train, write_ply)
from .errors import MVRGBDError
from .frustum import Aggregator, AggregatorConfig, ViewSet, build_frusta
from .geometry import Camera, camera_from_manifest, camera_to_manifest
from .metrics import (MetricReport, chamfer, compare_viewsets, composite_white,
                      psnr, reprojection_consistency, ssim)
from .schedule import (DepthSampleParams, NoiseSchedule, ScheduleForm,
                       cfg_combine, expected_depth, forward_noise,
                       linear_schedule, sample_depths)

__all__ = [
    "Adam", "Aggregator", "AggregatorConfig", "Box", "Camera", "Dataset",
    "Denoiser", "DenoiserConfig", "DepthSampleParams", "MVRGBDError",
    "MetricReport", "NoiseSchedule", "PointCloud", "RenderedView",
    "SampleResult", "Scene", "ScheduleForm", "Sphere", "TrainConfig",
    "ViewSet", "build_frusta", "camera_from_manifest", "camera_to_manifest",
    "cfg_combine", "chamfer", "compare_viewsets", "composite_white",
    "denormalize_depth", "expected_depth", "extract_pointcloud",
    "forward_noise", "linear_schedule", "make_rig", "noise_loss",
    "normalize_depth", "psnr", "random_scene", "read_dataset", "read_ply",
    "render", "rendered_to_viewset", "reprojection_consistency", "sample",
    "sample_depths", "ssim", "train", "write_dataset", "write_ply",
]
__version__ = "0.1.0"
