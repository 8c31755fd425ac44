"""Synthetic scenes and evaluation metrics used by the oracle tests."""

from .generate import generate_dataset
from .metrics import ate_rmse, depth_metrics, median_align, metrics, psnr, umeyama
from .render import (add_depth_noise, add_flow_noise, camera_inside, cast, flow_between,
                     ground_truth_flow, prior_depth, render_frame, render_pose)
from .scene import (Box, NoiseSpec, Plane, Room, SceneSpec, Sphere, ValueNoise, default_room,
                    line_trajectory, load_scene_spec, look_at)

__all__ = [
    "Box", "NoiseSpec", "Plane", "Room", "SceneSpec", "Sphere", "ValueNoise",
    "add_depth_noise", "add_flow_noise", "ate_rmse", "camera_inside", "cast",
    "default_room", "depth_metrics", "flow_between", "generate_dataset",
    "ground_truth_flow", "line_trajectory", "load_scene_spec", "look_at",
    "median_align", "metrics", "prior_depth", "psnr", "render_frame", "render_pose",
    "umeyama",
]
