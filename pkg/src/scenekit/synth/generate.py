"""Write a synthetic scene as a dataset directory."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..dataset import (frame_name, write_depth_png, write_flow_file, write_frame,
                       write_intrinsics, write_poses)
from .render import add_depth_noise, add_flow_noise, ground_truth_flow, prior_depth, render_frame
from .scene import SceneSpec


def generate_dataset(scene: SceneSpec, out, flow_gap: int = 3, write_prior: bool = True,
                     sparse_fraction: float = 0.0) -> Path:
    """Render every trajectory frame plus flows between frames up to ``flow_gap`` apart.

    ``sparse_fraction`` > 0 also writes ``sparse/`` depth keeping that
    fraction of the valid pixels.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(scene.seed)
    n = len(scene)
    poses = {}
    for i in range(n):
        frame = render_frame(scene, i)
        depth = add_depth_noise(frame.depth, scene.noise.depth_sigma, rng)
        write_frame(out, frame.__class__(i, frame.color, depth))
        poses[i] = frame.pose
        if write_prior:
            (out / "prior").mkdir(exist_ok=True)
            write_depth_png(out / "prior" / f"{frame_name(i)}.png", prior_depth(scene, i).values)
        if sparse_fraction > 0:
            (out / "sparse").mkdir(exist_ok=True)
            keep = depth.validity & (rng.random(depth.shape) < sparse_fraction)
            write_depth_png(out / "sparse" / f"{frame_name(i)}.png", np.where(keep, depth.values, 0.0))
    write_poses(out / "poses.txt", poses)
    write_intrinsics(out / "intrinsics.txt", scene.intrinsics)
    for i in range(n):
        for j in range(max(0, i - flow_gap), min(n, i + flow_gap + 1)):
            if i == j:
                continue
            flow = ground_truth_flow(scene, i, j)
            if scene.noise.flow_sigma > 0 or scene.noise.outlier_fraction > 0:
                flow = add_flow_noise(flow, scene.noise.flow_sigma, scene.noise.outlier_fraction, rng)
            write_flow_file(out, i, j, flow)
    return out
