"""Ground-truth rendering: ray-cast depth, textured colour, dense flow."""

from __future__ import annotations

import logging

import numpy as np

from ..correspondence import FlowField
from ..errors import IndexOutOfRange
from ..geometry import ColorImage, DepthImage, Frame, Intrinsics, Pose, pixel_grid
from .scene import SceneSpec

logger = logging.getLogger(__name__)

OCCLUSION_TOL = 1e-4


def camera_rays(k: Intrinsics, uv: np.ndarray) -> np.ndarray:
    """Camera-space ray directions with unit z, so hit parameter == depth."""
    return np.stack([(uv[..., 0] - k.cx) / k.fx, (uv[..., 1] - k.cy) / k.fy,
                     np.ones(uv.shape[:-1])], axis=-1)


def cast(scene: SceneSpec, pose: Pose, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Depth (metres along camera z) and hit primitive index for pixels ``uv``."""
    d_cam = camera_rays(scene.intrinsics, uv)
    d = d_cam @ pose.rotation.T
    o = pose.translation
    if any(p.contains(o) for p in scene.primitives):
        return np.zeros(uv.shape[:-1]), np.full(uv.shape[:-1], -1)
    best = np.full(uv.shape[:-1], np.inf)
    label = np.full(uv.shape[:-1], -1)
    for i, prim in enumerate(scene.primitives):
        t = prim.intersect(o, d)
        closer = t < best
        best = np.where(closer, t, best)
        label = np.where(closer, i, label)
    return np.where(np.isfinite(best), best, 0.0), label


def camera_inside(scene: SceneSpec, pose: Pose) -> bool:
    return any(p.contains(pose.translation) for p in scene.primitives)


def render_pose(scene: SceneSpec, pose: Pose, frame_id: int = 0) -> Frame:
    k = scene.intrinsics
    uv = pixel_grid(k.height, k.width)
    if camera_inside(scene, pose):
        logger.warning("camera %d is inside scene geometry; depth is all-invalid", frame_id)
    depth, _ = cast(scene, pose, uv)
    valid = depth > 0
    pts_world = (camera_rays(k, uv) * depth[..., None]) @ pose.rotation.T + pose.translation
    color = scene.texture()(pts_world)
    color = np.where(valid[..., None], color, 0.0)
    return Frame(frame_id, ColorImage(np.clip(color, 0.0, 1.0)), DepthImage(depth, valid), pose, k)


def render_frame(scene: SceneSpec, index: int) -> Frame:
    """Render frame ``index`` of the scene trajectory (all ground truth)."""
    if not 0 <= index < len(scene.trajectory):
        raise IndexOutOfRange(f"frame {index} outside trajectory of {len(scene.trajectory)}")
    return render_pose(scene, scene.trajectory[index], index)


def render_labels(scene: SceneSpec, index: int) -> np.ndarray:
    k = scene.intrinsics
    _, label = cast(scene, scene.trajectory[index], pixel_grid(k.height, k.width))
    return label


def flow_between(scene: SceneSpec, pose_i: Pose, pose_j: Pose) -> FlowField:
    k = scene.intrinsics
    uv = pixel_grid(k.height, k.width)
    depth, _ = cast(scene, pose_i, uv)
    valid = depth > 0
    p_cam = camera_rays(k, uv) * depth[..., None]
    p_world = p_cam @ pose_i.rotation.T + pose_i.translation
    inv_j = pose_j.inverse()
    p_j = p_world @ inv_j.rotation.T + inv_j.translation
    z = p_j[..., 2]
    front = valid & (z > 1e-9)
    zs = np.where(front, z, 1.0)
    uv_j = np.stack([k.fx * p_j[..., 0] / zs + k.cx, k.fy * p_j[..., 1] / zs + k.cy], axis=-1)
    inb = (front & (uv_j[..., 0] >= -0.5) & (uv_j[..., 0] <= k.width - 0.5)
           & (uv_j[..., 1] >= -0.5) & (uv_j[..., 1] <= k.height - 0.5))
    # exact visibility: re-cast the ray through the projected sub-pixel position
    d_hit, _ = cast(scene, pose_j, np.where(inb[..., None], uv_j, 0.0))
    visible = inb & (np.abs(d_hit - z) < OCCLUSION_TOL)
    return FlowField(np.where(visible[..., None], uv_j - uv, 0.0), visible)


def ground_truth_flow(scene: SceneSpec, i: int, j: int) -> FlowField:
    """Dense flow frame ``i`` -> frame ``j`` with occlusion-aware validity."""
    for idx in (i, j):
        if not 0 <= idx < len(scene.trajectory):
            raise IndexOutOfRange(f"frame {idx} outside trajectory")
    if i == j:
        k = scene.intrinsics
        depth, _ = cast(scene, scene.trajectory[i], pixel_grid(k.height, k.width))
        return FlowField(np.zeros((k.height, k.width, 2)), depth > 0)
    return flow_between(scene, scene.trajectory[i], scene.trajectory[j])


def prior_depth(scene: SceneSpec, index: int) -> DepthImage:
    """Monocular-style depth prior: per-structure scale distortion of the truth.

    Shapes inside each primitive are preserved while the relative placement
    of structures and the global scale are off, mimicking a single-image
    depth network.
    """
    k = scene.intrinsics
    depth, label = cast(scene, scene.trajectory[index], pixel_grid(k.height, k.width))
    rng = np.random.default_rng(scene.seed + 7919)
    factors = 1.0 + scene.prior_distortion * rng.uniform(-1, 1, size=len(scene.primitives))
    scale = scene.prior_scale * np.where(label >= 0, factors[np.maximum(label, 0)], 1.0)
    return DepthImage.from_array(depth * scale)


def add_flow_noise(flow: FlowField, sigma: float, outlier_fraction: float,
                   rng: np.random.Generator, outlier_magnitude: float = 20.0) -> FlowField:
    off = flow.offsets + rng.normal(0.0, sigma, flow.offsets.shape) if sigma > 0 else flow.offsets.copy()
    if outlier_fraction > 0:
        hit = rng.random(flow.shape) < outlier_fraction
        off = np.where(hit[..., None], off + rng.uniform(-outlier_magnitude, outlier_magnitude,
                                                         off.shape), off)
    return FlowField(off, flow.validity)


def add_depth_noise(depth: DepthImage, sigma: float, rng: np.random.Generator) -> DepthImage:
    if sigma <= 0:
        return depth
    return DepthImage(depth.values + rng.normal(0.0, sigma, depth.shape), depth.validity)
