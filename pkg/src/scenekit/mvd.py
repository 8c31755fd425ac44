"""Multi-view depth chain: filtered correspondences -> dense BA -> completion -> scale.

This is the depth-estimation part of the product line, also reachable on
its own through the ``mvd`` command.  Poses and intrinsics are optional:
without poses the sources are initialised from essential-matrix
decomposition, without intrinsics the solver refines an initial guess.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import Config
from .correspondence import (FlowField, combine_masks, cross_check, decompose_essential,
                             epipole_check, estimate_essential, static_check, triangulate_depths)
from .dba import DbaConfig, DbaProblem, DbaSolution, solve_dba
from .dba.scale import ScaleConfig, recover_scale
from .errors import DegenerateGeometry, InsufficientLandmarks
from .geometry import DepthImage, Intrinsics, Pose
from .scalecov import RbfKernel, complete_depth

logger = logging.getLogger(__name__)


@dataclass
class DepthEstimate:
    ref: int
    sources: list
    depth: DepthImage                 # dense, completed (and rescaled if landmarks given)
    sparse: DepthImage                # solved grid depths placed at full resolution
    solution: DbaSolution
    scale: Optional[float] = None     # local-to-global s; global depth = local / s
    masks: dict = field(default_factory=dict)
    variance: Optional[np.ndarray] = None


def guess_intrinsics(width: int, height: int) -> Intrinsics:
    """Uncalibrated start: focal 1.2 x the longer side, centred principal point."""
    f = 1.2 * max(width, height)
    return Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def correspondence_mask(fwd: FlowField, bwd: Optional[FlowField], k: Intrinsics, cfg: Config,
                        seed: int = 0):
    """Cross, static and epipole checks combined; returns ``(mask, model, parts)``."""
    cp = cfg.correspondence
    parts = {"valid": fwd.validity}
    cc = cross_check(fwd, bwd, cp.cross_threshold) if bwd is not None else fwd.validity
    parts["cross"] = cc
    try:
        model = estimate_essential(fwd, k, k, cp.n_samples, seed, cp.ransac_iters,
                                   cp.static_threshold, mask=cc)
    except DegenerateGeometry:
        logger.debug("essential estimation failed; static and epipole checks skipped")
        return cc, None, parts
    st = static_check(fwd, model, threshold=cp.static_threshold)
    ep = epipole_check(model, k, cp.epipole_radius)
    parts["static"], parts["epipole"] = st, ep
    return combine_masks(cc, st, ep), model, parts


def _grid(h: int, w: int, stride: int):
    vs, us = np.mgrid[0:h:stride, 0:w:stride]
    return us.ravel(), vs.ravel()


def _unposed_init(fwd_list, masks, k: Intrinsics, models):
    """Source poses (camera-to-world, reference at identity) from essential matrices.

    The first source fixes a unit baseline; later sources are rescaled so
    their triangulated median depth agrees with the first.
    """
    h, w = fwd_list[0].shape
    kinv = np.linalg.inv(k.matrix())
    poses, ref_median = [], None
    for fwd, m, model in zip(fwd_list, masks, models):
        if model is None:
            raise DegenerateGeometry("no essential matrix for an unposed source")
        sel = np.flatnonzero((m & fwd.validity).ravel())
        if len(sel) < 8:
            raise DegenerateGeometry("too few filtered correspondences to initialise")
        src = np.c_[sel % w, sel // w, np.ones(len(sel))]
        dst = src[:, :2] + fwd.offsets.reshape(-1, 2)[sel]
        ni = (src @ kinv.T)[:, :2]
        nj = (np.c_[dst, np.ones(len(dst))] @ kinv.T)[:, :2]
        rel = decompose_essential(model.essential, ni, nj)
        z, _ = triangulate_depths(ni, nj, rel.rotation, rel.translation)
        z = z[np.isfinite(z) & (z > 0)]
        if len(z) == 0:
            raise DegenerateGeometry("triangulation produced no positive depth")
        med = float(np.median(z))
        if ref_median is None:
            ref_median = med
        else:
            rel = Pose(rel.quat, rel.translation * ref_median / med)
        poses.append(rel.inverse())
    return poses, ref_median


def sparse_from_solution(sol: DbaSolution, shape, stride: int, max_rms: float) -> DepthImage:
    h, w = shape
    us, vs = _grid(h, w, stride)
    ok = (sol.solved & (sol.pixel_rms < max_rms) & (sol.inv_depth > 0)).ravel()
    depth = sol.depth.ravel()
    vals = np.zeros((h, w))
    valid = np.zeros((h, w), bool)
    vals[vs[ok], us[ok]] = depth[ok]
    valid[vs[ok], us[ok]] = True
    return DepthImage(vals, valid)


def _prior_level(pv: np.ndarray, good: np.ndarray, landmarks) -> Optional[float]:
    """Factor ``c`` such that ``c / prior`` matches landmark inverse depths (median)."""
    h, w = pv.shape
    ratios = []
    for (u, v), z in landmarks:
        ui, vi = int(round(u)), int(round(v))
        if 0 <= ui < w and 0 <= vi < h and good[vi, ui] and z > 0:
            ratios.append(pv[vi, ui] / z)
    return float(np.median(ratios)) if ratios else None


def estimate_depth(ref: int, sources: Sequence[int], flows: dict, k: Intrinsics, cfg: Config,
                   poses: Optional[dict] = None, prior: Optional[DepthImage] = None,
                   optimize_intrinsics: bool = False, optimize_poses: bool = True,
                   landmarks: Optional[list] = None) -> DepthEstimate:
    """Run the chain for reference ``ref`` against ``sources``.

    ``flows[(a, b)]`` holds the flow from frame ``a`` to ``b``; both
    directions are used when present.  ``poses`` maps frame id to
    camera-to-world pose; when ``None`` poses are initialised unposed.
    ``landmarks`` (``[((u, v), z), ...]`` in the global scale) trigger
    scale recovery on the completed depth.
    """
    if not sources:
        raise ValueError("need at least one source frame")
    fwd = [flows[(ref, j)] for j in sources]
    h, w = fwd[0].shape
    masks, models, parts = [], [], {}
    for n, j in enumerate(sources):
        m, model, p = correspondence_mask(fwd[n], flows.get((j, ref)), k, cfg, cfg.seed + n)
        masks.append(m)
        models.append(model)
        parts[j] = p
    if poses is None:
        src_poses, med = _unposed_init(fwd, masks, k, models)
        init_poses = [Pose.identity()] + src_poses
        inv0 = 1.0 / med
    else:
        init_poses = [poses[ref]] + [poses[j] for j in sources]
        inv0 = 1.0
    if prior is not None:
        pv = prior.values
        good = prior.validity & (pv > 0)
        if good.any():
            # keep the prior's shape, match its level to the current scale guess
            lvl = _prior_level(pv, good, landmarks) if landmarks else None
            if lvl is None:
                lvl = np.median(pv[good]) * inv0 if poses is None else 1.0
            inv0 = np.where(good, lvl / np.where(good, pv, 1.0), inv0)
    dp = cfg.dba
    problem = DbaProblem.from_flows(fwd, k, init_poses, inv0, masks, dp.stride,
                                    optimize_poses=optimize_poses,
                                    optimize_intrinsics=optimize_intrinsics)
    sol = solve_dba(problem, DbaConfig(max_iters=dp.max_iters, damping=dp.damping, tol=dp.tol))
    sparse = sparse_from_solution(sol, (h, w), dp.stride, dp.max_pixel_rms)
    if not sparse.validity.any():
        raise DegenerateGeometry("dense BA solved no reference pixel")
    prior_img = prior if prior is not None else DepthImage(np.ones((h, w)), np.ones((h, w), bool))
    sc = cfg.scalecov
    post = complete_depth(sparse, prior_img, RbfKernel(sc.length_scale, sc.variance), sc.sigma_n,
                          sc.n_obs_max, seed=cfg.seed)
    depth = post.depth
    scale = None
    if landmarks:
        sp = cfg.scale
        try:
            scale = recover_scale(landmarks, depth, ScaleConfig(sp.ransac_iters, sp.inlier_tol, cfg.seed))
        except InsufficientLandmarks:
            logger.debug("frame %d: too few landmarks for scale recovery", ref)
        if scale is not None:
            depth = DepthImage(depth.values / scale, depth.validity)
    return DepthEstimate(ref, list(sources), depth, sparse, sol, scale, parts, post.variance)
