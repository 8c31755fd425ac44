"""Pose-only sparse patch bundle adjustment.

Patches are anchored at valid depth pixels of their host frame; their
inverse depths stay fixed and only the camera poses move.  The residual of
edge ``(k, j)`` is ``proj(T_ji * unproj(P_k)) - (obs_kj + delta_kj)``
weighted by the per-edge confidence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import DegenerateGeometry, InsufficientConstraints
from ..geometry import Intrinsics, Pose, skew
from .dense import DbaConfig, _solve_spd

MIN_EDGES_PER_FRAME = 6


@dataclass
class PatchGraph:
    patch_frames: np.ndarray       # (K,) host frame index
    patch_pixels: np.ndarray       # (K, 2)
    patch_inv_depth: np.ndarray    # (K,) fixed, > 0
    edges: np.ndarray              # (E, 2) -> (patch k, target frame j)
    observations: np.ndarray       # (E, 2) observed patch centres in frame j
    deltas: Optional[np.ndarray] = None   # (E, 2) patch updates
    weights: Optional[np.ndarray] = None  # (E, 2) diagonal confidence

    def __post_init__(self):
        self.patch_frames = np.asarray(self.patch_frames, int).reshape(-1)
        self.patch_pixels = np.asarray(self.patch_pixels, float).reshape(-1, 2)
        self.patch_inv_depth = np.asarray(self.patch_inv_depth, float).reshape(-1)
        self.edges = np.asarray(self.edges, int).reshape(-1, 2)
        self.observations = np.asarray(self.observations, float).reshape(-1, 2)
        n_e = len(self.edges)
        self.deltas = np.zeros((n_e, 2)) if self.deltas is None else np.asarray(self.deltas, float).reshape(n_e, 2)
        if self.weights is None:
            self.weights = np.ones((n_e, 2))
        else:
            w = np.asarray(self.weights, float)
            self.weights = np.repeat(w.reshape(n_e, 1), 2, axis=1) if w.size == n_e else w.reshape(n_e, 2)
        if np.any(self.patch_inv_depth <= 0):
            raise ValueError("patch inverse depths must be positive")
        if n_e and (self.edges[:, 0].min() < 0 or self.edges[:, 0].max() >= len(self.patch_frames)):
            raise ValueError("edge references a missing patch")

    def targets(self) -> np.ndarray:
        return self.observations + self.deltas


def _edge_terms(graph: PatchGraph, poses: Sequence[Pose], k: Intrinsics, jac: bool):
    kk = graph.edges[:, 0]
    tgt = graph.edges[:, 1]
    host = graph.patch_frames[kk]
    px = graph.patch_pixels[kk]
    d = graph.patch_inv_depth[kk]
    q = np.stack([(px[:, 0] - k.cx) / k.fx, (px[:, 1] - k.cy) / k.fy, np.ones(len(kk))], axis=1) / d[:, None]
    n_e = len(kk)
    p_j = np.zeros((n_e, 3))
    rmats = np.zeros((n_e, 3, 3))
    w2c = [p.inverse() for p in poses]
    for e in range(n_e):
        rel = w2c[tgt[e]] @ poses[host[e]]
        rmats[e] = rel.rotation
        p_j[e] = rel.rotation @ q[e] + rel.translation
    z = p_j[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    pred = np.stack([k.fx * p_j[:, 0] / zs + k.cx, k.fy * p_j[:, 1] / zs + k.cy], axis=1)
    sw = np.sqrt(graph.weights)
    r = np.where(ok[:, None], (pred - graph.targets()) * sw, 0.0)
    if not jac:
        return r, None, ok
    jp = np.zeros((n_e, 2, 3))
    jp[:, 0, 0] = k.fx / zs
    jp[:, 0, 2] = -k.fx * p_j[:, 0] / zs ** 2
    jp[:, 1, 1] = k.fy / zs
    jp[:, 1, 2] = -k.fy * p_j[:, 1] / zs ** 2
    jp *= sw[:, :, None]
    jp[~ok] = 0.0
    n_f = len(poses)
    jac_full = np.zeros((n_e, 2, 6 * n_f))
    j_tgt = np.concatenate([jp, -jp @ skew(p_j)], axis=2)
    jpr = jp @ rmats
    j_host = np.concatenate([-jpr, jpr @ skew(q)], axis=2)
    for e in range(n_e):
        if host[e] == tgt[e]:
            continue
        jac_full[e, :, 6 * tgt[e]:6 * tgt[e] + 6] += j_tgt[e]
        jac_full[e, :, 6 * host[e]:6 * host[e] + 6] += j_host[e]
    return r, jac_full, ok


def pose_only_residuals(graph: PatchGraph, poses: Sequence[Pose], k: Intrinsics) -> np.ndarray:
    return _edge_terms(graph, poses, k, jac=False)[0]


def pose_only_jacobian(graph: PatchGraph, poses: Sequence[Pose], k: Intrinsics) -> np.ndarray:
    return _edge_terms(graph, poses, k, jac=True)[1]


def _check_constraints(graph: PatchGraph, n_frames: int, fixed: int = 0) -> None:
    host = graph.patch_frames[graph.edges[:, 0]]
    tgt = graph.edges[:, 1]
    cross = host != tgt
    for f in range(n_frames):
        if f == fixed:
            continue
        n = int(np.sum(cross & ((host == f) | (tgt == f))))
        if n < MIN_EDGES_PER_FRAME:
            raise InsufficientConstraints(
                f"frame {f} has {n} edges; at least {MIN_EDGES_PER_FRAME} are needed")


def solve_pose_only(graph: PatchGraph, poses: Sequence[Pose], k: Intrinsics,
                    config: Optional[DbaConfig] = None) -> list:
    """Refine camera-to-world ``poses`` with patch depths held fixed.

    ``poses[0]`` is the gauge and never moves.
    """
    cfg = config or DbaConfig()
    poses = list(poses)
    n_f = len(poses)
    if len(graph.edges) and graph.edges[:, 1].max() >= n_f:
        raise ValueError("edge references a missing frame")
    _check_constraints(graph, n_f)
    r, jac, ok = _edge_terms(graph, poses, k, jac=True)
    cost = float(np.sum(r ** 2))
    lam = cfg.damping
    it = 0
    while cost > cfg.abs_cost_tol and it < cfg.max_iters:
        it += 1
        jm = jac.reshape(-1, 6 * n_f)[:, 6:]
        h = jm.T @ jm
        g = jm.T @ r.reshape(-1)
        a = h + lam * np.diag(np.diag(h))
        try:
            dx = _solve_spd(a, -g)
        except DegenerateGeometry:
            lam *= 10
            continue
        cand = [poses[0]] + [
            poses[f].inverse().perturb_left(dx[6 * (f - 1):6 * f]).inverse() for f in range(1, n_f)]
        r_new, _, ok_new = _edge_terms(graph, cand, k, jac=False)
        new_cost = float(np.sum(r_new ** 2)) if np.array_equal(ok_new, ok) else np.inf
        if new_cost <= cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            poses = cand
            r, jac, ok = _edge_terms(graph, poses, k, jac=True)
            cost = float(np.sum(r ** 2))
            lam = max(lam / 10, cfg.min_damping)
            if rel < cfg.tol:
                break
        else:
            lam *= 10
            if lam > cfg.max_damping:
                break
    return poses
