"""Dense flow containers and the correspondence filters gating dense BA.

A :class:`FlowField` from frame ``i`` to frame ``j`` stores, per pixel of
``i``, the offset to its match so that ``x_j* = x_i + offset``.  Three
filters produce boolean masks over the pixels of ``i``:

* :func:`cross_check`   forward/backward consistency (< 0.5 px),
* :func:`static_check`  squared pixel distance to the epipolar line < 3.84,
* :func:`epipole_check` exclusion disk around an in-image epipole.

Filters combine with a pointwise AND (:func:`combine_masks`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateGeometry, SizeMismatch
from .geometry import Intrinsics, Pose, pixel_grid

FLOW_MAGIC = b"FLW1"
STATIC_THRESHOLD = 3.84  # chi-square, 1 dof, 95 %
CROSS_THRESHOLD = 0.5


@dataclass(frozen=True)
class FlowField:
    offsets: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=float)
        if off.ndim != 3 or off.shape[2] != 2:
            raise ValueError("flow offsets must be H x W x 2")
        valid = np.asarray(self.validity, dtype=bool) & np.all(np.isfinite(off), axis=2)
        if valid.shape != off.shape[:2]:
            raise SizeMismatch("validity shape does not match offsets")
        off = np.where(valid[..., None], off, 0.0)
        off.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "validity", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.validity.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)), np.ones((height, width), bool))

    def targets(self) -> np.ndarray:
        """Matched positions ``x_i + offset`` as an (H, W, 2) array."""
        h, w = self.shape
        return pixel_grid(h, w) + self.offsets

    def with_validity(self, mask: np.ndarray) -> "FlowField":
        return FlowField(self.offsets, self.validity & mask)


def write_flow(path, flow: FlowField) -> None:
    """Write the little-endian ``FLW1`` binary flow format."""
    h, w = flow.shape
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(flow.offsets.astype("<f4").tobytes())
        f.write(flow.validity.astype(np.uint8).tobytes())


def read_flow(path) -> FlowField:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a FLW1 flow file")
    h, w = struct.unpack_from("<II", data, 4)
    n = h * w
    off = np.frombuffer(data, dtype="<f4", count=2 * n, offset=12).reshape(h, w, 2)
    valid = np.frombuffer(data, dtype=np.uint8, count=n, offset=12 + 8 * n).reshape(h, w)
    return FlowField(off.astype(float), valid.astype(bool))


def sample_bilinear(flow: FlowField, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample flow offsets at sub-pixel positions.

    A sample is valid only when it lies inside the image and every
    neighbour carrying non-zero weight is itself valid.
    """
    h, w = flow.shape
    pts = np.asarray(pts, dtype=float)
    u, v = pts[..., 0], pts[..., 1]
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    u0 = np.clip(np.floor(uc).astype(int), 0, w - 1)
    v0 = np.clip(np.floor(vc).astype(int), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    au = uc - u0
    av = vc - v0
    out = np.zeros(pts.shape[:-1] + (2,))
    ok = inside.copy()
    for uu, vv, wt in ((u0, v0, (1 - au) * (1 - av)), (u1, v0, au * (1 - av)),
                       (u0, v1, (1 - au) * av), (u1, v1, au * av)):
        out += wt[..., None] * flow.offsets[vv, uu]
        ok &= (wt == 0) | flow.validity[vv, uu]
    return out, ok


def cross_check(fwd: FlowField, bwd: FlowField, threshold: float = CROSS_THRESHOLD) -> np.ndarray:
    """Forward-backward consistency mask over the pixels of frame ``i``."""
    if fwd.shape != bwd.shape:
        raise SizeMismatch(f"flow shapes differ: {fwd.shape} vs {bwd.shape}")
    h, w = fwd.shape
    xi = pixel_grid(h, w)
    xj = xi + fwd.offsets
    back, ok = sample_bilinear(bwd, xj)
    resid = np.linalg.norm(xi - (xj + back), axis=2)
    return fwd.validity & ok & (resid < threshold)


def combine_masks(*masks: np.ndarray) -> np.ndarray:
    out = np.asarray(masks[0], dtype=bool).copy()
    for m in masks[1:]:
        out &= np.asarray(m, dtype=bool)
    return out


# --------------------------------------------------------------------------
# epipolar geometry

@dataclass(frozen=True)
class EpipolarModel:
    """Essential matrix ``E`` with ``x_j^T E x_i = 0`` in normalised coordinates.

    ``fundamental`` is the pixel-space ``F = K_j^-T E K_i^-1``; ``epipole``
    is its right null vector (the epipole in image ``i``) in pixels, or
    ``None`` when it lies at infinity.
    """

    essential: np.ndarray
    fundamental: np.ndarray
    epipole: Optional[np.ndarray]
    epipole_h: np.ndarray
    inliers: Optional[np.ndarray] = None

    @property
    def epipole_at_infinity(self) -> bool:
        return self.epipole is None


def _normalize_points(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalisation: zero mean, mean distance sqrt(2)."""
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    xh = np.c_[x, np.ones(len(x))] @ t.T
    return xh, t


def _eight_point(xi: np.ndarray, xj: np.ndarray, check_rank: bool = False) -> np.ndarray:
    """Normalised 8-point solve for ``E`` from normalised-camera coordinates."""
    pi, ti = _normalize_points(xi)
    pj, tj = _normalize_points(xj)
    a = np.einsum("ni,nj->nij", pj, pi).reshape(len(xi), 9)
    if len(a) < 9:
        # a reduced SVD of a minimal sample would drop the null vector
        a = np.vstack([a, np.zeros((9 - len(a), 9))])
    _, s, vt = np.linalg.svd(a, full_matrices=False)
    if check_rank and (len(s) < 9 or s[-2] < 1e-9 * s[0]):
        raise DegenerateGeometry("correspondences do not constrain the essential matrix")
    e = vt[-1].reshape(3, 3)
    e = tj.T @ e @ ti
    u, _, vt = np.linalg.svd(e)
    e = u @ np.diag([1.0, 1.0, 0.0]) @ vt
    return e / np.linalg.norm(e)


def _sampson_sq(f: np.ndarray, xi_h: np.ndarray, xj_h: np.ndarray) -> np.ndarray:
    fx = xi_h @ f.T
    ftx = xj_h @ f
    num = np.einsum("ni,ni->n", xj_h, fx) ** 2
    den = fx[:, 0] ** 2 + fx[:, 1] ** 2 + ftx[:, 0] ** 2 + ftx[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


def _fundamental(e: np.ndarray, k_i: Intrinsics, k_j: Intrinsics) -> np.ndarray:
    return np.linalg.inv(k_j.matrix()).T @ e @ np.linalg.inv(k_i.matrix())


def model_from_essential(e: np.ndarray, k_i: Intrinsics, k_j: Intrinsics,
                         inliers: Optional[np.ndarray] = None) -> EpipolarModel:
    f = _fundamental(e, k_i, k_j)
    _, _, vt = np.linalg.svd(f)
    eh = vt[-1]
    scale = np.abs(eh[:2]).max()
    if abs(eh[2]) <= 1e-12 * max(scale, 1e-300):
        ep = None
    else:
        ep = eh[:2] / eh[2]
    return EpipolarModel(e, f, ep, eh, inliers)


def model_from_poses(pose_i: Pose, pose_j: Pose, k_i: Intrinsics, k_j: Intrinsics) -> EpipolarModel:
    """Ground-truth model from camera-to-world poses."""
    rel = pose_j.inverse() @ pose_i  # camera i -> camera j
    r, t = rel.rotation, rel.translation
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    e = tx @ r
    n = np.linalg.norm(e)
    if n == 0:
        raise DegenerateGeometry("zero baseline")
    return model_from_essential(e / n, k_i, k_j)


def estimate_essential(fwd: FlowField, k_i: Intrinsics, k_j: Intrinsics,
                       n_samples: int = 1000, seed: int = 0,
                       ransac_iters: int = 200,
                       threshold_px2: float = STATIC_THRESHOLD,
                       mask: Optional[np.ndarray] = None) -> EpipolarModel:
    """Essential matrix from ``n_samples`` random correspondences.

    RANSAC over minimal 8-point draws scores pixel-space Sampson distance;
    the winning inlier set is refit with the normalised 8-point method.
    Deterministic for a fixed ``seed``.
    """
    rng = np.random.default_rng(seed)
    valid = fwd.validity if mask is None else fwd.validity & mask
    idx = np.flatnonzero(valid.ravel())
    if len(idx) < 8:
        raise DegenerateGeometry(f"only {len(idx)} valid correspondences")
    if len(idx) > n_samples:
        idx = np.sort(rng.choice(idx, size=n_samples, replace=False))
    h, w = fwd.shape
    src = np.c_[idx % w, idx // w].astype(float)
    dst = src + fwd.offsets.reshape(-1, 2)[idx]
    ki_inv = np.linalg.inv(k_i.matrix())
    kj_inv = np.linalg.inv(k_j.matrix())
    src_h = np.c_[src, np.ones(len(src))]
    dst_h = np.c_[dst, np.ones(len(dst))]
    ni = (src_h @ ki_inv.T)[:, :2]
    nj = (dst_h @ kj_inv.T)[:, :2]

    # parallax-free sets (identity motion, pure rotation) leave a 3-d null space
    _eight_point(ni, nj, check_rank=True)

    # MSAC: truncated quadratic cost, so a sloppy model that collects a few
    # more loose inliers cannot beat one that fits the true matches exactly
    best = None
    best_cost = np.inf
    n = len(src)
    for _ in range(ransac_iters):
        pick = rng.choice(n, size=8, replace=False)
        try:
            e = _eight_point(ni[pick], nj[pick])
        except np.linalg.LinAlgError:
            continue
        d2 = _sampson_sq(_fundamental(e, k_i, k_j), src_h, dst_h)
        cost = float(np.minimum(d2, threshold_px2).sum())
        if cost < best_cost:
            best, best_cost = d2 < threshold_px2, cost
    best_count = -1 if best is None else int(best.sum())
    if best_count < 8:
        raise DegenerateGeometry(f"only {max(best_count, 0)} RANSAC inliers")
    e = _eight_point(ni[best], nj[best], check_rank=True)
    # one refinement pass with the refit model
    d2 = _sampson_sq(_fundamental(e, k_i, k_j), src_h, dst_h)
    inl = d2 < threshold_px2
    if inl.sum() >= 8 and not np.array_equal(inl, best):
        e = _eight_point(ni[inl], nj[inl], check_rank=True)
        best = inl
    inlier_mask = np.zeros(h * w, bool)
    inlier_mask[idx[best]] = True
    return model_from_essential(e, k_i, k_j, inlier_mask.reshape(h, w))


def epipolar_distance_sq(fwd: FlowField, model: EpipolarModel) -> np.ndarray:
    """Squared pixel distance of each ``x_j*`` to its epipolar line ``F x_i``."""
    h, w = fwd.shape
    xi = pixel_grid(h, w)
    xj = xi + fwd.offsets
    xi_h = np.concatenate([xi, np.ones((h, w, 1))], axis=2)
    lines = xi_h @ model.fundamental.T
    num = lines[..., 0] * xj[..., 0] + lines[..., 1] * xj[..., 1] + lines[..., 2]
    den = lines[..., 0] ** 2 + lines[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = num ** 2 / den
    return np.where(den > 0, d2, np.inf)


def static_check(fwd: FlowField, model: EpipolarModel, k_i: Optional[Intrinsics] = None,
                 k_j: Optional[Intrinsics] = None,
                 threshold: float = STATIC_THRESHOLD) -> np.ndarray:
    """Keep correspondences whose squared epipolar distance is below 3.84 px².

    ``k_i``/``k_j`` override the intrinsics baked into ``model``.
    """
    if k_i is not None and k_j is not None:
        model = model_from_essential(model.essential, k_i, k_j, model.inliers)
    return fwd.validity & (epipolar_distance_sq(fwd, model) < threshold)


def epipole_check(model: EpipolarModel, k: Intrinsics, radius: float = 40.0) -> np.ndarray:
    """Mask out pixels within ``radius`` of an in-image epipole."""
    h, w = k.height, k.width
    mask = np.ones((h, w), bool)
    ep = model.epipole
    if ep is None:
        return mask
    if not (-0.5 <= ep[0] <= w - 0.5 and -0.5 <= ep[1] <= h - 0.5):
        return mask
    xy = pixel_grid(h, w)
    d = np.hypot(xy[..., 0] - ep[0], xy[..., 1] - ep[1])
    return d >= radius


def decompose_essential(e: np.ndarray, ni: np.ndarray, nj: np.ndarray) -> Pose:
    """Relative pose (camera i -> camera j, unit baseline) with cheirality vote."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    wm = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    best, best_count = None, -1
    for r in (u @ wm @ vt, u @ wm.T @ vt):
        for t in (u[:, 2], -u[:, 2]):
            z_i, z_j = triangulate_depths(ni, nj, r, t)
            c = int(np.sum((z_i > 0) & (z_j > 0)))
            if c > best_count:
                best, best_count = (r, t), c
    return Pose.from_rt(best[0], best[1])


def triangulate_depths(ni: np.ndarray, nj: np.ndarray, r: np.ndarray, t: np.ndarray):
    """Least-squares depth along ray ``i`` for normalised matches.

    Returns depths in camera ``i`` and camera ``j``; non-finite where the
    rays carry no parallax.
    """
    f = np.c_[ni, np.ones(len(ni))] @ r.T
    # mx (f_z z + t_z) = f_x z + t_x,  my (f_z z + t_z) = f_y z + t_y
    a1 = nj[:, 0] * f[:, 2] - f[:, 0]
    b1 = t[0] - nj[:, 0] * t[2]
    a2 = nj[:, 1] * f[:, 2] - f[:, 1]
    b2 = t[1] - nj[:, 1] * t[2]
    den = a1 * a1 + a2 * a2
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (a1 * b1 + a2 * b2) / den
    z = np.where(den > 1e-18, z, np.nan)
    zj = f[:, 2] * z + t[2]
    return z, zj
