"""Depth, trajectory and image quality metrics."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import EmptyOverlap, SizeMismatch
from ..geometry import Pose

PSNR_CAP = 99.0
INLIER_RATIO = 1.03


def median_align(est: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Scale ``est`` so its median over ``mask`` matches the ground truth."""
    return est * (np.median(gt[mask]) / np.median(est[mask]))


def depth_metrics(est: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None,
                  align: bool = False) -> dict:
    """``absrel`` and inlier ratio at 1.03 over pixels valid in both maps."""
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    if est.shape != gt.shape:
        raise SizeMismatch(f"{est.shape} vs {gt.shape}")
    valid = np.isfinite(est) & np.isfinite(gt) & (est > 0) & (gt > 0)
    if mask is not None:
        valid &= mask
    if not valid.any():
        raise EmptyOverlap("no pixel valid in both depth maps")
    if align:
        est = median_align(est, gt, valid)
    e, g = est[valid], gt[valid]
    ratio = np.maximum(e / g, g / e)
    return {"absrel": float(np.mean(np.abs(e - g) / g)),
            "inlier_ratio": float(np.mean(ratio < INLIER_RATIO)),
            "valid_pixels": int(valid.sum())}


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Similarity ``(s, R, t)`` minimising ``||dst - (s R src + t)||``."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sgn = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2, 2] = -1
    r = u @ sgn @ vt
    var_s = (xs ** 2).sum() / len(src)
    s = float(np.trace(np.diag(d) @ sgn) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - s * r @ mu_s
    return s, r, t


def ate_rmse(est: Sequence[Pose], gt: Sequence[Pose], with_scale: bool = True) -> float:
    """Absolute trajectory RMSE of camera centres after similarity alignment."""
    if len(est) != len(gt):
        raise SizeMismatch("trajectories differ in length")
    if len(est) == 0:
        raise EmptyOverlap("empty trajectory")
    a = np.array([p.translation for p in est])
    b = np.array([p.translation for p in gt])
    if len(est) < 3:
        aligned = a - a.mean(0) + b.mean(0)
    else:
        s, r, t = umeyama(a, b, with_scale)
        aligned = s * a @ r.T + t
    return float(np.sqrt(np.mean(np.sum((aligned - b) ** 2, axis=1))))


def psnr(est: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """PSNR for images in [0, 1], capped at 99 dB."""
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    if est.shape != gt.shape:
        raise SizeMismatch(f"{est.shape} vs {gt.shape}")
    if mask is not None:
        if not mask.any():
            raise EmptyOverlap("empty PSNR mask")
        est, gt = est[mask], gt[mask]
    mse = float(np.mean((est - gt) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


def metrics(est_depth=None, gt_depth=None, *, est_poses=None, gt_poses=None,
            est_image=None, gt_image=None, mask=None, align: bool = False) -> dict:
    """Bundle whichever of depth / trajectory / image metrics are computable."""
    out = {}
    if est_depth is not None and gt_depth is not None:
        out.update(depth_metrics(est_depth, gt_depth, mask, align))
    if est_poses is not None and gt_poses is not None:
        out["ate_rmse"] = ate_rmse(est_poses, gt_poses)
    if est_image is not None and gt_image is not None:
        out["psnr"] = psnr(est_image, gt_image)
    if not out:
        raise EmptyOverlap("nothing to compare")
    return out
