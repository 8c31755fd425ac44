"""Local-to-global scale recovery from tracked landmarks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InsufficientLandmarks
from ..geometry import DepthImage


@dataclass
class ScaleConfig:
    ransac_iters: int = 256
    inlier_tol: float = 0.05
    seed: int = 0


def landmark_ratios(landmarks: Sequence, estimated: DepthImage) -> np.ndarray:
    """Per-landmark ``estimated / landmark`` depth ratios at valid pixels."""
    h, w = estimated.shape
    ratios = []
    for (u, v), z_l in landmarks:
        ui, vi = int(round(u)), int(round(v))
        if not (0 <= ui < w and 0 <= vi < h) or not z_l > 0:
            continue
        if not estimated.validity[vi, ui]:
            continue
        ratios.append(estimated.values[vi, ui] / z_l)
    return np.asarray(ratios, float)


def consensus(ratios: np.ndarray, s: float, tol: float) -> np.ndarray:
    """Inliers of the model ``z_l / z_est * s = 1``."""
    return np.abs(s / ratios - 1.0) < tol


def recover_scale(landmarks: Sequence, estimated: DepthImage, config: ScaleConfig | None = None) -> float:
    """RANSAC fit of the single scale ``s`` with ``z_landmark / z_est * s = 1``.

    Each hypothesis comes from one landmark (``s = z_est / z_landmark``);
    the largest consensus set (earliest hypothesis on ties) is refit with
    the median of its ratios.
    """
    cfg = config or ScaleConfig()
    ratios = landmark_ratios(landmarks, estimated)
    return scale_from_ratios(ratios, cfg)


def scale_from_ratios(ratios: np.ndarray, cfg: ScaleConfig | None = None) -> float:
    cfg = cfg or ScaleConfig()
    ratios = np.asarray(ratios, float)
    ratios = ratios[np.isfinite(ratios) & (ratios > 0)]
    if len(ratios) < 3:
        raise InsufficientLandmarks(f"{len(ratios)} usable landmarks; at least 3 required")
    rng = np.random.default_rng(cfg.seed)
    picks = rng.integers(0, len(ratios), size=cfg.ransac_iters)
    best, best_count = None, -1
    for i in picks:
        inl = consensus(ratios, ratios[i], cfg.inlier_tol)
        c = int(inl.sum())
        if c > best_count:
            best, best_count = inl, c
    return float(np.median(ratios[best]))
