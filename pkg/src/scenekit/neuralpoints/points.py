"""Multi-resolution neural point sets: allocation and feature encoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyLevel
from .mlp import Mlp

FEATURE_STD = 0.01


@dataclass
class NeuralPointLevel:
    resolution: float
    feature_dim: int = 8
    positions: np.ndarray = None
    features: np.ndarray = None
    t_a: float = None
    sigma: float = None
    tree: Optional[cKDTree] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.positions is None:
            self.positions = np.zeros((0, 3))
        if self.features is None:
            self.features = np.zeros((0, self.feature_dim))
        if self.t_a is None:
            self.t_a = self.resolution / 2.0
        if self.sigma is None:
            self.sigma = (self.resolution / 2.0) ** 2
        self._reindex()

    def __len__(self) -> int:
        return len(self.positions)

    def _reindex(self) -> None:
        self.tree = cKDTree(self.positions) if len(self.positions) else None

    def append(self, positions: np.ndarray, features: np.ndarray) -> None:
        if len(positions) == 0:
            return
        self.positions = np.vstack([self.positions, positions])
        self.features = np.vstack([self.features, features])
        self._reindex()

    def nearest_distance(self, pts: np.ndarray) -> np.ndarray:
        if self.tree is None:
            return np.full(len(pts), np.inf)
        return self.tree.query(pts, k=1)[0]

    def neighbors(self, pts: np.ndarray, k: int):
        """``(distances, indices)`` of shape ``(N, min(k, len))``."""
        if self.tree is None:
            raise EmptyLevel(f"level with resolution {self.resolution} has no points")
        kk = min(k, len(self))
        d, i = self.tree.query(pts, k=kk)
        if kk == 1:
            d, i = d[:, None], i[:, None]
        return d, i


def voxel_representatives(points: np.ndarray, size: float) -> np.ndarray:
    """Indices of the first point falling into each occupied voxel, in input order."""
    if len(points) == 0:
        return np.zeros(0, int)
    keys = np.floor(points / size).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


def interpolation_weights(d: np.ndarray, sigma: float) -> np.ndarray:
    """Normalised ``exp(-d^2 / sigma)`` along the last axis."""
    a = -np.asarray(d, float) ** 2 / sigma
    a = a - a.max(axis=-1, keepdims=True)
    w = np.exp(a)
    return w / w.sum(axis=-1, keepdims=True)


class NeuralPointSet:
    """Levels of neural points at resolutions ``r0 * mult**l`` plus a colour decoder."""

    def __init__(self, n_levels: int = 3, r0: float = 0.005, multiplier: float = 4.0,
                 feature_dim: int = 8, k: int = 4, hidden=(64, 64), seed: int = 0):
        if n_levels < 1:
            raise ValueError("need at least one level")
        self.rng = np.random.default_rng(seed)
        self.k = k
        self.feature_dim = feature_dim
        self.levels = [NeuralPointLevel(r0 * multiplier ** i, feature_dim) for i in range(n_levels)]
        self.decoder = Mlp.create(n_levels * feature_dim, hidden, 3, self.rng)

    @property
    def resolutions(self) -> list:
        return [lv.resolution for lv in self.levels]

    def counts(self) -> list:
        return [len(lv) for lv in self.levels]


def allocate(point_set: NeuralPointSet, points: np.ndarray) -> list:
    """Add points that are farther than ``t_a`` from every point present when tested.

    Candidates are voxel representatives at each level's resolution, tested
    in input order; earlier acceptances of the same batch count as present.
    Returns the number added per level.
    """
    pts = np.asarray(points, float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    added = []
    for lv in point_set.levels:
        cand = pts[voxel_representatives(pts, lv.resolution)]
        cand = cand[lv.nearest_distance(cand) > lv.t_a]
        if len(cand) == 0:
            added.append(0)
            continue
        conflicts = [[] for _ in range(len(cand))]
        for i, j in cKDTree(cand).query_pairs(lv.t_a, output_type="ndarray"):
            conflicts[min(i, j)].append(max(i, j))
        blocked = np.zeros(len(cand), bool)
        keep = []
        for i in range(len(cand)):
            if blocked[i]:
                continue
            keep.append(i)
            blocked[conflicts[i]] = True
        new = cand[keep]
        lv.append(new, point_set.rng.normal(0.0, FEATURE_STD, (len(new), lv.feature_dim)))
        added.append(len(new))
    return added


def encode_batch(point_set: NeuralPointSet, pts: np.ndarray, cache: bool = False):
    """Concatenated per-level features for ``(N, 3)`` positions."""
    pts = np.asarray(pts, float).reshape(-1, 3)
    parts, info = [], []
    for lv in point_set.levels:
        d, idx = lv.neighbors(pts, point_set.k)
        w = interpolation_weights(d, lv.sigma)
        parts.append(np.einsum("nk,nkm->nm", w, lv.features[idx]))
        info.append((idx, w))
    feat = np.concatenate(parts, axis=1)
    return (feat, info) if cache else feat


def encode(point_set: NeuralPointSet, p) -> np.ndarray:
    return encode_batch(point_set, np.asarray(p, float)[None])[0]


def predict_colors(point_set: NeuralPointSet, pts: np.ndarray) -> np.ndarray:
    return point_set.decoder.forward(encode_batch(point_set, pts))


def predict_color(point_set: NeuralPointSet, p) -> np.ndarray:
    return predict_colors(point_set, np.asarray(p, float)[None])[0]
