"""Checkpoints, immutable snapshots and image rendering for neural point sets."""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..geometry import Intrinsics, Pose
from ..rasterizer import RasterConfig, rasterize
from .mlp import Mlp
from .points import NeuralPointLevel, NeuralPointSet, predict_colors

MAGIC = b"NPTS"
VERSION = 1


def save_checkpoint(path, point_set: NeuralPointSet) -> None:
    """Versioned little-endian binary: header, levels, decoder."""
    out = bytearray(MAGIC)
    out += struct.pack("<IIII", VERSION, len(point_set.levels), point_set.feature_dim, point_set.k)
    for lv in point_set.levels:
        out += struct.pack("<dddI", lv.resolution, lv.t_a, lv.sigma, len(lv))
        out += np.ascontiguousarray(lv.positions, "<f4").tobytes()
        out += np.ascontiguousarray(lv.features, "<f4").tobytes()
    dec = point_set.decoder
    out += struct.pack("<I", len(dec.weights))
    for w, b in zip(dec.weights, dec.biases):
        out += struct.pack("<II", *w.shape)
        out += np.ascontiguousarray(w, "<f4").tobytes()
        out += np.ascontiguousarray(b, "<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ValueError("truncated checkpoint")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) * 4
        if self.pos + n > len(self.data):
            raise ValueError("truncated checkpoint")
        a = np.frombuffer(self.data, "<f4", int(np.prod(shape)), self.pos).astype(float).reshape(shape)
        self.pos += n
        return a


def load_checkpoint(path, seed: int = 0) -> NeuralPointSet:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a neural point checkpoint")
    rd = _Reader(data)
    rd.pos = 4
    version, n_levels, m, k = rd.unpack("<IIII")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    ps = NeuralPointSet(n_levels=n_levels, feature_dim=m, k=k, seed=seed)
    levels = []
    for _ in range(n_levels):
        res, t_a, sigma, n = rd.unpack("<dddI")
        pos = rd.array((n, 3))
        feat = rd.array((n, m))
        levels.append(NeuralPointLevel(res, m, pos, feat, t_a, sigma))
    ps.levels = levels
    (n_layers,) = rd.unpack("<I")
    ws, bs = [], []
    for _ in range(n_layers):
        a, b = rd.unpack("<II")
        ws.append(rd.array((a, b)))
        bs.append(rd.array((b,)))
    ps.decoder = Mlp(ws, bs)
    return ps


@dataclass(frozen=True)
class Snapshot:
    """Read-only copy of a point set for concurrent renderers."""

    point_set: NeuralPointSet
    version: int


def freeze(point_set: NeuralPointSet) -> NeuralPointSet:
    """Deep copy with read-only arrays."""
    cp = NeuralPointSet.__new__(NeuralPointSet)
    cp.rng = np.random.default_rng(0)
    cp.k = point_set.k
    cp.feature_dim = point_set.feature_dim
    cp.levels = []
    for lv in point_set.levels:
        pos, feat = lv.positions.copy(), lv.features.copy()
        pos.flags.writeable = False
        feat.flags.writeable = False
        cp.levels.append(NeuralPointLevel(lv.resolution, lv.feature_dim, pos, feat, lv.t_a, lv.sigma))
    dec = point_set.decoder.copy()
    for a in dec.weights + dec.biases:
        a.flags.writeable = False
    cp.decoder = dec
    return cp


class SnapshotPublisher:
    """Copy-on-publish handoff between one trainer and many readers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._snap: Optional[Snapshot] = None

    def publish(self, point_set: NeuralPointSet) -> Snapshot:
        frozen = freeze(point_set)
        with self._lock:
            version = 0 if self._snap is None else self._snap.version + 1
            self._snap = Snapshot(frozen, version)
            return self._snap

    def latest(self) -> Optional[Snapshot]:
        with self._lock:
            return self._snap


def render_view(point_set: NeuralPointSet, pose: Pose, k: Intrinsics, th: float = 0.05,
                k_ray: int = 8, sigma: float = 1.0, level: int = 0):
    """Rasterize one level's points at ``pose`` and decode colours per pixel.

    Returns ``(rgb (H, W, 3), depth (H, W), validity (H, W))``.
    """
    lv = point_set.levels[level]
    cam = pose.inverse().apply(lv.positions) if len(lv) else np.zeros((0, 3))
    out = rasterize(cam, RasterConfig(k, r=lv.resolution, th=th, k_ray=k_ray, sigma=sigma))
    rgb = np.zeros((k.height, k.width, 3))
    if out.validity.any():
        world = pose.apply(out.points[out.validity])
        rgb[out.validity] = predict_colors(point_set, world)
    return rgb, out.depth, out.validity
