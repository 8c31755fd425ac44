"""Analytic scene description: primitives, texture, trajectory, noise.

Scenes are made of an optional inward-facing room box plus solid boxes,
spheres and (possibly bounded) planes.  Everything random derives from
``SceneSpec.seed``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..geometry import Intrinsics, Pose


def look_at(eye, target, down=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``eye`` looking at ``target`` (+z forward, +y down)."""
    eye = np.asarray(eye, float)
    f = np.asarray(target, float) - eye
    f /= np.linalg.norm(f)
    x = np.cross(np.asarray(down, float), f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return Pose.from_rt(np.stack([x, y, f], axis=1), eye)


# --------------------------------------------------------------------------
# primitives; ``intersect`` returns the smallest hit parameter t > eps per ray
# (np.inf on miss) for rays o + t d

_EPS = 1e-9


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    half_extent: Optional[tuple] = None  # (along axis_u, along axis_v); None = infinite
    name: str = "plane"

    def _axes(self):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        a = np.cross(helper, n)
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        return n, a, b

    def intersect(self, o, d):
        n, a, b = self._axes()
        p0 = np.asarray(self.point, float)
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - o) @ n) / den
        t = np.where((np.abs(den) > 1e-15) & (t > _EPS), t, np.inf)
        if self.half_extent is not None:
            hit = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
            rel = hit - p0
            inside = (np.abs(rel @ a) <= self.half_extent[0]) & (np.abs(rel @ b) <= self.half_extent[1])
            t = np.where(inside, t, np.inf)
        return t

    def contains(self, p) -> bool:
        return False


@dataclass(frozen=True)
class Box:
    """Axis-aligned solid box (visible from outside)."""

    lo: tuple
    hi: tuple
    name: str = "box"

    def intersect(self, o, d):
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        ok = (tmax >= tmin) & (tmin > _EPS)
        return np.where(ok, tmin, np.inf)

    def contains(self, p) -> bool:
        p = np.asarray(p, float)
        return bool(np.all(p > np.asarray(self.lo)) and np.all(p < np.asarray(self.hi)))


@dataclass(frozen=True)
class Room:
    """Axis-aligned box seen from the inside (walls, floor, ceiling)."""

    lo: tuple
    hi: tuple
    name: str = "room"

    def intersect(self, o, d):
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        return np.where(tmax > _EPS, tmax, np.inf)

    def contains(self, p) -> bool:
        return False


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    name: str = "sphere"

    def intersect(self, o, d):
        c = np.asarray(self.center, float)
        oc = o - c
        a = np.einsum("...i,...i->...", d, d)
        b = 2.0 * np.einsum("...i,...i->...", oc, d)
        cc = np.einsum("...i,...i->...", oc, oc) - self.radius ** 2
        disc = b * b - 4 * a * cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def contains(self, p) -> bool:
        return float(np.linalg.norm(np.asarray(p, float) - np.asarray(self.center))) < self.radius


# --------------------------------------------------------------------------
# texture

class ValueNoise:
    """Multi-octave 3-D value noise, one independent lattice per colour channel."""

    def __init__(self, seed: int, frequency: float = 2.0, octaves: int = 3,
                 lo: float = 0.15, hi: float = 0.85):
        rng = np.random.default_rng(seed)
        self.perm = np.stack([rng.permutation(256) for _ in range(3)])
        self.values = rng.random((3, 256))
        self.frequency = frequency
        self.octaves = octaves
        self.lo, self.hi = lo, hi

    def _lattice(self, c, i, j, k):
        p = self.perm[c]
        return self.values[c, p[(p[(p[i & 255] + j) & 255] + k) & 255]]

    def _octave(self, c, x):
        xi = np.floor(x).astype(np.int64)
        f = x - xi
        s = f * f * (3 - 2 * f)
        out = 0.0
        for dx in (0, 1):
            wx = s[..., 0] if dx else 1 - s[..., 0]
            for dy in (0, 1):
                wy = s[..., 1] if dy else 1 - s[..., 1]
                for dz in (0, 1):
                    wz = s[..., 2] if dz else 1 - s[..., 2]
                    out = out + wx * wy * wz * self._lattice(
                        c, xi[..., 0] + dx, xi[..., 1] + dy, xi[..., 2] + dz)
        return out

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, float)
        out = np.zeros(points.shape[:-1] + (3,))
        norm = sum(0.5 ** o for o in range(self.octaves))
        for c in range(3):
            acc = 0.0
            for o in range(self.octaves):
                acc = acc + 0.5 ** o * self._octave(c, points * self.frequency * 2 ** o + 17.0 * c)
            out[..., c] = acc / norm
        return self.lo + (self.hi - self.lo) * out


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    depth_sigma: float = 0.0
    flow_sigma: float = 0.0
    outlier_fraction: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    trajectory: tuple
    intrinsics: Intrinsics
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    texture_frequency: float = 2.0
    texture_octaves: int = 3
    prior_scale: float = 0.8
    prior_distortion: float = 0.03

    def __len__(self) -> int:
        return len(self.trajectory)

    def texture(self) -> ValueNoise:
        return ValueNoise(self.seed, self.texture_frequency, self.texture_octaves)

    def with_trajectory(self, poses: Sequence[Pose]) -> "SceneSpec":
        return SceneSpec(tuple(self.primitives), tuple(poses), self.intrinsics, self.noise,
                         self.seed, self.texture_frequency, self.texture_octaves,
                         self.prior_scale, self.prior_distortion)

    def with_intrinsics(self, k: Intrinsics) -> "SceneSpec":
        return SceneSpec(tuple(self.primitives), self.trajectory, k, self.noise, self.seed,
                         self.texture_frequency, self.texture_octaves,
                         self.prior_scale, self.prior_distortion)


def line_trajectory(start, end, n: int, target) -> list[Pose]:
    start = np.asarray(start, float)
    end = np.asarray(end, float)
    if n == 1:
        return [look_at(start, target)]
    return [look_at(start + (end - start) * s, target) for s in np.linspace(0, 1, n)]


def default_room(width: int = 160, height: int = 120, focal: float = 140.0,
                 frames: int = 12, seed: int = 0) -> SceneSpec:
    """Textured room with a box and a sphere; camera slides sideways."""
    k = Intrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height)
    prims = (
        Room((-1.6, -1.2, -1.0), (1.6, 1.2, 3.2)),
        Box((-0.75, 0.55, 1.5), (-0.1, 1.2, 2.2), name="box"),
        Sphere((0.65, 0.25, 2.0), 0.4, name="sphere"),
    )
    traj = line_trajectory((-0.35, -0.05, 0.0), (0.35, 0.1, 0.25), frames, (0.0, 0.15, 2.6))
    return SceneSpec(prims, tuple(traj), k, NoiseSpec(), seed)


# --------------------------------------------------------------------------
# plain-text spec files (INI sections)

def _vec(s: str) -> tuple:
    return tuple(float(x) for x in s.replace(",", " ").split())


def load_scene_spec(path, frames: Optional[int] = None) -> SceneSpec:
    """Parse a scene description file.

    Sections: ``[scene]`` (width, height, fx, fy, cx, cy, seed),
    ``[texture]`` (frequency, octaves), ``[noise]`` (depth_sigma,
    flow_sigma, outlier_fraction), ``[prior]`` (scale, distortion),
    ``[room]`` (lo, hi), ``[box NAME]`` (lo, hi), ``[sphere NAME]``
    (center, radius), ``[plane NAME]`` (point, normal, half_extent) and
    ``[trajectory]`` (start, end, target, frames).
    """
    cp = configparser.ConfigParser()
    with open(path) as f:
        cp.read_file(f)
    sc = cp["scene"]
    w, h = sc.getint("width", 160), sc.getint("height", 120)
    fx = sc.getfloat("fx", 140.0)
    k = Intrinsics(fx, sc.getfloat("fy", fx), sc.getfloat("cx", (w - 1) / 2),
                   sc.getfloat("cy", (h - 1) / 2), w, h)
    prims = []
    for name in cp.sections():
        sec = cp[name]
        kind, _, label = name.partition(" ")
        if kind == "room":
            prims.append(Room(_vec(sec["lo"]), _vec(sec["hi"])))
        elif kind == "box":
            prims.append(Box(_vec(sec["lo"]), _vec(sec["hi"]), name=label or "box"))
        elif kind == "sphere":
            prims.append(Sphere(_vec(sec["center"]), sec.getfloat("radius"), name=label or "sphere"))
        elif kind == "plane":
            he = _vec(sec["half_extent"]) if "half_extent" in sec else None
            prims.append(Plane(_vec(sec["point"]), _vec(sec["normal"]), he, name=label or "plane"))
        elif kind not in ("scene", "texture", "noise", "prior", "trajectory"):
            raise ValueError(f"unknown scene section [{name}]")
    tr = cp["trajectory"]
    n = frames if frames is not None else tr.getint("frames", 10)
    traj = line_trajectory(_vec(tr["start"]), _vec(tr["end"]), n, _vec(tr["target"]))
    noise = NoiseSpec()
    if cp.has_section("noise"):
        ns = cp["noise"]
        noise = NoiseSpec(ns.getfloat("depth_sigma", 0.0), ns.getfloat("flow_sigma", 0.0),
                          ns.getfloat("outlier_fraction", 0.0))
    tex = cp["texture"] if cp.has_section("texture") else {}
    pri = cp["prior"] if cp.has_section("prior") else {}
    return SceneSpec(tuple(prims), tuple(traj), k, noise, sc.getint("seed", 0),
                     float(tex.get("frequency", 2.0)), int(tex.get("octaves", 3)),
                     float(pri.get("scale", 0.8)), float(pri.get("distortion", 0.03)))


DEFAULT_SPEC_TEXT = """\
[scene]
width = 160
height = 120
fx = 140
seed = 0

[texture]
frequency = 2.0
octaves = 3

[room]
lo = -1.6 -1.2 -1.0
hi = 1.6 1.2 3.2

[box box]
lo = -0.75 0.55 1.5
hi = -0.1 1.2 2.2

[sphere sphere]
center = 0.65 0.25 2.0
radius = 0.4

[trajectory]
start = -0.35 -0.05 0.0
end = 0.35 0.1 0.25
target = 0.0 0.15 2.6
frames = 12
"""
