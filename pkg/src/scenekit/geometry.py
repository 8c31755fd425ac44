"""Poses, pinhole intrinsics, image containers and projection primitives.

Conventions used project-wide:

* Pixel coordinates are ``(u, v)`` with ``u`` the column, origin at the
  centre of the top-left pixel.
* A :class:`Pose` stored on a frame is camera-to-world.
* Depth images hold metres; ``0`` (or any non-finite value) is invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import NonPositiveDepth, NonPositiveInverseDepth


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[w]_x`` for a 3-vector or a batch (..., 3)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform stored as unit quaternion ``(x, y, z, w)`` + translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / n
        # canonical hemisphere keeps equality checks stable
        if q[3] < 0:
            q = -q
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]).as_quat(), m[:3, 3])

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation) -> "Pose":
        return cls(Rotation.from_matrix(np.asarray(rotation, dtype=float)).as_quat(), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_quat(), translation)

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform a point or an (N, 3) array of points."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        r_a = Rotation.from_quat(self.quat)
        r = r_a * Rotation.from_quat(other.quat)
        return Pose(r.as_quat(), r_a.apply(other.translation) + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        r_inv = Rotation.from_quat(self.quat).inv()
        return Pose(r_inv.as_quat(), -r_inv.apply(self.translation))

    def perturb_left(self, xi: np.ndarray) -> "Pose":
        """Retraction ``exp(xi) ∘ self`` with ``xi = (v, w)``.

        First-order behaviour is ``p -> p + v + w x p``; the Gauss-Newton
        Jacobians in :mod:`scenekit.dba` assume exactly this convention.
        """
        xi = np.asarray(xi, dtype=float)
        dr = Rotation.from_rotvec(xi[3:6])
        r = dr * Rotation.from_quat(self.quat)
        return Pose(r.as_quat(), dr.apply(self.translation) + xi[:3])

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return rotation_distance(self, other) < tol and np.linalg.norm(
            self.translation - other.translation) < tol


def rotation_distance(a: Pose, b: Pose) -> float:
    """Geodesic angle (radians) between the rotations of two poses."""
    d = Rotation.from_quat(a.quat).inv() * Rotation.from_quat(b.quat)
    return float(np.linalg.norm(d.as_rotvec()))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def params(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)

    def with_params(self, params) -> "Intrinsics":
        fx, fy, cx, cy = (float(x) for x in params)
        return Intrinsics(fx, fy, cx, cy, self.width, self.height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resampled by ``factor`` (pixel-centre origin)."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            max(1, int(round(self.width * factor))),
            max(1, int(round(self.height * factor))),
        )


@dataclass(frozen=True)
class DepthImage:
    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        m = np.asarray(self.validity, dtype=bool) & np.isfinite(v) & (v > 0)
        v = np.where(m, v, 0.0)
        v.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "validity", m)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DepthImage":
        values = np.asarray(values, dtype=float)
        return cls(values, np.isfinite(values) & (values > 0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ColorImage:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError("color image must be H x W x 3")
        if not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0 or v.max(initial=0.0) > 1:
            raise ValueError("color channels must be finite and in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass(frozen=True)
class Frame:
    id: int
    color: Optional[ColorImage] = None
    depth: Optional[DepthImage] = None
    pose: Optional[Pose] = None
    intrinsics: Optional[Intrinsics] = None

    def __post_init__(self):
        if all(x is None for x in (self.color, self.depth, self.pose, self.intrinsics)):
            raise ValueError("a frame needs at least one of color/depth/pose/intrinsics")


def project_point(p, k: Intrinsics) -> tuple[np.ndarray, float]:
    """Pinhole projection of a camera-space point; returns ``(uv, depth)``."""
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise NonPositiveDepth(f"point depth {z} is not positive")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy]), z


def unproject_pixel(x, d: float, k: Intrinsics) -> np.ndarray:
    """Back-project pixel ``x`` at inverse depth ``d`` (1/m) to camera space."""
    if not d > 0:
        raise NonPositiveInverseDepth(f"inverse depth {d} is not positive")
    u, v = (float(c) for c in x)
    return np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]) / d


def to_ndc(p, k: Intrinsics) -> np.ndarray:
    """``(fx X/Z + cx, fy Y/Z + cy, 1/Z)``."""
    uv, z = project_point(p, k)
    return np.array([uv[0], uv[1], 1.0 / z])


def project_points(points: np.ndarray, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection without the positivity check; caller masks ``z``."""
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * points[..., 0] / z + k.cx
        v = k.fy * points[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1), z


def pixel_grid(height: int, width: int, stride: int = 1) -> np.ndarray:
    """(h, w, 2) array of ``(u, v)`` pixel coordinates on a strided grid."""
    vs, us = np.mgrid[0:height:stride, 0:width:stride]
    return np.stack([us, vs], axis=-1).astype(float)


def unproject_depth(depth: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Back-project a full depth map (metres) to an (H, W, 3) point image."""
    h, w = depth.shape
    uv = pixel_grid(h, w)
    x = (uv[..., 0] - k.cx) / k.fx * depth
    y = (uv[..., 1] - k.cy) / k.fy * depth
    return np.stack([x, y, depth], axis=-1)
