"""Depth -> flexion conversion.

Flexion measures how much the surface bends at a pixel by comparing two
normals estimated on opposite sides of it.  For each axis the pixel's
neighbourhood (at ``±step``) is split into two halves; each half gives a
one-sided normal from a cross product of in-surface differences:

* horizontal split: ``n_l = (p_c - p_l) x (p_d - p_u)``,
  ``n_r = (p_r - p_c) x (p_d - p_u)``
* vertical split:   ``n_u = (p_r - p_l) x (p_c - p_u)``,
  ``n_d = (p_r - p_l) x (p_d - p_c)``

The flexion value is ``min(|n_l . n_r|, |n_u . n_d|)`` of the normalised
normals: 1 on any plane, 0 across a right-angle crease.  Being built from
3-D geometry only, it does not depend on the camera pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DepthImage, Intrinsics, unproject_depth


@dataclass(frozen=True)
class FlexionImage:
    values: np.ndarray
    validity: np.ndarray

    def as_rgb(self) -> np.ndarray:
        """Replicate to three channels for colour-consuming blocks."""
        v = np.where(self.validity, self.values, 0.0)
        return np.repeat(v[..., None], 3, axis=2)


def _normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(v, axis=-1)
    ok = n > 1e-15
    return v / np.where(ok, n, 1.0)[..., None], ok


def depth_to_flexion(depth: DepthImage, k: Intrinsics, step: int = 2) -> FlexionImage:
    """Convert a depth image into a flexion image in [0, 1].

    Pixels whose ``±step`` neighbourhood leaves the image or touches an
    invalid depth are invalid.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    h, w = depth.shape
    pts = unproject_depth(depth.values, k)
    valid = depth.validity
    s = step

    out = np.zeros((h, w))
    ok = np.zeros((h, w), bool)
    if h <= 2 * s or w <= 2 * s:
        return FlexionImage(out, ok)

    def sl(dv, du):
        return (slice(s + dv, h - s + dv), slice(s + du, w - s + du))

    c, l, r, u, d = (pts[sl(0, 0)], pts[sl(0, -s)], pts[sl(0, s)], pts[sl(-s, 0)], pts[sl(s, 0)])
    m = valid[sl(0, 0)] & valid[sl(0, -s)] & valid[sl(0, s)] & valid[sl(-s, 0)] & valid[sl(s, 0)]

    n_l, ok1 = _normalize(np.cross(c - l, d - u))
    n_r, ok2 = _normalize(np.cross(r - c, d - u))
    n_u, ok3 = _normalize(np.cross(r - l, c - u))
    n_d, ok4 = _normalize(np.cross(r - l, d - c))
    horiz = np.abs(np.sum(n_l * n_r, axis=-1))
    vert = np.abs(np.sum(n_u * n_d, axis=-1))
    flex = np.clip(np.minimum(horiz, vert), 0.0, 1.0)
    inner = m & ok1 & ok2 & ok3 & ok4
    out[s:h - s, s:w - s] = np.where(inner, flex, 0.0)
    ok[s:h - s, s:w - s] = inner
    return FlexionImage(out, ok)
