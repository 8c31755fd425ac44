"""Good-neighbour frame selection for depth estimation."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..geometry import Pose


def relative_motion(reference: Pose, candidate: Pose) -> tuple[float, float, float]:
    """``(baseline, facing_angle, xy_baseline)`` of ``T = G_ref^-1 G_cand``."""
    t = reference.inverse() @ candidate
    r, tr = t.rotation, t.translation
    facing = float(np.arccos(np.clip(r[2, 2], -1.0, 1.0)))
    return float(np.linalg.norm(tr)), facing, float(np.hypot(tr[0], tr[1]))


def select_neighbors(candidates: Sequence[tuple[int, Pose]], reference: Pose,
                     tau_baseline: float, tau_facing: float, tau_nb: int = 2,
                     facing_greater: bool = True) -> list[int]:
    """Frame ids offering the best triangulation geometry w.r.t. ``reference``.

    A candidate survives when its baseline exceeds ``tau_baseline`` and its
    facing angle (angle between optical axes) compares against
    ``tau_facing`` as ``>`` (``facing_greater=True``) or ``<``.  Fewer than
    ``tau_nb`` survivors yields an empty list; otherwise the ``tau_nb`` with
    the largest image-plane (xy) baseline are returned, largest first.
    """
    kept = []
    for order, (fid, pose) in enumerate(candidates):
        base, facing, xy = relative_motion(reference, pose)
        facing_ok = facing > tau_facing if facing_greater else facing < tau_facing
        if base > tau_baseline and facing_ok:
            kept.append((-xy, order, fid))
    if len(kept) < tau_nb:
        return []
    kept.sort()
    return [fid for _, _, fid in kept[:tau_nb]]
