"""Product-line assembly from available inputs and the requested application.

Adopted mapping (parts in execution order):

==================  ==============================================================
application         parts
==================  ==============================================================
Flexion             flexion (needs depth)
Completion          completion (needs sparse or dense depth plus a prior)
MVD                 depth-estimation (rgb only is consumed; >= 2 frames)
Tracking            [flexion] tracking (input poses are ignored)
RGB-D-SLAM          tracking [completion] reconstruction (input poses are ignored)
Mono-SLAM           tracking depth-estimation reconstruction (rgb only is consumed)
Depth-only-SLAM     flexion tracking reconstruction (depth only is consumed)
Reconstruction      [flexion] [tracking] [depth-estimation | completion] reconstruction
==================  ==============================================================

Bracketed parts appear only when their product is missing from the inputs:
flexion stands in for rgb when only depth exists, tracking when poses are
missing, completion when depth is sparse, depth-estimation when there is no
metric depth at all.  Missing intrinsics are tolerated only when the line
contains depth-estimation, whose dense BA refines them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from ..errors import UnsatisfiableRequest

APPLICATIONS = ("MVD", "Completion", "Flexion", "Tracking", "RGB-D-SLAM", "Mono-SLAM",
                "Depth-only-SLAM", "Reconstruction")

FLEXION = "flexion"
TRACKING = "tracking"
DEPTH_ESTIMATION = "depth-estimation"
COMPLETION = "completion"
RECONSTRUCTION = "reconstruction"

PRODUCES = {
    FLEXION: {"rgb"},
    TRACKING: {"pose"},
    DEPTH_ESTIMATION: {"depth"},
    COMPLETION: {"depth"},
    RECONSTRUCTION: {"model"},
}
REQUIRES = {
    FLEXION: {"depth"},
    TRACKING: {"rgb"},
    DEPTH_ESTIMATION: {"rgb"},
    COMPLETION: {"sparse_depth", "prior"},
    RECONSTRUCTION: {"rgb", "depth", "pose"},
}


@dataclass(frozen=True)
class AppRequest:
    application: str
    rgb: bool = False
    depth: bool = False
    sparse_depth: bool = False
    pose: bool = False
    intrinsics: bool = False
    prior: bool = False
    n_frames: Optional[int] = None
    config_path: Optional[str] = None

    def __post_init__(self):
        if self.application not in APPLICATIONS:
            raise UnsatisfiableRequest(
                f"unknown application {self.application!r}; choose from {', '.join(APPLICATIONS)}")

    def consumed(self) -> "AppRequest":
        """Inputs the application actually reads."""
        if self.application == "Mono-SLAM":
            return replace(self, depth=False, sparse_depth=False, pose=False)
        if self.application in ("Tracking", "RGB-D-SLAM"):
            return replace(self, pose=False)
        if self.application == "Depth-only-SLAM":
            return replace(self, rgb=False, pose=False)
        if self.application == "MVD":
            return replace(self, depth=False, sparse_depth=False)
        return self


@dataclass(frozen=True)
class ProductLine:
    parts: tuple
    request: AppRequest
    uncalibrated: bool = False
    mono: bool = False
    available: frozenset = field(default_factory=frozenset)

    def __iter__(self):
        return iter(self.parts)

    def __contains__(self, part) -> bool:
        return part in self.parts


def establish_product_line(request: AppRequest) -> ProductLine:
    """Deterministic part list for ``request``; see the module table."""
    req = request.consumed()
    app = req.application
    if request.n_frames is not None and request.n_frames == 0:
        raise UnsatisfiableRequest("dataset has no frames")
    if not (req.rgb or req.depth or req.sparse_depth):
        raise UnsatisfiableRequest(f"{app} needs rgb or depth input")
    have = {k for k in ("rgb", "depth", "sparse_depth", "pose", "intrinsics", "prior")
            if getattr(req, k)}
    parts = []

    def need(part):
        missing = REQUIRES[part] - have
        if missing:
            raise UnsatisfiableRequest(f"{app}: part {part} lacks {', '.join(sorted(missing))}")
        parts.append(part)
        have.update(PRODUCES[part])

    def color_source():
        if "rgb" not in have:
            if "depth" not in have:
                raise UnsatisfiableRequest(f"{app} needs rgb, or depth to derive flexion from")
            need(FLEXION)

    def metric_depth():
        if "depth" in have:
            return
        if "sparse_depth" in have:
            need(COMPLETION)
        else:
            color_source()
            need(DEPTH_ESTIMATION)

    if app == "Flexion":
        if "depth" not in have:
            raise UnsatisfiableRequest("Flexion needs depth input")
        need(FLEXION)
    elif app == "Completion":
        if "sparse_depth" not in have and "depth" not in have:
            raise UnsatisfiableRequest("Completion needs sparse depth")
        have.add("sparse_depth")
        need(COMPLETION)
    elif app == "MVD":
        if request.n_frames is not None and request.n_frames < 2:
            raise UnsatisfiableRequest("MVD needs at least two frames")
        color_source()
        need(DEPTH_ESTIMATION)
    elif app == "Tracking":
        color_source()
        need(TRACKING)
    else:
        if app == "Mono-SLAM" and not req.rgb:
            raise UnsatisfiableRequest("Mono-SLAM needs rgb input")
        if app == "Depth-only-SLAM" and not req.depth:
            raise UnsatisfiableRequest("Depth-only-SLAM needs depth input")
        if app == "RGB-D-SLAM" and not (req.rgb and (req.depth or req.sparse_depth)):
            raise UnsatisfiableRequest("RGB-D-SLAM needs rgb and depth input")
        color_source()
        if "pose" not in have:
            need(TRACKING)
        metric_depth()
        need(RECONSTRUCTION)
    if not req.intrinsics and DEPTH_ESTIMATION not in parts and parts != [COMPLETION]:
        raise UnsatisfiableRequest(
            f"{app} needs intrinsics; only lines with depth estimation run uncalibrated")
    mono = TRACKING in parts and DEPTH_ESTIMATION in parts
    return ProductLine(tuple(parts), request, uncalibrated=not req.intrinsics, mono=mono,
                       available=frozenset(have))
