"""Product-line assembly and execution."""

from .assembly import (APPLICATIONS, COMPLETION, DEPTH_ESTIMATION, FLEXION, RECONSTRUCTION,
                       TRACKING, AppRequest, ProductLine, establish_product_line)
from .runner import (FrameRecord, FrameSource, WorldState, evaluate, finish, read_metrics,
                     request_for, run_sequence, step, write_metrics)

__all__ = [
    "APPLICATIONS", "COMPLETION", "DEPTH_ESTIMATION", "FLEXION", "RECONSTRUCTION", "TRACKING",
    "AppRequest", "FrameRecord", "FrameSource", "ProductLine", "WorldState",
    "establish_product_line", "evaluate", "finish", "read_metrics", "request_for",
    "run_sequence", "step", "write_metrics",
]
