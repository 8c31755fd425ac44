"""Bundle-adjustment solvers, neighbour selection and scale recovery."""

from .dense import (DbaConfig, DbaProblem, DbaSolution, DbaState, apply_update, dense_step, initial_state,
                    linearize, normalize_gauge, residuals, schur_step, solve_dba)
from .patch import MIN_EDGES_PER_FRAME, PatchGraph, pose_only_jacobian, pose_only_residuals, solve_pose_only
from .scale import ScaleConfig, landmark_ratios, recover_scale, scale_from_ratios
from .selection import relative_motion, select_neighbors
