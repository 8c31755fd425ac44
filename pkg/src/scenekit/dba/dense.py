"""Dense bundle adjustment over poses, intrinsics and per-pixel inverse depth.

Residual for reference pixel ``x`` and source frame ``j``::

    r_j(x) = proj(T_jt * unproj(x, d(x), theta), theta) - x_j*

where ``T_jt`` maps reference-camera points into camera ``j``.  Each
reference pixel owns a single inverse depth, so the depth block of the
normal equations is diagonal and is eliminated with a Schur complement
onto the (small) pose + intrinsics block.

Pose updates are left perturbations ``W_j <- exp(xi) W_j`` of the
world-to-camera transform ``W_j``, ``xi = (v, w)``; the reference pose is
held fixed as the gauge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..correspondence import FlowField
from ..errors import DegenerateGeometry
from ..geometry import Intrinsics, Pose, skew

logger = logging.getLogger(__name__)

MIN_INV_DEPTH = 1e-6


@dataclass
class DbaConfig:
    max_iters: int = 50
    damping: float = 1e-4
    tol: float = 1e-10
    min_damping: float = 1e-10
    max_damping: float = 1e8
    abs_cost_tol: float = 1e-18


@dataclass
class DbaProblem:
    """A reference frame ``t`` and source frames sharing one intrinsics set.

    ``poses[0]`` is the reference (camera-to-world); ``poses[1:]`` align with
    ``targets``/``masks`` along the first axis.
    """

    ref_pixels: np.ndarray          # (P, 2)
    targets: np.ndarray             # (S, P, 2) matched pixel x_j*
    masks: np.ndarray               # (S, P) combined correspondence mask
    poses: list                     # S + 1 Pose, camera-to-world
    intrinsics: Intrinsics
    inv_depth: np.ndarray           # (P,) initial inverse depth
    grid_shape: tuple = None
    optimize_poses: bool = True
    optimize_intrinsics: bool = False

    def __post_init__(self):
        self.ref_pixels = np.asarray(self.ref_pixels, float).reshape(-1, 2)
        p = len(self.ref_pixels)
        self.targets = np.asarray(self.targets, float).reshape(-1, p, 2)
        self.masks = np.asarray(self.masks, bool).reshape(-1, p)
        self.inv_depth = np.maximum(np.asarray(self.inv_depth, float).reshape(p), MIN_INV_DEPTH)
        if len(self.targets) < 1:
            raise ValueError("need at least one source frame")
        if len(self.poses) != len(self.targets) + 1:
            raise ValueError("need one pose per frame (reference first)")
        if self.grid_shape is None:
            self.grid_shape = (1, p)

    @property
    def n_sources(self) -> int:
        return len(self.targets)

    @property
    def n_global(self) -> int:
        return 6 * self.n_sources * self.optimize_poses + 4 * self.optimize_intrinsics

    @classmethod
    def from_flows(cls, flows: Sequence[FlowField], intrinsics: Intrinsics, poses: Sequence[Pose],
                   inv_depth, masks: Optional[Sequence[np.ndarray]] = None, stride: int = 4,
                   optimize_poses: bool = True, optimize_intrinsics: bool = False) -> "DbaProblem":
        """Sample flows (reference -> each source) on a strided reference grid."""
        h, w = flows[0].shape
        vs, us = np.mgrid[0:h:stride, 0:w:stride]
        px = np.stack([us.ravel(), vs.ravel()], axis=1).astype(float)
        targets, ms = [], []
        for n, f in enumerate(flows):
            off = f.offsets[vs, us].reshape(-1, 2)
            m = f.validity[vs, us].ravel()
            if masks is not None and masks[n] is not None:
                m = m & np.asarray(masks[n], bool)[vs, us].ravel()
            targets.append(px + off)
            ms.append(m)
        d0 = np.asarray(inv_depth, float)
        if d0.ndim == 0:
            d0 = np.full(len(px), float(d0))
        elif d0.shape == (h, w):
            d0 = d0[vs, us].ravel()
        return cls(px, np.stack(targets), np.stack(ms), list(poses), intrinsics, d0,
                   vs.shape, optimize_poses, optimize_intrinsics)


@dataclass
class DbaState:
    poses: list          # camera-to-world
    params: np.ndarray   # fx, fy, cx, cy
    inv_depth: np.ndarray

    def copy(self) -> "DbaState":
        return DbaState(list(self.poses), self.params.copy(), self.inv_depth.copy())


@dataclass
class DbaSolution:
    poses: list
    intrinsics: Intrinsics
    inv_depth: np.ndarray         # grid-shaped
    solved: np.ndarray            # grid-shaped bool
    cost: float
    iterations: int
    converged: bool
    initial_cost: float = float("nan")
    cost_history: list = field(default_factory=list)
    pixel_rms: Optional[np.ndarray] = None   # grid-shaped, px

    @property
    def depth(self) -> np.ndarray:
        return np.where(self.solved, 1.0 / np.maximum(self.inv_depth, MIN_INV_DEPTH), 0.0)


@dataclass
class Linearization:
    residuals: np.ndarray   # (S, P, 2)
    j_global: np.ndarray    # (S, P, 2, G)
    j_depth: np.ndarray     # (S, P, 2)
    active: np.ndarray      # (S, P)

    @property
    def cost(self) -> float:
        return float(np.sum(self.residuals ** 2))


def initial_state(problem: DbaProblem) -> DbaState:
    return DbaState(list(problem.poses), problem.intrinsics.params, problem.inv_depth.copy())


def _relative(state: DbaState, j: int) -> Pose:
    """Transform taking reference-camera points to camera ``j``."""
    return state.poses[j].inverse() @ state.poses[0]


def residuals(problem: DbaProblem, state: DbaState, active: Optional[np.ndarray] = None) -> np.ndarray:
    """(S, P, 2) residuals; inactive entries are zero."""
    return _evaluate(problem, state, active, jacobians=False).residuals


def linearize(problem: DbaProblem, state: DbaState, active: Optional[np.ndarray] = None) -> Linearization:
    return _evaluate(problem, state, active, jacobians=True)


def _evaluate(problem: DbaProblem, state: DbaState, active, jacobians: bool) -> Linearization:
    fx, fy, cx, cy = state.params
    u, v = problem.ref_pixels[:, 0], problem.ref_pixels[:, 1]
    d = state.inv_depth
    a = (u - cx) / fx
    b = (v - cy) / fy
    ray = np.stack([a, b, np.ones_like(a)], axis=1)
    p_t = ray / d[:, None]
    s_count, n_pix = problem.masks.shape
    res = np.zeros((s_count, n_pix, 2))
    n_g = problem.n_global
    jg = np.zeros((s_count, n_pix, 2, n_g)) if jacobians else None
    jd = np.zeros((s_count, n_pix, 2)) if jacobians else None
    act = np.zeros((s_count, n_pix), bool)
    for j in range(s_count):
        rel = _relative(state, j + 1)
        r_mat, t_vec = rel.rotation, rel.translation
        p_j = p_t @ r_mat.T + t_vec
        x, y, z = p_j[:, 0], p_j[:, 1], p_j[:, 2]
        ok = problem.masks[j] & (z > 1e-6) & np.isfinite(z)
        if active is not None:
            ok &= active[j]
        zs = np.where(ok, z, 1.0)
        pred = np.stack([fx * x / zs + cx, fy * y / zs + cy], axis=1)
        res[j] = np.where(ok[:, None], pred - problem.targets[j], 0.0)
        act[j] = ok
        if not jacobians:
            continue
        jp = np.zeros((n_pix, 2, 3))
        jp[:, 0, 0] = fx / zs
        jp[:, 0, 2] = -fx * x / zs ** 2
        jp[:, 1, 1] = fy / zs
        jp[:, 1, 2] = -fy * y / zs ** 2
        jpr = jp @ r_mat
        jd[j] = np.einsum("pkc,pc->pk", jpr, -p_t / d[:, None])
        col = 0
        if problem.optimize_poses:
            c0 = 6 * j
            jg[j, :, :, c0:c0 + 3] = jp
            jg[j, :, :, c0 + 3:c0 + 6] = -jp @ skew(p_j)
            col = 6 * s_count
        if problem.optimize_intrinsics:
            dpt = np.zeros((n_pix, 3, 4))
            dpt[:, 0, 0] = -a / fx / d
            dpt[:, 1, 1] = -b / fy / d
            dpt[:, 0, 2] = -1.0 / (fx * d)
            dpt[:, 1, 3] = -1.0 / (fy * d)
            jt = jpr @ dpt
            jt[:, 0, 0] += x / zs
            jt[:, 1, 1] += y / zs
            jt[:, 0, 2] += 1.0
            jt[:, 1, 3] += 1.0
            jg[j, :, :, col:col + 4] = jt
        jg[j][~ok] = 0.0
        jd[j][~ok] = 0.0
    return Linearization(res, jg, jd, act)


def apply_update(problem: DbaProblem, state: DbaState, dg: np.ndarray, dd: np.ndarray) -> DbaState:
    new = state.copy()
    col = 0
    if problem.optimize_poses:
        for j in range(problem.n_sources):
            w_j = state.poses[j + 1].inverse().perturb_left(dg[6 * j:6 * j + 6])
            new.poses[j + 1] = w_j.inverse()
        col = 6 * problem.n_sources
    if problem.optimize_intrinsics:
        new.params = state.params + dg[col:col + 4]
    new.inv_depth = np.maximum(state.inv_depth + dd, MIN_INV_DEPTH)
    return new


def normal_equations(lin: Linearization):
    """Blocks of ``J^T J`` and ``J^T r``: (Hgg, Hgd, Hdd, bg, bd)."""
    s_count, n_pix, _, n_g = lin.j_global.shape
    jg = lin.j_global.reshape(s_count, n_pix * 2, n_g)
    r = lin.residuals.reshape(s_count, n_pix * 2)
    hgg = np.einsum("sra,srb->ab", jg, jg)
    bg = np.einsum("sra,sr->a", jg, r)
    hgd = np.einsum("spka,spk->pa", lin.j_global, lin.j_depth)
    hdd = np.einsum("spk,spk->p", lin.j_depth, lin.j_depth)
    bd = np.einsum("spk,spk->p", lin.j_depth, lin.residuals)
    return hgg, hgd, hdd, bg, bd


def _depth_floor(hdd: np.ndarray) -> float:
    pos = hdd[hdd > 0]
    return 1e-12 * (float(np.median(pos)) if len(pos) else 1.0)


def schur_step(lin: Linearization, damping: float):
    """Damped Gauss-Newton step eliminating the diagonal depth block.

    Returns ``(dg, dd, observed)`` where ``observed`` marks depths with at
    least one active residual.
    """
    hgg, hgd, hdd, bg, bd = normal_equations(lin)
    observed = lin.active.any(axis=0)
    hdd_d = hdd * (1.0 + damping) + _depth_floor(hdd)
    inv = np.where(observed, 1.0 / hdd_d, 0.0)
    n_g = hgg.shape[0]
    if n_g:
        a = hgg + damping * np.diag(np.diag(hgg)) - (hgd * inv[:, None]).T @ hgd
        rhs = -bg + hgd.T @ (inv * bd)
        dg = _solve_spd(a, rhs)
    else:
        dg = np.zeros(0)
    dd = np.where(observed, -(bd + hgd @ dg) * inv, 0.0)
    return dg, dd, observed


def dense_step(lin: Linearization, damping: float):
    """Same step as :func:`schur_step` via the full normal equations (oracle)."""
    hgg, hgd, hdd, bg, bd = normal_equations(lin)
    observed = lin.active.any(axis=0)
    idx = np.flatnonzero(observed)
    n_g = hgg.shape[0]
    n = n_g + len(idx)
    h = np.zeros((n, n))
    h[:n_g, :n_g] = hgg + damping * np.diag(np.diag(hgg))
    h[:n_g, n_g:] = hgd[idx].T
    h[n_g:, :n_g] = hgd[idx]
    h[n_g:, n_g:] = np.diag(hdd[idx] * (1.0 + damping) + _depth_floor(hdd))
    x = np.linalg.solve(h, -np.concatenate([bg, bd[idx]]))
    dd = np.zeros(len(hdd))
    dd[idx] = x[n_g:]
    return x[:n_g], dd, observed


def _solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = 0.5 * (a + a.T)
    try:
        c = np.linalg.cholesky(a)
        y = np.linalg.solve(c, b)
        return np.linalg.solve(c.T, y)
    except np.linalg.LinAlgError:
        pass
    x, *_ = np.linalg.lstsq(a, b, rcond=1e-14)
    if not np.all(np.isfinite(x)):
        raise DegenerateGeometry("reduced normal equations are singular")
    return x


def solve_dba(problem: DbaProblem, config: Optional[DbaConfig] = None) -> DbaSolution:
    """Levenberg-Marquardt damped Gauss-Newton on the dense reprojection cost."""
    cfg = config or DbaConfig()
    state = initial_state(problem)
    lin = linearize(problem, state)
    cost = lin.cost
    history = [cost]
    initial_cost = cost
    lam = cfg.damping
    converged = cost <= cfg.abs_cost_tol
    iters = 0
    hdd_all = np.einsum("spk,spk->p", lin.j_depth, lin.j_depth)
    _check_observability(lin, hdd_all, problem)
    while not converged and iters < cfg.max_iters:
        iters += 1
        try:
            dg, dd, _ = schur_step(lin, lam)
        except DegenerateGeometry:
            if lam >= cfg.max_damping:
                raise
            lam *= 10
            continue
        cand = apply_update(problem, state, dg, dd)
        trial = _evaluate(problem, cand, lin.active, jacobians=False)
        new_cost = trial.cost if np.array_equal(trial.active, lin.active) else np.inf
        if new_cost <= cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            state, cost = cand, new_cost
            lam = max(lam / 10, cfg.min_damping)
            history.append(cost)
            lin = linearize(problem, state)
            cost = lin.cost
            if cost <= cfg.abs_cost_tol or rel < cfg.tol:
                converged = True
        else:
            lam *= 10
            if lam > cfg.max_damping:
                # no step lowers the cost any more: a stationary point at working precision
                logger.debug("damping exceeded %g; stopping", cfg.max_damping)
                converged = True
                break
    res = residuals(problem, state)
    active = lin.active
    solved = active.any(axis=0)
    cnt = np.maximum(active.sum(axis=0), 1)
    rms = np.sqrt(np.sum(res ** 2, axis=(0, 2)) / cnt)
    gs = problem.grid_shape
    return DbaSolution(
        poses=list(state.poses),
        intrinsics=problem.intrinsics.with_params(state.params),
        inv_depth=state.inv_depth.reshape(gs),
        solved=solved.reshape(gs),
        cost=float(np.sum(res ** 2)),
        iterations=iters,
        converged=bool(converged),
        initial_cost=initial_cost,
        cost_history=history,
        pixel_rms=np.where(solved, rms, np.inf).reshape(gs),
    )


def _check_observability(lin: Linearization, hdd: np.ndarray, problem: DbaProblem) -> None:
    if not lin.active.any():
        raise DegenerateGeometry("no active correspondences")
    scale = max(1.0, float(np.max(lin.j_global ** 2)) if lin.j_global.size else 1.0)
    if float(np.max(hdd)) <= 1e-18 * scale:
        raise DegenerateGeometry("inverse depth is unobservable (zero baseline)")


def normalize_gauge(poses: Sequence[Pose], inv_depth: np.ndarray, reference_baseline: float = 1.0):
    """Rescale so the first source's baseline equals ``reference_baseline``.

    Returns the rescaled camera-to-world poses (reference kept fixed) and
    inverse depths, used to compare solutions that agree up to scale.
    """
    ref = poses[0]
    rel1 = poses[1].inverse() @ ref
    s = reference_baseline / np.linalg.norm(rel1.translation)
    out = [ref]
    for p in poses[1:]:
        rel = p.inverse() @ ref
        rel = Pose(rel.quat, rel.translation * s)
        out.append(ref @ rel.inverse())
    return out, inv_depth / s
