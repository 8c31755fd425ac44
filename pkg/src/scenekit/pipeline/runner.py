"""Frame-by-frame execution of a product line.

Tracking here is the pose-only patch BA fed by dataset flows: with input
depth (or flexion from depth) patches come from the previous frame's depth;
in the monocular line the patch depths come from two-view dense BA, so the
trajectory is only defined up to one global scale.  No learned front end is
involved, so results are not full SLAM results.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..config import Config
from ..correspondence import FlowField
from ..dataset import Dataset, frame_name, write_depth_png, write_gray_png, write_poses
from ..dba import DbaConfig, DbaProblem, solve_dba
from ..dba.patch import PatchGraph, solve_pose_only
from ..dba.selection import select_neighbors
from ..errors import (DegenerateGeometry, EmptyOverlap, PartFailure, SceneKitError,
                      UnsatisfiableRequest)
from ..flexion import depth_to_flexion
from ..geometry import ColorImage, DepthImage, Frame, Intrinsics, Pose, project_points
from ..mvd import _unposed_init, correspondence_mask, estimate_depth, guess_intrinsics
from ..neuralpoints import (NeuralPointSet, SnapshotPublisher, TrainerState, TrainFrameQueue,
                            frame_points, render_view, save_checkpoint, train_step)
from ..neuralpoints.train import Adam
from ..scalecov import RbfKernel, complete_depth
from ..synth.metrics import ate_rmse, depth_metrics, psnr
from .assembly import (COMPLETION, DEPTH_ESTIMATION, FLEXION, RECONSTRUCTION, TRACKING,
                       AppRequest, ProductLine, establish_product_line)

logger = logging.getLogger(__name__)


class FrameSource:
    """Per-frame side inputs (flows, priors, sparse depth) read lazily from a dataset."""

    def __init__(self, dataset: Optional[Dataset] = None):
        self.dataset = dataset
        self._flows = {}

    def flow(self, i: int, j: int) -> Optional[FlowField]:
        if (i, j) not in self._flows:
            self._flows[(i, j)] = self.dataset.flow(i, j) if self.dataset else None
        return self._flows[(i, j)]

    def prior(self, i: int) -> Optional[DepthImage]:
        return self.dataset.prior(i) if self.dataset else None

    def sparse(self, i: int) -> Optional[DepthImage]:
        return self.dataset.sparse(i) if self.dataset else None


@dataclass
class FrameRecord:
    id: int
    pose: Optional[Pose] = None
    color: Optional[ColorImage] = None
    depth: Optional[DepthImage] = None
    depth_is_product: bool = False
    published: bool = False


@dataclass
class WorldState:
    config: Config
    intrinsics: Intrinsics
    source: FrameSource = field(default_factory=FrameSource)
    records: dict = field(default_factory=dict)
    # tracking landmarks: frame id -> (pixels (P, 2), inverse depth (P,)) in the global scale
    depth_frames: dict = field(default_factory=dict)
    point_set: Optional[NeuralPointSet] = None
    queue: TrainFrameQueue = field(default_factory=TrainFrameQueue)
    trainer: Optional[TrainerState] = None
    publisher: SnapshotPublisher = field(default_factory=SnapshotPublisher)
    last_id: int = -1
    timing: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @classmethod
    def create(cls, config: Config, intrinsics: Intrinsics, source: Optional[FrameSource] = None):
        npar = config.neuralpoints
        ps = NeuralPointSet(npar.levels, npar.r0, npar.multiplier, npar.feature_dim, npar.k,
                            seed=config.seed)
        trainer = TrainerState(Adam(lr=npar.lr), jump_start=npar.jump_start,
                               rng=np.random.default_rng(config.seed))
        return cls(config, intrinsics, source or FrameSource(), point_set=ps, trainer=trainer)

    def posed_ids(self) -> list:
        return [i for i, r in sorted(self.records.items()) if r.pose is not None]


@dataclass
class Package:
    """Intermediate values handed from part to part for one frame."""

    frame: Frame
    record: FrameRecord
    keyframe: bool
    products: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# parts


def _flexion_part(line, state: WorldState, pkg: Package) -> None:
    depth = pkg.record.depth
    if depth is None:
        raise UnsatisfiableRequest("flexion needs a depth image")
    flex = depth_to_flexion(depth, state.intrinsics)
    pkg.products["flexion"] = flex
    if pkg.record.color is None:
        pkg.record.color = ColorImage(flex.as_rgb())


def _grid_patches(depth: DepthImage, stride: int):
    h, w = depth.shape
    vs, us = np.mgrid[0:h:stride, 0:w:stride]
    us, vs = us.ravel(), vs.ravel()
    ok = depth.validity[vs, us] & (depth.values[vs, us] > 0)
    px = np.stack([us[ok], vs[ok]], axis=1).astype(float)
    return px, 1.0 / depth.values[vs[ok], us[ok]]


def _select(n: int, k: int, seed: int) -> np.ndarray:
    if n <= k:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


def _track_against(state: WorldState, host: int, target: int, init: Pose) -> Pose:
    cfg = state.config
    px, inv = state.depth_frames[host]
    flow = state.source.flow(host, target)
    sel = _select(len(px), cfg.pipeline.n_patches * 4, cfg.seed + target)
    px, inv = px[sel], inv[sel]
    ui, vi = px[:, 0].astype(int), px[:, 1].astype(int)
    ok = flow.validity[vi, ui]
    px, inv = px[ok], inv[ok]
    sel = _select(len(px), cfg.pipeline.n_patches, cfg.seed + 7 * target)
    px, inv = px[sel], inv[sel]
    ui, vi = px[:, 0].astype(int), px[:, 1].astype(int)
    obs = px + flow.offsets[vi, ui]
    graph = PatchGraph(np.zeros(len(px), int), px, inv, [(n, 1) for n in range(len(px))], obs)
    poses = solve_pose_only(graph, [state.records[host].pose, init], state.intrinsics,
                            DbaConfig(max_iters=cfg.dba.max_iters, damping=cfg.dba.damping,
                                      tol=cfg.dba.tol))
    return poses[1]


def _host_for(state: WorldState, target: int) -> Optional[int]:
    for h in sorted(state.depth_frames, reverse=True):
        if h != target and state.source.flow(h, target) is not None:
            return h
    return None


def _two_view_depth(state: WorldState, ref: int, src: int, poses: Optional[list]):
    """Dense BA between two frames; returns (poses, grid pixels, inverse depth)."""
    cfg = state.config
    k = state.intrinsics
    fwd, bwd = state.source.flow(ref, src), state.source.flow(src, ref)
    mask, model, _ = correspondence_mask(fwd, bwd, k, cfg, cfg.seed)
    if poses is None:
        src_poses, med = _unposed_init([fwd], [mask], k, [model])
        init = [Pose.identity(), src_poses[0]]
        inv0 = 1.0 / med
    else:
        init = poses
        inv0 = 1.0
        if ref in state.depth_frames or src in state.depth_frames:
            known = state.depth_frames.get(src, state.depth_frames.get(ref))
            inv0 = float(np.median(known[1]))
    problem = DbaProblem.from_flows([fwd], k, init, inv0, [mask], cfg.dba.stride,
                                    optimize_poses=poses is None)
    sol = solve_dba(problem, DbaConfig(max_iters=cfg.dba.max_iters, damping=cfg.dba.damping,
                                       tol=cfg.dba.tol))
    h, w = fwd.shape
    vs, us = np.mgrid[0:h:cfg.dba.stride, 0:w:cfg.dba.stride]
    ok = (sol.solved & (sol.pixel_rms < cfg.dba.max_pixel_rms)).ravel()
    px = np.stack([us.ravel()[ok], vs.ravel()[ok]], axis=1).astype(float)
    return sol.poses, px, sol.inv_depth.ravel()[ok]


def _mono_tracking(line, state: WorldState, pkg: Package) -> None:
    fid = pkg.frame.id
    rec = pkg.record
    cfg = state.config.pipeline
    posed = state.posed_ids()
    if not posed:
        rec.pose = Pose.identity()
        return
    if not state.depth_frames:
        anchor = posed[0]
        if state.source.flow(anchor, fid) is None:
            raise DegenerateGeometry(f"no flow from anchor {anchor} to {fid}")
        poses, px, inv = _two_view_depth(state, anchor, fid, None)
        rel = poses[1]
        s = cfg.mono_baseline / np.linalg.norm(rel.translation)
        rec.pose = state.records[anchor].pose @ Pose(rel.quat, rel.translation * s)
        state.depth_frames[anchor] = (px, inv / s)
        return
    host = _host_for(state, fid)
    if host is None:
        raise DegenerateGeometry(f"frame {fid} has no flow to any depth frame")
    rec.pose = _track_against(state, host, fid, state.records[posed[-1]].pose)
    if fid - max(state.depth_frames) >= cfg.depth_gap and state.source.flow(fid, host) is not None:
        _, px, inv = _two_view_depth(state, fid, host, [rec.pose, state.records[host].pose])
        if len(px):
            state.depth_frames[fid] = (px, inv)


def _rgbd_tracking(line, state: WorldState, pkg: Package) -> None:
    fid = pkg.frame.id
    rec = pkg.record
    posed = state.posed_ids()
    if rec.depth is not None:
        state.depth_frames[fid] = _grid_patches(rec.depth, state.config.dba.stride)
    if not posed:
        rec.pose = Pose.identity()
        return
    host = _host_for(state, fid)
    if host is None:
        raise DegenerateGeometry(f"frame {fid} has no flow to any frame with depth")
    rec.pose = _track_against(state, host, fid, state.records[posed[-1]].pose)


def _tracking_part(line, state, pkg):
    if line.mono:
        _mono_tracking(line, state, pkg)
    else:
        _rgbd_tracking(line, state, pkg)


def _landmarks(state: WorldState, target: int, pose: Pose) -> list:
    """Tracking depth-frame points seen from ``target``, in the global scale."""
    k = state.intrinsics
    lms = []
    for h in sorted(state.depth_frames, reverse=True)[:2]:
        px, inv = state.depth_frames[h]
        hp = state.records[h].pose
        cam = np.stack([(px[:, 0] - k.cx) / k.fx, (px[:, 1] - k.cy) / k.fy, np.ones(len(px))], 1)
        world = hp.apply(cam / inv[:, None])
        local = pose.inverse().apply(world)
        front = local[:, 2] > 1e-6
        uv, z = project_points(local[front], k)
        inside = (uv[:, 0] >= 0) & (uv[:, 0] <= k.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= k.height - 1)
        lms.extend(((float(u), float(v)), float(d)) for (u, v), d in zip(uv[inside], z[inside]))
    sel = _select(len(lms), state.config.scale.max_landmarks, state.config.seed + target)
    return [lms[i] for i in sel]


def _depth_part(line, state: WorldState, pkg: Package) -> None:
    fid = pkg.frame.id
    if not pkg.keyframe:
        return
    cfg = state.config
    rec = pkg.record
    src = state.source
    if rec.pose is not None:
        cands = [(j, state.records[j].pose) for j in state.posed_ids()
                 if j != fid and src.flow(fid, j) is not None]
        pc = cfg.pipeline
        sources = select_neighbors(cands, rec.pose, pc.tau_baseline, pc.tau_facing, pc.tau_nb,
                                   pc.facing_greater)
    else:
        near = sorted((abs(j - fid), j) for j in state.records if j != fid
                      and src.flow(fid, j) is not None)
        sources = [j for _, j in near[:cfg.pipeline.tau_nb]]
    if not sources:
        state.skipped.append(fid)
        logger.info("frame %d: no good neighbours, depth skipped", fid)
        return
    flows = {}
    for j in sources:
        flows[(fid, j)] = src.flow(fid, j)
        back = src.flow(j, fid)
        if back is not None:
            flows[(j, fid)] = back
    poses = None
    if rec.pose is not None:
        poses = {j: state.records[j].pose for j in sources}
        poses[fid] = rec.pose
    landmarks = _landmarks(state, fid, rec.pose) if line.mono and rec.pose is not None else None
    est = estimate_depth(fid, sources, flows, state.intrinsics, cfg, poses, src.prior(fid),
                         optimize_intrinsics=line.uncalibrated, landmarks=landmarks)
    if line.uncalibrated:
        state.intrinsics = est.solution.intrinsics
    rec.depth = est.depth
    rec.depth_is_product = True
    pkg.products["depth"] = est.depth
    pkg.products["sources"] = sources


def _completion_part(line, state: WorldState, pkg: Package) -> None:
    fid = pkg.frame.id
    sparse = state.source.sparse(fid) if line.request.sparse_depth else None
    observed = sparse if sparse is not None else pkg.record.depth
    prior = state.source.prior(fid)
    if observed is None or prior is None:
        raise UnsatisfiableRequest(f"frame {fid}: completion needs sparse depth and a prior")
    sc = state.config.scalecov
    post = complete_depth(observed, prior, RbfKernel(sc.length_scale, sc.variance), sc.sigma_n,
                          sc.n_obs_max, seed=state.config.seed)
    pkg.record.depth = post.depth
    pkg.record.depth_is_product = True
    pkg.products["depth"] = post.depth
    pkg.products["variance"] = post.variance


def _publish(state: WorldState, rec: FrameRecord) -> None:
    """Hand a frame that left the tracking window to reconstruction."""
    rec.published = True
    if rec.depth is None or rec.color is None or rec.pose is None:
        return
    state.queue.add(*frame_points(rec.depth, rec.color, rec.pose, state.intrinsics), rec.id)
    for _ in range(state.config.pipeline.recon_steps):
        _train_once(state)


def _train_once(state: WorldState) -> None:
    loss = train_step(state.point_set, state.queue, state.config.neuralpoints.n_train, state.trainer)
    state.losses.append(loss)
    state.publisher.publish(state.point_set)


def _reconstruction_part(line, state: WorldState, pkg: Package) -> None:
    limit = pkg.frame.id - state.config.pipeline.window
    for fid in sorted(state.records):
        rec = state.records[fid]
        if fid <= limit and not rec.published:
            _publish(state, rec)


PARTS = {
    FLEXION: _flexion_part,
    TRACKING: _tracking_part,
    DEPTH_ESTIMATION: _depth_part,
    COMPLETION: _completion_part,
    RECONSTRUCTION: _reconstruction_part,
}


def is_keyframe(line: ProductLine, state: WorldState, fid: int) -> bool:
    if line.request.application == "MVD":
        return True
    return fid % state.config.pipeline.keyframe_interval == 0


def step(line: ProductLine, state: WorldState, frame: Frame):
    """Run every part of ``line`` on ``frame``; returns ``(state, products)``."""
    if frame.id <= state.last_id:
        raise ValueError(f"frame ids must increase ({frame.id} after {state.last_id})")
    rec = FrameRecord(frame.id, frame.pose, frame.color, frame.depth)
    state.records[frame.id] = rec
    pkg = Package(frame, rec, is_keyframe(line, state, frame.id))
    for part in line.parts:
        t0 = time.perf_counter()
        try:
            PARTS[part](line, state, pkg)
        except SceneKitError as exc:
            raise PartFailure(part, frame.id, exc) from exc
        finally:
            state.timing[part] = state.timing.get(part, 0.0) + time.perf_counter() - t0
    state.last_id = frame.id
    if rec.pose is not None:
        pkg.products.setdefault("pose", rec.pose)
    return state, pkg.products


def finish(line: ProductLine, state: WorldState) -> None:
    """Flush the tracking window into reconstruction and run the final steps."""
    if RECONSTRUCTION not in line:
        return
    t0 = time.perf_counter()
    for fid in sorted(state.records):
        if not state.records[fid].published:
            _publish(state, state.records[fid])
    if len(state.queue):
        for _ in range(state.config.pipeline.recon_final_steps):
            _train_once(state)
    state.timing[RECONSTRUCTION] = state.timing.get(RECONSTRUCTION, 0.0) + time.perf_counter() - t0


# ---------------------------------------------------------------------------
# whole sequences


def request_for(application: str, dataset: Dataset) -> AppRequest:
    return AppRequest(application, rgb=dataset.has_rgb, depth=dataset.has_depth,
                      sparse_depth=dataset.has_sparse, pose=bool(dataset.poses),
                      intrinsics=dataset.intrinsics is not None, prior=dataset.has_prior,
                      n_frames=len(dataset))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(float(f"{v:.12g}"))
    return str(v)


def write_metrics(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={_fmt(values[k])}\n" for k in sorted(values)))


def read_metrics(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            try:
                out[k] = int(v)
            except ValueError:
                try:
                    out[k] = float(v)
                except ValueError:
                    out[k] = v
    return out


def evaluate(line: ProductLine, state: WorldState, dataset: Dataset) -> dict:
    """Compare products with whatever ground truth the dataset carries."""
    m = {"frames": len(state.records)}
    depth_ids = [i for i, r in sorted(state.records.items()) if r.depth_is_product]
    m["depth_frames"] = len(depth_ids)
    if TRACKING in line and dataset.poses:
        ids = [i for i in state.posed_ids() if i in dataset.poses]
        if ids:
            est = [state.records[i].pose for i in ids]
            gt = [dataset.poses[i] for i in ids]
            m["ate_rmse"] = ate_rmse(est, gt, with_scale=line.mono)
    if depth_ids and dataset.has_depth:
        rows = []
        for i in depth_ids:
            gt = dataset.depth(i)
            est = state.records[i].depth
            if gt is None:
                continue
            try:
                rows.append((depth_metrics(est.values, gt.values, est.validity & gt.validity, True),
                             depth_metrics(est.values, gt.values, est.validity & gt.validity, False)))
            except EmptyOverlap:
                continue
        if rows:
            m["absrel"] = float(np.mean([a["absrel"] for a, _ in rows]))
            m["inlier_ratio"] = float(np.mean([a["inlier_ratio"] for a, _ in rows]))
            m["absrel_unaligned"] = float(np.mean([b["absrel"] for _, b in rows]))
    if RECONSTRUCTION in line and len(state.queue):
        snap = state.publisher.latest()
        vals = []
        for fid in state.queue.frame_ids:
            rec = state.records[fid]
            rgb, _, valid = render_view(snap.point_set, rec.pose, state.intrinsics,
                                        state.config.raster.th, state.config.raster.k_ray,
                                        state.config.raster.sigma)
            mask = valid & rec.depth.validity
            if mask.any():
                vals.append(psnr(rgb, rec.color.values, mask))
        if vals:
            m["psnr"] = float(np.mean(vals))
        m["train_steps"] = len(state.losses)
        m["points"] = int(sum(state.point_set.counts()))
    return m


def run_sequence(request, dataset_path, out_dir, config: Optional[Config] = None) -> dict:
    """Run ``request`` (an :class:`AppRequest` or application name) over a dataset.

    Writes ``trajectory.txt``, ``depth/``, ``flexion/``, ``model.npts``,
    ``metrics.txt`` (deterministic) and ``timing.txt`` under ``out_dir`` and
    returns the metrics.
    """
    cfg = config or Config()
    dataset = Dataset.open(dataset_path)
    if len(dataset) == 0:
        raise UnsatisfiableRequest(f"dataset {dataset_path} has no frames")
    if isinstance(request, str):
        request = request_for(request, dataset)
    line = establish_product_line(request)
    req = request.consumed()
    k = dataset.intrinsics if req.intrinsics else None
    if k is None:
        size = dataset.image_size()
        if size is None:
            raise UnsatisfiableRequest("cannot infer the image size")
        k = guess_intrinsics(*size)
    state = WorldState.create(cfg, k, FrameSource(dataset))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    for fid in dataset.ids:
        frame = dataset.frame(fid, rgb=req.rgb, depth=req.depth, pose=req.pose, intrinsics=False)
        frame = Frame(fid, frame.color, frame.depth, frame.pose, k)
        state, products = step(line, state, frame)
        if "flexion" in products:
            (out / "flexion").mkdir(exist_ok=True)
            write_gray_png(out / "flexion" / f"{frame_name(fid)}.png", products["flexion"].values)
        if "depth" in products:
            (out / "depth").mkdir(exist_ok=True)
            write_depth_png(out / "depth" / f"{frame_name(fid)}.png", products["depth"].values)
    finish(line, state)
    posed = {i: state.records[i].pose for i in state.posed_ids()}
    if TRACKING in line:
        write_poses(out / "trajectory.txt", posed)
    if RECONSTRUCTION in line:
        save_checkpoint(out / "model.npts", state.point_set)
    metrics = evaluate(line, state, dataset)
    metrics["line"] = ",".join(line.parts)
    if state.skipped:
        metrics["depth_skipped"] = ",".join(str(i) for i in state.skipped)
    if line.uncalibrated:
        metrics["intrinsics"] = " ".join(f"{v:.6f}" for v in state.intrinsics.params)
    write_metrics(out / "metrics.txt", metrics)
    timing = dict(state.timing)
    timing["total"] = time.perf_counter() - t_start
    (out / "timing.txt").write_text("".join(f"{p}={timing[p]:.6f}\n" for p in sorted(timing)))
    for p in sorted(timing):
        logger.info("stage %s: %.3f s", p, timing[p])
    return metrics
