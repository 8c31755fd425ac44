from dataclasses import replace

import numpy as np
import pytest

from scenekit.config import Config, NeuralPointParams, PipelineParams
from scenekit.dataset import Dataset, read_poses
from scenekit.errors import PartFailure, UnsatisfiableRequest
from scenekit.neuralpoints import load_checkpoint
from scenekit.pipeline import (APPLICATIONS, COMPLETION, DEPTH_ESTIMATION, FLEXION, RECONSTRUCTION,
                               TRACKING, AppRequest, FrameSource, WorldState, establish_product_line,
                               read_metrics, run_sequence, step)
from scenekit.pipeline import runner
from scenekit.pipeline.assembly import PRODUCES

FAST = Config(pipeline=PipelineParams(recon_steps=3), neuralpoints=NeuralPointParams(n_train=256))
ALL = dict(rgb=True, depth=True, sparse_depth=True, pose=True, intrinsics=True, prior=True)


def line(app, **flags):
    return establish_product_line(AppRequest(app, **flags)).parts


def test_mono_from_rgb_only():
    assert line("Mono-SLAM", rgb=True) == (TRACKING, DEPTH_ESTIMATION, RECONSTRUCTION)


def test_reconstruction_with_everything():
    assert line("Reconstruction", rgb=True, depth=True, pose=True, intrinsics=True) == (RECONSTRUCTION,)


def test_depth_only_slam():
    assert line("Depth-only-SLAM", depth=True, intrinsics=True) == (FLEXION, TRACKING, RECONSTRUCTION)


def test_other_assemblies():
    assert line("Completion", sparse_depth=True, prior=True) == (COMPLETION,)
    assert line("Flexion", depth=True, intrinsics=True) == (FLEXION,)
    assert line("MVD", rgb=True, n_frames=5) == (DEPTH_ESTIMATION,)
    assert line("Tracking", **ALL) == (TRACKING,)
    assert line("RGB-D-SLAM", **ALL) == (TRACKING, RECONSTRUCTION)
    assert line("Reconstruction", rgb=True, sparse_depth=True, prior=True, pose=True,
                intrinsics=True) == (COMPLETION, RECONSTRUCTION)
    assert line("Reconstruction", rgb=True, intrinsics=True) == (TRACKING, DEPTH_ESTIMATION,
                                                                 RECONSTRUCTION)
    assert establish_product_line(AppRequest("Mono-SLAM", rgb=True)).uncalibrated


@pytest.mark.parametrize("app, flags", [
    ("MVD", dict(rgb=True, n_frames=1)),
    ("Mono-SLAM", dict(pose=True, intrinsics=True)),
    ("Reconstruction", dict(pose=True, intrinsics=True)),
    ("Flexion", dict(rgb=True, intrinsics=True)),
    ("Mono-SLAM", dict(depth=True, intrinsics=True)),
    ("Depth-only-SLAM", dict(rgb=True, intrinsics=True)),
    ("Reconstruction", dict(rgb=True, depth=True, pose=True)),
    ("Mono-SLAM", dict(rgb=True, n_frames=0)),
])
def test_unsatisfiable_requests(app, flags):
    with pytest.raises(UnsatisfiableRequest):
        establish_product_line(AppRequest(app, **flags))


def test_unknown_application():
    with pytest.raises(UnsatisfiableRequest):
        AppRequest("Teleport", rgb=True)


def _all_requests():
    keys = ("rgb", "depth", "sparse_depth", "pose", "intrinsics", "prior")
    for app in APPLICATIONS:
        for bits in range(1 << len(keys)):
            yield AppRequest(app, **{k: bool(bits >> i & 1) for i, k in enumerate(keys)})


TARGETS = {
    "Flexion": {FLEXION}, "Completion": {COMPLETION}, "MVD": {DEPTH_ESTIMATION},
    "Tracking": {TRACKING}, "Reconstruction": {RECONSTRUCTION},
    "RGB-D-SLAM": {TRACKING, RECONSTRUCTION}, "Mono-SLAM": {TRACKING, RECONSTRUCTION},
    "Depth-only-SLAM": {TRACKING, RECONSTRUCTION},
}


def test_lines_are_minimal():
    built = 0
    for req in _all_requests():
        try:
            pl = establish_product_line(req)
        except UnsatisfiableRequest:
            continue
        built += 1
        used = req.consumed()
        have = {k for k in ("rgb", "depth", "pose") if getattr(used, k)}
        for part in pl.parts:
            if part not in TARGETS[req.application]:
                # helper parts only run to supply something still missing
                assert not PRODUCES[part] <= have, (req, pl.parts)
            have |= PRODUCES[part]
        assert TARGETS[req.application] <= set(pl.parts)
        assert len(set(pl.parts)) == len(pl.parts)
        assert establish_product_line(req).parts == pl.parts
    assert built > 50


def _state(room_dir, config=FAST):
    ds = Dataset.open(room_dir)
    return ds, WorldState.create(config, ds.intrinsics, FrameSource(ds))


def test_mono_cold_start_has_no_depth(room_dir):
    ds, state = _state(room_dir)
    pl = establish_product_line(AppRequest("Mono-SLAM", rgb=True, intrinsics=True))
    state, products = step(pl, state, ds.frame(0, depth=False, pose=False))
    assert "depth" not in products
    assert state.records[0].pose is not None
    assert state.skipped == [0]


def test_missing_neighbours_skip_depth_but_advance(room_dir):
    ds, state = _state(room_dir, replace(FAST, pipeline=replace(FAST.pipeline, tau_baseline=100.0,
                                                                keyframe_interval=1)))
    pl = establish_product_line(AppRequest("Mono-SLAM", rgb=True, intrinsics=True))
    for i in range(4):
        state, products = step(pl, state, ds.frame(i, depth=False, pose=False))
        assert "depth" not in products
    assert state.skipped == [0, 1, 2, 3]
    assert state.posed_ids() == [0, 1, 2, 3]


def test_frame_ids_must_increase(room_dir):
    ds, state = _state(room_dir)
    pl = establish_product_line(AppRequest("Flexion", depth=True, intrinsics=True))
    step(pl, state, ds.frame(2))
    with pytest.raises(ValueError):
        step(pl, state, ds.frame(1))


def test_part_failure_names_the_part(room_dir):
    ds, state = _state(room_dir)
    state.source = FrameSource()       # no priors reachable
    pl = establish_product_line(AppRequest("Completion", sparse_depth=True, prior=True))
    with pytest.raises(PartFailure) as info:
        step(pl, state, ds.frame(0))
    assert info.value.part == COMPLETION and info.value.frame_id == 0


def test_reconstruction_trains_and_renders(room_dir, tmp_path):
    m = run_sequence("Reconstruction", room_dir, tmp_path, FAST)
    assert m["line"] == RECONSTRUCTION
    assert m["train_steps"] == 3 * 10
    model = load_checkpoint(tmp_path / "model.npts")
    assert all(c > 0 for c in model.counts())
    assert np.isfinite(m["psnr"])


def test_reconstruction_only_sees_frames_outside_window(room_dir, monkeypatch):
    ds, state = _state(room_dir)
    pl = establish_product_line(AppRequest("RGB-D-SLAM", rgb=True, depth=True, intrinsics=True))
    window = FAST.pipeline.window
    published = []
    current = {"id": -1}
    original = runner._publish

    def spy(st, rec):
        published.append((rec.id, current["id"], rec.pose, rec.depth))
        original(st, rec)

    monkeypatch.setattr(runner, "_publish", spy)
    for i in range(len(ds)):
        current["id"] = i
        step(pl, state, ds.frame(i, pose=False))
    assert published
    for fid, cur, pose, depth in published:
        assert fid <= cur - window
        # published records are never touched again
        assert state.records[fid].pose is pose and state.records[fid].depth is depth


def test_empty_dataset(tmp_path):
    (tmp_path / "ds").mkdir()
    with pytest.raises(UnsatisfiableRequest):
        run_sequence("Mono-SLAM", tmp_path / "ds", tmp_path / "out")


def test_rgbd_slam_trajectory(room_dir, tmp_path):
    m = run_sequence("RGB-D-SLAM", room_dir, tmp_path, FAST)
    est = read_poses(tmp_path / "trajectory.txt")
    assert sorted(est) == list(range(10))
    assert m["ate_rmse"] < 1e-3


def test_runs_are_byte_identical(room_dir, tmp_path):
    for out in ("a", "b"):
        run_sequence("RGB-D-SLAM", room_dir, tmp_path / out, FAST)
    for name in ("trajectory.txt", "metrics.txt", "model.npts"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert read_metrics(tmp_path / "a" / "metrics.txt")["line"] == "tracking,reconstruction"


def test_completion_app(room_dir, tmp_path):
    m = run_sequence("Completion", room_dir, tmp_path, FAST)
    assert m["depth_frames"] == 10
    assert m["absrel"] < 0.01
    assert len(list((tmp_path / "depth").glob("*.png"))) == 10
