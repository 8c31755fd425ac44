import numpy as np
import pytest

from helpers import perturb_pose
from scenekit.dba import (DbaConfig, PatchGraph, pose_only_jacobian, pose_only_residuals,
                          solve_pose_only)
from scenekit.errors import InsufficientConstraints
from scenekit.geometry import Intrinsics, Pose, rotation_distance

K = Intrinsics(120.0, 120.0, 79.5, 59.5, 160, 120)
VGA = Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


def make_graph(seed, n_frames=3, n_patches=60, noise=0.0, depth=(1.8, 2.2), k=K):
    rng = np.random.default_rng(seed)
    poses = [Pose()] + [Pose.from_rotvec(rng.normal(0, 0.03, 3), [0.08 * f, rng.normal(0, 0.02), 0.02 * f])
                        for f in range(1, n_frames)]
    hosts = rng.integers(0, n_frames, n_patches)
    px = np.stack([rng.uniform(0.1, 0.9, n_patches) * k.width, rng.uniform(0.1, 0.9, n_patches) * k.height], 1)
    inv = 1.0 / rng.uniform(*depth, n_patches)
    edges, obs = [], []
    for kk in range(n_patches):
        h = hosts[kk]
        ray = np.array([(px[kk, 0] - k.cx) / k.fx, (px[kk, 1] - k.cy) / k.fy, 1.0]) / inv[kk]
        world = poses[h].apply(ray)
        for j in range(n_frames):
            if j == h:
                continue
            c = poses[j].inverse().apply(world)
            edges.append((kk, j))
            obs.append([k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy])
    obs = np.asarray(obs) + rng.normal(0, noise, (len(obs), 2)) if noise else np.asarray(obs)
    return PatchGraph(hosts, px, inv, edges, obs), poses


def test_noise_free_recovery():
    graph, truth = make_graph(0)
    rng = np.random.default_rng(1)
    init = [truth[0]] + [perturb_pose(p, rng, 0.01, 0.02) for p in truth[1:]]
    out = solve_pose_only(graph, init, K)
    for a, b in zip(out, truth):
        assert rotation_distance(a, b) < 1e-8
        assert np.linalg.norm(a.translation - b.translation) < 1e-8


def test_first_pose_and_depths_untouched():
    graph, truth = make_graph(2)
    inv = graph.patch_inv_depth.copy()
    rng = np.random.default_rng(3)
    init = [perturb_pose(truth[0], rng)] + truth[1:]
    out = solve_pose_only(graph, init, K)
    assert out[0] is init[0]
    assert np.array_equal(graph.patch_inv_depth, inv)


def test_five_edges_is_insufficient():
    graph, truth = make_graph(0, n_frames=2, n_patches=5)
    graph = PatchGraph(np.zeros(5, int), graph.patch_pixels, graph.patch_inv_depth,
                       [(k, 1) for k in range(5)], graph.observations[:5])
    with pytest.raises(InsufficientConstraints):
        solve_pose_only(graph, truth, K)


def test_translation_error_under_observation_noise():
    errs = []
    for seed in range(20):
        graph, truth = make_graph(seed, n_frames=2, n_patches=200, noise=0.5, k=VGA)
        out = solve_pose_only(graph, [truth[0], perturb_pose(truth[1], np.random.default_rng(seed))], VGA)
        errs.append(np.linalg.norm(out[1].translation - truth[1].translation))
    assert np.mean(errs) < 5e-3


@pytest.mark.parametrize("seed", range(4))
def test_jacobian_matches_central_differences(seed):
    graph, truth = make_graph(seed, n_frames=3, n_patches=12)
    rng = np.random.default_rng(seed + 10)
    poses = [perturb_pose(p, rng, 0.02, 0.03) for p in truth]
    jac = pose_only_jacobian(graph, poses, K)
    eps = 1e-6
    fd = np.zeros_like(jac)
    for f in range(len(poses)):
        for c in range(6):
            xi = np.zeros(6)
            xi[c] = eps
            plus = list(poses)
            minus = list(poses)
            plus[f] = poses[f].inverse().perturb_left(xi).inverse()
            minus[f] = poses[f].inverse().perturb_left(-xi).inverse()
            fd[:, :, 6 * f + c] = (pose_only_residuals(graph, plus, K)
                                   - pose_only_residuals(graph, minus, K)) / (2 * eps)
    assert np.linalg.norm(jac - fd) / np.linalg.norm(fd) < 1e-6


def test_weights_scale_residuals():
    graph, truth = make_graph(4, n_frames=2, n_patches=8)
    moved = [truth[0], Pose(translation=[0.05, 0, 0]) @ truth[1]]
    r1 = pose_only_residuals(graph, moved, K)
    w = PatchGraph(graph.patch_frames, graph.patch_pixels, graph.patch_inv_depth, graph.edges,
                   graph.observations, weights=np.full(len(graph.edges), 4.0))
    assert np.allclose(pose_only_residuals(w, moved, K), 2.0 * r1)


def test_deltas_shift_targets():
    graph, truth = make_graph(5, n_frames=2, n_patches=10)
    d = np.tile([1.5, -0.5], (len(graph.edges), 1))
    shifted = PatchGraph(graph.patch_frames, graph.patch_pixels, graph.patch_inv_depth, graph.edges,
                         graph.observations - d, deltas=d)
    assert np.allclose(pose_only_residuals(shifted, truth, K), 0.0, atol=1e-9)


def test_cost_drops_with_noise():
    graph, truth = make_graph(6, n_frames=3, n_patches=80, noise=0.3)
    init = [truth[0]] + [perturb_pose(p, np.random.default_rng(0), 0.02, 0.03) for p in truth[1:]]
    before = np.sum(pose_only_residuals(graph, init, K) ** 2)
    after = np.sum(pose_only_residuals(graph, solve_pose_only(graph, init, K, DbaConfig(max_iters=30)), K) ** 2)
    assert after < before
