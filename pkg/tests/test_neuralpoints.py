import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenekit.errors import EmptyLevel
from scenekit.neuralpoints import (Mlp, NeuralPointSet, SnapshotPublisher, TrainerState,
                                   TrainFrameQueue, allocate, encode, encode_batch, freeze,
                                   interpolation_weights, learning_rate, load_checkpoint,
                                   loss_and_grads, parameters, predict_color, save_checkpoint,
                                   train_step, voxel_representatives)
from scenekit.neuralpoints.train import Adam


def plane_cloud(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    return np.c_[rng.random(n), rng.random(n), np.full(n, 2.0)]


def tiny_set(seed=0, n=6):
    ps = NeuralPointSet(n_levels=2, r0=0.05, multiplier=2.0, feature_dim=3, k=2, hidden=(5,), seed=seed)
    rng = np.random.default_rng(seed)
    allocate(ps, rng.random((n, 3)))
    for lv in ps.levels:
        lv.features = rng.normal(0, 0.5, lv.features.shape)
    return ps


def test_levels_and_defaults():
    ps = NeuralPointSet()
    assert ps.resolutions == pytest.approx([0.005, 0.02, 0.08])
    assert ps.decoder.n_in == 3 * 8
    lv = ps.levels[0]
    assert lv.t_a == pytest.approx(0.0025) and lv.sigma == pytest.approx(0.0025 ** 2)


def test_plane_allocation_fills_every_level():
    ps = NeuralPointSet()
    allocate(ps, plane_cloud())
    counts = ps.counts()
    assert all(c > 0 for c in counts)
    assert counts[0] >= counts[-1]


def test_reallocation_is_idempotent():
    ps = NeuralPointSet()
    pts = plane_cloud()
    allocate(ps, pts)
    assert allocate(ps, pts) == [0, 0, 0]


def test_close_pair_allocates_once():
    ps = NeuralPointSet()
    ps.levels[0].t_a = 0.005
    # different 5 mm voxels, so both survive downsampling
    added = allocate(ps, np.array([[0.0041, 0.0, 0.0], [0.0071, 0.0, 0.0]]))
    assert added[0] == 1


def test_existing_points_are_never_moved():
    ps = NeuralPointSet(seed=1)
    allocate(ps, plane_cloud(300, 0))
    before = [(lv.positions.copy(), lv.features.copy()) for lv in ps.levels]
    allocate(ps, plane_cloud(300, 1) + [0.001, 0.0, 0.0])
    for (pos, feat), lv in zip(before, ps.levels):
        assert np.array_equal(lv.positions[: len(pos)], pos)
        assert np.array_equal(lv.features[: len(feat)], feat)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_allocation_respects_threshold(seed, batches):
    ps = NeuralPointSet(n_levels=2, r0=0.02, seed=seed)
    rng = np.random.default_rng(seed)
    for _ in range(batches):
        allocate(ps, rng.random((200, 3)) * 0.3)
    for lv in ps.levels:
        d = np.linalg.norm(lv.positions[:, None] - lv.positions[None], axis=2)
        np.fill_diagonal(d, np.inf)
        assert d.min() > lv.t_a
        assert lv.tree.n == len(lv.positions)


def test_voxel_representatives_keep_first_point():
    pts = np.array([[0.01, 0, 0], [0.02, 0, 0], [0.3, 0, 0], [0.04, 0, 0]])
    assert voxel_representatives(pts, 0.1).tolist() == [0, 2]


def test_weight_examples():
    w = interpolation_weights(np.array([0.01, 0.02]), 1e-4)
    assert w[0] == pytest.approx(np.exp(-1) / (np.exp(-1) + np.exp(-4)), abs=1e-12)
    assert w[0] == pytest.approx(0.9526, abs=1e-4)
    assert np.allclose(interpolation_weights(np.array([0.3, 0.3]), 0.01), 0.5)


def test_coincident_point_single_neighbour():
    ps = NeuralPointSet(n_levels=1, k=1)
    allocate(ps, np.array([[0.0, 0.0, 1.0], [0.5, 0.0, 1.0]]))
    lv = ps.levels[0]
    assert np.array_equal(encode(ps, lv.positions[1]), lv.features[1])


def test_empty_level_raises():
    with pytest.raises(EmptyLevel):
        encode(NeuralPointSet(), [0.0, 0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_encoding_weights_normalised_and_continuous(seed):
    ps = NeuralPointSet(n_levels=2, r0=0.05, seed=seed)
    rng = np.random.default_rng(seed)
    allocate(ps, rng.random((100, 3)))
    q = rng.random((5, 3))
    _, info = encode_batch(ps, q, cache=True)
    for _, w in info:
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)
    a = encode_batch(ps, q)
    b = encode_batch(ps, q + 1e-6)
    assert np.max(np.abs(a - b)) < 1e-3


def test_zero_decoder_predicts_grey():
    ps = NeuralPointSet(n_levels=1)
    allocate(ps, plane_cloud(50))
    ps.decoder = Mlp.zeros(ps.decoder.n_in)
    assert np.array_equal(predict_color(ps, [0.3, 0.3, 2.0]), [0.5, 0.5, 0.5])


def _fd_check(ps, pos, col, eps=1e-6):
    _, grads = loss_and_grads(ps, pos, col)
    params = parameters(ps)
    errs = []
    for key, p in params.items():
        g = grads[key]
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            lp, _ = loss_and_grads(ps, pos, col)
            p[idx] = old - eps
            lm, _ = loss_and_grads(ps, pos, col)
            p[idx] = old
            fd[idx] = (lp - lm) / (2 * eps)
        if np.linalg.norm(fd) > 1e-10:
            errs.append(np.linalg.norm(g - fd) / np.linalg.norm(fd))
    return max(errs)


@pytest.mark.parametrize("seed", range(3))
def test_full_gradient_matches_finite_differences(seed):
    ps = tiny_set(seed)
    rng = np.random.default_rng(seed + 5)
    pos = rng.random((7, 3))
    col = rng.random((7, 3))
    assert _fd_check(ps, pos, col) < 1e-4


def test_decoder_gradient_default_width():
    ps = NeuralPointSet(n_levels=3, seed=4)
    rng = np.random.default_rng(4)
    allocate(ps, rng.random((8, 3)))
    x = rng.normal(0, 0.5, (4, ps.decoder.n_in))
    target = rng.random((4, 3))
    out, cache = ps.decoder.forward(x, cache=True)
    dws, dbs, dx = ps.decoder.backward(cache, 2 * (out - target) / out.size)

    def loss():
        return np.mean((ps.decoder.forward(x) - target) ** 2)

    eps = 1e-6
    for w, dw in zip(ps.decoder.weights, dws):
        for idx in [tuple(rng.integers(0, s) for s in w.shape) for _ in range(20)]:
            old = w[idx]
            w[idx] = old + eps
            lp = loss()
            w[idx] = old - eps
            lm = loss()
            w[idx] = old
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - dw[idx]) <= 1e-4 * max(abs(fd), 1e-6)


def test_overfits_single_colour():
    ps = NeuralPointSet(seed=0)
    pts = plane_cloud(400) * [0.2, 0.2, 1.0]
    queue = TrainFrameQueue()
    queue.add(pts, np.tile([1.0, 0.0, 0.0], (len(pts), 1)))
    state = TrainerState(Adam(lr=1e-2))
    for _ in range(300):
        train_step(ps, queue, 256, state)
    pred = ps.decoder.forward(encode_batch(ps, pts))
    assert np.max(np.abs(pred - [1.0, 0.0, 0.0])) < 0.02


def test_least_trained_frame_selected():
    q = TrainFrameQueue()
    for _ in range(3):
        q.add(np.zeros((1, 3)), np.zeros((1, 3)))
    q.it_trained = [5, 2, 7]
    assert q.least_trained() == 1
    q.it_trained = [3, 3, 4]
    assert q.least_trained() == 0


def test_train_step_updates_least_trained_counter():
    ps = NeuralPointSet()
    q = TrainFrameQueue()
    q.add(plane_cloud(100, 0), np.full((100, 3), 0.2))
    q.add(plane_cloud(100, 1), np.full((100, 3), 0.7))
    state = TrainerState()
    for _ in range(5):
        train_step(ps, q, 32, state)
    assert q.it_trained == [3, 2]
    assert state.global_iter == 5


def test_jump_start_schedule():
    assert learning_rate(3, 1e-3) == pytest.approx(1e-2)
    assert learning_rate(4, 1e-3) == pytest.approx(1e-2)
    assert learning_rate(5, 1e-3) == pytest.approx(1e-3)
    assert learning_rate(0, 1e-3, jump_start=False) == pytest.approx(1e-3)


def test_checkpoint_round_trip(tmp_path):
    ps = NeuralPointSet(seed=2)
    allocate(ps, plane_cloud(200))
    save_checkpoint(tmp_path / "m.npts", ps)
    back = load_checkpoint(tmp_path / "m.npts")
    assert back.counts() == ps.counts()
    for a, b in zip(ps.levels, back.levels):
        assert np.allclose(a.positions, b.positions, atol=1e-6)
        assert np.allclose(a.features, b.features, atol=1e-7)
        assert (a.t_a, a.sigma, a.resolution) == (b.t_a, b.sigma, b.resolution)
    q = [0.5, 0.5, 2.0]
    assert np.allclose(predict_color(ps, q), predict_color(back, q), atol=1e-5)
    (tmp_path / "bad").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


def test_snapshots_are_immutable_copies():
    ps = NeuralPointSet()
    allocate(ps, plane_cloud(100))
    snap = freeze(ps)
    with pytest.raises(ValueError):
        snap.levels[0].features[0, 0] = 1.0
    ps.levels[0].features[0, 0] += 1.0
    assert snap.levels[0].features[0, 0] != ps.levels[0].features[0, 0]


def test_publisher_versions_under_concurrent_readers():
    ps = NeuralPointSet()
    allocate(ps, plane_cloud(100))
    pub = SnapshotPublisher()
    assert pub.latest() is None
    seen = []

    def reader():
        for _ in range(200):
            s = pub.latest()
            if s is not None:
                seen.append((s.version, s.point_set.counts()))

    t = threading.Thread(target=reader)
    t.start()
    for _ in range(20):
        pub.publish(ps)
    t.join()
    assert pub.latest().version == 19
    assert all(c == ps.counts() for _, c in seen)
