"""Online training: frame queue, MSE loss with gradients, Adam, train_step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .points import NeuralPointSet, allocate, encode_batch

JUMP_START_ITERS = 5
JUMP_START_FACTOR = 10.0


@dataclass
class TrainFrameQueue:
    """Coloured point sets per frame with their trained-iteration counters."""

    positions: list = field(default_factory=list)
    colors: list = field(default_factory=list)
    frame_ids: list = field(default_factory=list)
    it_trained: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.positions)

    def add(self, positions: np.ndarray, colors: np.ndarray, frame_id=None) -> int:
        positions = np.asarray(positions, float).reshape(-1, 3)
        colors = np.asarray(colors, float).reshape(-1, 3)
        if len(positions) != len(colors):
            raise ValueError("positions and colors differ in length")
        if len(positions) == 0:
            raise ValueError("empty frame")
        self.positions.append(positions)
        self.colors.append(colors)
        self.frame_ids.append(len(self.positions) - 1 if frame_id is None else frame_id)
        self.it_trained.append(0)
        return len(self.positions) - 1

    def least_trained(self) -> int:
        """Index with the fewest trained iterations; the oldest wins ties."""
        if not self.positions:
            raise ValueError("queue is empty")
        return int(np.argmin(self.it_trained))


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def _state(self, key, shape):
        m = self.m.get(key)
        if m is None or m.shape != shape:
            # parameters may grow (new points); new rows start with zero moments
            grow = np.zeros(shape)
            grow_v = np.zeros(shape)
            if m is not None:
                rows = min(m.shape[0], shape[0])
                grow[:rows] = m[:rows]
                grow_v[:rows] = self.v[key][:rows]
            self.m[key], self.v[key] = grow, grow_v
        return self.m[key], self.v[key]

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """Update ``params`` in place (arrays keyed like ``grads``)."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for key, g in grads.items():
            p = params[key]
            m, v = self._state(key, p.shape)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def parameters(point_set: NeuralPointSet) -> dict:
    out = {}
    for i, lv in enumerate(point_set.levels):
        out[("feat", i)] = lv.features
    for i, (w, b) in enumerate(zip(point_set.decoder.weights, point_set.decoder.biases)):
        out[("w", i)] = w
        out[("b", i)] = b
    return out


def loss_and_grads(point_set: NeuralPointSet, positions: np.ndarray, colors: np.ndarray):
    """Mean squared colour error and its gradient for every parameter."""
    feat, info = encode_batch(point_set, positions, cache=True)
    pred, cache = point_set.decoder.forward(feat, cache=True)
    diff = pred - colors
    loss = float(np.mean(diff ** 2))
    dws, dbs, dfeat = point_set.decoder.backward(cache, 2.0 * diff / diff.size)
    grads = {}
    m = point_set.feature_dim
    for i, (lv, (idx, w)) in enumerate(zip(point_set.levels, info)):
        g = np.zeros_like(lv.features)
        contrib = w[:, :, None] * dfeat[:, None, i * m:(i + 1) * m]
        np.add.at(g, idx.ravel(), contrib.reshape(-1, m))
        grads[("feat", i)] = g
    for i, (dw, db) in enumerate(zip(dws, dbs)):
        grads[("w", i)] = dw
        grads[("b", i)] = db
    return loss, grads


def learning_rate(global_iter: int, base_lr: float, jump_start: bool = True) -> float:
    """Base rate, raised tenfold during the first global iterations."""
    if jump_start and global_iter < JUMP_START_ITERS:
        return JUMP_START_FACTOR * base_lr
    return base_lr


@dataclass
class TrainerState:
    optimizer: Adam = field(default_factory=Adam)
    global_iter: int = 0
    jump_start: bool = True
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    last_frame: int = -1


def train_step(point_set: NeuralPointSet, queue: TrainFrameQueue, n_train: int,
               state: TrainerState) -> float:
    """One optimisation step on the least-trained frame; returns the loss."""
    fi = queue.least_trained()
    pos, col = queue.positions[fi], queue.colors[fi]
    n = min(n_train, len(pos))
    sel = state.rng.choice(len(pos), size=n, replace=False)
    p, c = pos[sel], col[sel]
    allocate(point_set, p)
    loss, grads = loss_and_grads(point_set, p, c)
    lr = learning_rate(state.global_iter, state.optimizer.lr, state.jump_start)
    state.optimizer.step(parameters(point_set), grads, lr)
    state.global_iter += 1
    state.last_frame = fi
    queue.it_trained[fi] += 1
    return loss


def frame_points(depth, color, pose, k):
    """World positions and colours of the valid pixels of one posed RGB-D frame."""
    from ..geometry import unproject_depth

    cam = unproject_depth(np.where(depth.validity, depth.values, 0.0), k)[depth.validity]
    return pose.apply(cam), np.asarray(color.values, float)[depth.validity]


def train_on_frames(point_set: NeuralPointSet, frames, k, steps: int, n_train: int = 1024,
                    lr: float = 1e-3, jump_start: bool = True, seed: int = 0):
    """Queue every frame (``Frame`` with colour, depth and pose) and run ``steps`` steps.

    Returns ``(queue, state, losses)``.
    """
    queue = TrainFrameQueue()
    for f in frames:
        queue.add(*frame_points(f.depth, f.color, f.pose, k), f.id)
    state = TrainerState(Adam(lr=lr), jump_start=jump_start, rng=np.random.default_rng(seed))
    losses = [train_step(point_set, queue, n_train, state) for _ in range(steps)]
    return queue, state, losses
