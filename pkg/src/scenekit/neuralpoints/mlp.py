"""Small fully-connected decoder with manual backpropagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Mlp:
    """Softplus hidden layers and a sigmoid head."""

    weights: list
    biases: list

    @classmethod
    def create(cls, n_in: int, hidden=(64, 64), n_out: int = 3, rng=None) -> "Mlp":
        rng = rng or np.random.default_rng(0)
        sizes = [n_in, *hidden, n_out]
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, np.sqrt(2.0 / (a + b)), (a, b)))
            bs.append(np.zeros(b))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, n_in: int, hidden=(64, 64), n_out: int = 3) -> "Mlp":
        sizes = [n_in, *hidden, n_out]
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]])

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray, cache: bool = False):
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = sigmoid(z) if i == last else softplus(z)
            acts.append(h)
        return (h, (acts, pre)) if cache else h

    def backward(self, cache, grad_out: np.ndarray):
        """Gradients of a scalar loss given ``dL/d(output)``.

        Returns ``(dW list, db list, dL/dx)``.
        """
        acts, pre = cache
        n = len(self.weights)
        dws, dbs = [None] * n, [None] * n
        out = acts[-1]
        g = grad_out * out * (1.0 - out)
        for i in range(n - 1, -1, -1):
            dws[i] = acts[i].T @ g
            dbs[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * sigmoid(pre[i - 1])
        return dws, dbs, g
