"""Gaussian-process scale regression for depth completion.

A sparse or holey metric depth ``z`` is completed against a dense but
scale-ambiguous prior ``z_hat`` by regressing the per-pixel scale
``s = z / z_hat`` with a GP and blending it back where ``z`` is missing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NoObservations, NumericalFailure, SizeMismatch
from .geometry import DepthImage

logger = logging.getLogger(__name__)

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class Kernel:
    """Covariance over per-pixel feature vectors.

    Subclasses implement :meth:`features` (pixel list -> feature rows) and
    :meth:`__call__` (two feature matrices -> covariance block).
    """

    variance: float = 1.0

    def features(self, pixels: np.ndarray, shape: tuple, prior: Optional[np.ndarray] = None) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diag(self, a: np.ndarray) -> np.ndarray:
        return np.array([self(a[i:i + 1], a[i:i + 1])[0, 0] for i in range(len(a))])


@dataclass
class RbfKernel(Kernel):
    """Squared-exponential kernel over normalised pixel coordinates.

    ``log_depth_weight`` > 0 appends the prior's log-depth (scaled) to the
    features so scale correlation drops across depth discontinuities.
    """

    length_scale: float = 0.15
    variance: float = 1.0
    log_depth_weight: float = 0.0

    def features(self, pixels, shape, prior=None):
        pixels = np.asarray(pixels, float).reshape(-1, 2)
        h, w = shape
        f = pixels / np.array([w, h], float)
        if self.log_depth_weight > 0:
            if prior is None:
                raise ValueError("log-depth features need the prior depth")
            ui = np.clip(np.rint(pixels[:, 0]).astype(int), 0, w - 1)
            vi = np.clip(np.rint(pixels[:, 1]).astype(int), 0, h - 1)
            ld = np.log(prior[vi, ui]) * self.log_depth_weight
            f = np.concatenate([f, ld[:, None]], axis=1)
        return f

    def __call__(self, a, b):
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        d2 = (np.sum(a ** 2, 1)[:, None] + np.sum(b ** 2, 1)[None, :] - 2.0 * a @ b.T)
        d2 = np.maximum(d2, 0.0)
        return self.variance * np.exp(-0.5 * d2 / self.length_scale ** 2)

    def diag(self, a):
        return np.full(len(np.atleast_2d(a)), self.variance)


@dataclass(frozen=True)
class ScalePosterior:
    scale: np.ndarray
    variance: np.ndarray
    depth: DepthImage


def _check_pair(observed: DepthImage, prior: DepthImage):
    if observed.shape != prior.shape:
        raise SizeMismatch(f"observed {observed.shape} vs prior {prior.shape}")


def stratified_sample(mask: np.ndarray, n_max: int, seed: int = 0) -> np.ndarray:
    """Up to ``n_max`` ``(u, v)`` pixels of ``mask`` spread over a grid of cells.

    Cells are visited round-robin and a random member is taken from each, so
    sparse regions are not starved by dense ones.
    """
    vs, us = np.nonzero(mask)
    n = len(us)
    if n <= n_max:
        return np.stack([us, vs], axis=1).astype(float)
    h, w = mask.shape
    g = max(1, int(np.ceil(np.sqrt(n_max))))
    cell = (vs * g // h) * g + (us * g // w)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    # rank of each pixel within its cell, in random order
    cell_o = cell[order]
    srt = np.argsort(cell_o, kind="stable")
    starts = np.r_[0, np.flatnonzero(np.diff(cell_o[srt])) + 1]
    rank_sorted = np.arange(n) - np.repeat(starts, np.diff(np.r_[starts, n]))
    rank = np.empty(n, int)
    rank[srt] = rank_sorted
    pick = order[np.lexsort((cell_o, rank))[:n_max]]
    pick.sort()
    return np.stack([us[pick], vs[pick]], axis=1).astype(float)


def _factor(a: np.ndarray):
    scale = max(float(np.mean(np.diag(a))), 1e-300)
    for j in JITTERS:
        try:
            return cho_factor(a + j * scale * np.eye(len(a)), lower=True, check_finite=True)
        except np.linalg.LinAlgError:
            logger.debug("cholesky failed with jitter %g", j)
    raise NumericalFailure("covariance factorisation failed after jitter escalation")


def gp_posterior(obs_feats: np.ndarray, obs_values: np.ndarray, query_feats: np.ndarray,
                 kernel: Kernel, sigma_n: float, mean: Union[float, str] = 1.0,
                 chunk: int = 4096) -> tuple[np.ndarray, np.ndarray, float]:
    """Posterior mean and variance at ``query_feats``.

    ``mean`` is a constant prior mean or ``"fitted"`` for the generalised
    least-squares constant. Returns ``(mean, variance, prior_mean_used)``.
    """
    a = kernel(obs_feats, obs_feats) + sigma_n ** 2 * np.eye(len(obs_feats))
    fac = _factor(a)
    if isinstance(mean, str):
        if mean != "fitted":
            raise ValueError(f"unknown mean {mean!r}")
        ones = np.ones(len(obs_values))
        ai1 = cho_solve(fac, ones)
        m = float(ai1 @ obs_values / (ai1 @ ones))
    else:
        m = float(mean)
    alpha = cho_solve(fac, obs_values - m)
    n_q = len(query_feats)
    mu = np.empty(n_q)
    var = np.empty(n_q)
    for s in range(0, n_q, chunk):
        q = query_feats[s:s + chunk]
        kq = kernel(q, obs_feats)
        mu[s:s + chunk] = m + kq @ alpha
        v = cho_solve(fac, kq.T)
        var[s:s + chunk] = kernel.diag(q) - np.sum(kq.T * v, axis=0)
    return mu, np.maximum(var, 0.0), m


def observation_ratios(observed: DepthImage, prior: DepthImage) -> tuple[np.ndarray, np.ndarray]:
    both = observed.validity & prior.validity & (prior.values > 0)
    ratio = np.zeros(observed.shape)
    ratio[both] = observed.values[both] / prior.values[both]
    return both, ratio


def gp_regress_scale(observed: DepthImage, prior: DepthImage, kernel: Optional[Kernel] = None,
                     sigma_n: float = 0.05, queries: Optional[np.ndarray] = None,
                     n_obs_max: int = 1024, mean: Union[float, str] = 1.0,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Regress the scale ratio at ``queries`` (``(Q, 2)`` pixels, default all).

    Observations are ``observed / prior`` at pixels valid in both, thinned
    to ``n_obs_max`` by stratified sampling.
    """
    _check_pair(observed, prior)
    kernel = kernel or RbfKernel()
    both, ratio = observation_ratios(observed, prior)
    if not both.any():
        raise NoObservations("no pixel is valid in both the observed and prior depth")
    obs = stratified_sample(both, n_obs_max, seed)
    ou, ov = obs[:, 0].astype(int), obs[:, 1].astype(int)
    shape = observed.shape
    if queries is None:
        vs, us = np.mgrid[0:shape[0], 0:shape[1]]
        queries = np.stack([us.ravel(), vs.ravel()], axis=1).astype(float)
    queries = np.asarray(queries, float).reshape(-1, 2)
    pv = prior.values
    fo = kernel.features(obs, shape, pv)
    fq = kernel.features(queries, shape, pv)
    mu, var, _ = gp_posterior(fo, ratio[ov, ou], fq, kernel, sigma_n, mean)
    return mu, var


def complete_depth(observed: DepthImage, prior: DepthImage, kernel: Optional[Kernel] = None,
                   sigma_n: float = 0.05, n_obs_max: int = 1024,
                   mean: Union[float, str] = "fitted", seed: int = 0) -> ScalePosterior:
    """Blend observed depth with GP-completed ``scale * prior`` elsewhere.

    The default prior mean is the GLS constant fitted to the observations,
    so a globally rescaled prior is completed exactly; pass ``mean=1.0`` to
    fall back to the prior's own scale far from observations.
    """
    _check_pair(observed, prior)
    both, ratio = observation_ratios(observed, prior)
    if not both.any():
        raise NoObservations("no pixel is valid in both the observed and prior depth")
    h, w = observed.shape
    scale = np.where(both, ratio, 0.0)
    var = np.zeros((h, w))
    todo = ~observed.validity & prior.validity & (prior.values > 0)
    if todo.any():
        vs, us = np.nonzero(todo)
        q = np.stack([us, vs], axis=1).astype(float)
        mu, sv = gp_regress_scale(observed, prior, kernel, sigma_n, q, n_obs_max, mean, seed)
        scale[vs, us] = mu
        var[vs, us] = sv
    valid_out = both | todo
    # observed pixels keep their measured depth verbatim
    direct = observed.validity
    depth = np.where(valid_out, scale * prior.values, 0.0)
    depth[direct] = observed.values[direct]
    valid_out |= direct
    return ScalePosterior(scale, var, DepthImage(depth, valid_out & (depth > 0)))


def kernel_from_callable(fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                         variance: float = 1.0) -> Kernel:
    """Wrap a plain ``k(A, B) -> matrix`` over normalised ``(u/W, v/H)``."""

    class _Wrapped(Kernel):
        def features(self, pixels, shape, prior=None):
            h, w = shape
            return np.asarray(pixels, float).reshape(-1, 2) / np.array([w, h], float)

        def __call__(self, a, b):
            return fn(np.atleast_2d(a), np.atleast_2d(b))

    k = _Wrapped()
    k.variance = variance
    return k
