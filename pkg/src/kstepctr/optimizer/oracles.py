"""Stochastic gradient oracles for the synthetic benchmarks.

An oracle represents ``f(x) = mean_i f_i(x)`` split over worker shards. Worker
``i`` uses shard ``i % n_parts``. ``gradient`` returns ``grad f_i(x) + noise``
drawn from the supplied generator.
"""

from __future__ import annotations

import numpy as np


class GradientOracle:
    n_parts = 1
    noise_std = 0.0

    def local_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def true_gradient(self, x: np.ndarray) -> np.ndarray:
        grads = [self.local_gradient(i, x) for i in range(self.n_parts)]
        return np.mean(grads, axis=0)

    def loss(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, i: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        g = self.local_gradient(i % self.n_parts, x)
        if self.noise_std > 0:
            g = g + self.noise_std * rng.standard_normal(g.shape)
        return g


class QuadraticOracle(GradientOracle):
    """``f_i(x) = 0.5 (x - c_i)^T A (x - c_i)`` with Gaussian gradient noise."""

    def __init__(self, centers, A=None, noise_std: float = 0.0):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        self.n_parts = self.centers.shape[0]
        d = self.centers.shape[1]
        self.A = np.eye(d) if A is None else np.asarray(A, dtype=np.float64)
        if self.A.shape != (d, d):
            raise ValueError("A must be d x d")
        self.noise_std = float(noise_std)

    def local_gradient(self, i, x):
        return self.A @ (np.asarray(x) - self.centers[i])

    def loss(self, x):
        diffs = np.asarray(x) - self.centers
        return float(np.mean(0.5 * np.einsum("nd,de,ne->n", diffs, self.A, diffs)))


class NonconvexOracle(GradientOracle):
    """Smooth nonconvex sum of Cauchy-type terms, ``f_i(x) = sum_j log(1 + (x_j - c_ij)^2)``.

    Each term has curvature ``2(1 - u^2)/(1 + u^2)^2``, negative for |u| > 1,
    gradients bounded by 1 per coordinate and smoothness constant L = 2.
    """

    def __init__(self, dim: int = 20, n_parts: int = 4, spread: float = 0.5,
                 noise_std: float = 0.5, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.centers = spread * rng.standard_normal((n_parts, dim))
        self.n_parts = n_parts
        self.noise_std = float(noise_std)

    def local_gradient(self, i, x):
        u = np.asarray(x) - self.centers[i]
        return 2.0 * u / (1.0 + u * u)

    def loss(self, x):
        u = np.asarray(x) - self.centers
        return float(np.mean(np.log1p(u * u).sum(axis=1)))


class FunctionOracle(GradientOracle):
    """Wraps plain callables; ``gradient_fn(i, x, rng)`` supplies the stochastic gradient."""

    def __init__(self, gradient_fn, true_gradient_fn=None, loss_fn=None, local_gradient_fn=None):
        self._gradient = gradient_fn
        self._true = true_gradient_fn
        self._loss = loss_fn
        self._local = local_gradient_fn

    def gradient(self, i, x, rng):
        return self._gradient(i, x, rng)

    def local_gradient(self, i, x):
        if self._local is not None:
            return self._local(i, x)
        if self._true is not None:
            return self._true(x)
        raise NotImplementedError

    def true_gradient(self, x):
        if self._true is None:
            raise NotImplementedError
        return self._true(x)

    def loss(self, x):
        if self._loss is None:
            raise NotImplementedError
        return self._loss(x)
