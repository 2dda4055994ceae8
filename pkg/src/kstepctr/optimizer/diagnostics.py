"""Empirical checks of the quantities behind the k-step Adam convergence bound."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kstep import Trajectory


def scaled_grad_norm(grad, v_bar) -> float:
    """``||grad / v_bar**(1/4)||^2``, i.e. ``sum(grad**2 / sqrt(v_bar))``."""
    grad = np.asarray(grad, dtype=np.float64)
    return float(np.sum(grad * grad / np.sqrt(np.asarray(v_bar, dtype=np.float64))))


def convergence_metric(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Per-step scaled gradient norm and its running average.

    Requires the trajectory to carry the full-objective gradient at each x_bar.
    """
    if traj.true_grad is None:
        raise ValueError("trajectory has no true gradient; the oracle must expose true_gradient")
    g = traj.true_grad
    per_step = np.sum(g * g / np.sqrt(traj.v_bar), axis=1)
    running = np.cumsum(per_step) / np.arange(1, len(per_step) + 1)
    return per_step, running


def fit_a3_exponent(a3, dim: int, burn_in: int = 1) -> tuple[float, float]:
    """Fit ``cumsum(a3)[T] ~ M * dim * T**gamma`` by least squares in log-log.

    Only prefixes T >= burn_in with a positive cumulative sum enter the fit.
    Returns (M, gamma); (0, 0) if fewer than two usable points.
    """
    a3 = np.asarray(a3, dtype=np.float64)
    cum = np.cumsum(a3)
    T = np.arange(1, len(a3) + 1, dtype=np.float64)
    keep = (T >= burn_in) & (cum > 0)
    if keep.sum() < 2:
        return 0.0, 0.0
    slope, intercept = np.polyfit(np.log(T[keep]), np.log(cum[keep]), 1)
    return float(np.exp(intercept) / dim), float(slope)


@dataclass(frozen=True)
class AssumptionProfile:
    G_hat: float
    sigma2_hat: float
    L_hat: float
    M_hat: float
    gamma_hat: float


def estimate_assumptions(oracle, traj: Trajectory, samples: int = 16, n_points: int = 10,
                         n_workers: int = 1, seed: int = 0, radius: float = 1.0) -> AssumptionProfile:
    """Measure gradient bound, noise variance, smoothness and the A3 growth exponent.

    Gradients are sampled at ``n_points`` x_bar values spread along the
    trajectory. Smoothness is probed with random pairs around those points on
    each worker's local objective.
    """
    if len(traj) == 0:
        raise ValueError("trajectory is empty")
    if samples < 2:
        raise ValueError("need at least 2 samples for variance and smoothness estimates")
    rng = np.random.default_rng(seed)
    idx = np.unique(np.linspace(0, len(traj) - 1, num=min(n_points, len(traj))).astype(int))
    points = traj.x_bar[idx]

    G_hat = 0.0
    sigma2_hat = 0.0
    L_hat = 0.0
    for x in points:
        for i in range(n_workers):
            part = i % getattr(oracle, "n_parts", 1)
            draws = np.array([oracle.gradient(i, x, rng) for _ in range(samples)])
            G_hat = max(G_hat, float(np.abs(draws).max()))
            sigma2_hat = max(sigma2_hat, float(draws.var(axis=0, ddof=1).max()))
            for _ in range(samples):
                a = x + radius * rng.standard_normal(x.shape)
                b = x + radius * rng.standard_normal(x.shape)
                gap = np.linalg.norm(a - b)
                if gap == 0:
                    continue
                diff = np.linalg.norm(oracle.local_gradient(part, a) - oracle.local_gradient(part, b))
                L_hat = max(L_hat, float(diff / gap))
    M_hat, gamma_hat = fit_a3_exponent(traj.a3, traj.x_bar.shape[1])
    return AssumptionProfile(G_hat, sigma2_hat, L_hat, M_hat, gamma_hat)


def check_gradient(fun, grad, x, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max coordinate-wise relative error of ``grad(x)`` against central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    coordinates whose true derivative is ~0 from dominating through roundoff.
    """
    if not h > 0:
        raise ValueError("step size h must be positive")
    x = np.array(x, dtype=np.float64)
    analytic = np.array(grad(x), dtype=np.float64).ravel()
    numeric = np.empty_like(analytic)
    flat = x.ravel()
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        fp = float(fun(x))
        flat[j] = old - h
        fm = float(fun(x))
        flat[j] = old
        numeric[j] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
