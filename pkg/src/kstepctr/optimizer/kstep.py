"""k-step Adam with periodic model merging.

Each worker runs Adam without bias correction. Between merges the update
divides by the last synchronised second moment ``v_bar``; every ``k``-th step
the workers' second moments are averaged into a fresh ``v_bar`` and the
models are replaced by the average of their candidate updates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

TRAJECTORY_SCHEMA = "kstepctr.trajectory"
TRAJECTORY_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A gradient or optimizer state became NaN/inf."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class AdamHyper:
    alpha: float = 0.01
    beta1: float = 0.0
    beta2: float = 0.999
    epsilon: float = 0.01
    k: int = 1
    reset_local_v: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass
class WorkerState:
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    v_bar: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, x0, h: AdamHyper) -> "WorkerState":
        x = np.array(x0, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("x0 must be a 1-d vector")
        eps = np.full_like(x, h.epsilon)
        return cls(x=x, m=np.zeros_like(x), v=eps.copy(), v_bar=eps)

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "WorkerState":
        return WorkerState(self.x.copy(), self.m.copy(), self.v.copy(), self.v_bar.copy(), self.t)


def ordered_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Mean accumulated in list order as ``a0 + sum(a_i - a0) / n``.

    The shift keeps the result bit-exact when every input is identical, which
    a plain running sum does not (``x + x + x`` can round).
    """
    base = arrays[0]
    if len(arrays) == 1:
        return base.copy()
    dev = np.zeros_like(base)
    for a in arrays[1:]:
        dev += a - base
    return base + dev / len(arrays)


def _check_gradient_vector(g, d: int) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (d,):
        raise ValueError(f"gradient has shape {g.shape}, expected ({d},)")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient coordinate")
    return g


def accumulate_moments(s: WorkerState, g, h: AdamHyper) -> WorkerState:
    """First half of a step: fold ``g`` into m and v and advance t."""
    g = _check_gradient_vector(g, s.dim)
    m = h.beta1 * s.m + (1.0 - h.beta1) * g
    v = h.beta2 * s.v + (1.0 - h.beta2) * g * g
    return replace(s, m=m, v=v, t=s.t + 1)


def local_adam_step(s: WorkerState, g, h: AdamHyper) -> WorkerState:
    """Non-merge step: moments advance, ``v_bar`` stays frozen."""
    s = accumulate_moments(s, g, h)
    s.x = s.x - h.alpha * s.m / np.sqrt(s.v_bar)
    return s


def global_merge(states: Sequence[WorkerState], h: AdamHyper) -> list[WorkerState]:
    """Merge step, applied after every worker has folded in its gradient.

    ``v_bar`` becomes the mean of the local v; every worker receives the mean
    of ``x_j - alpha * m_j / sqrt(v_bar)``. m is never averaged.
    """
    if not states:
        raise ValueError("global_merge needs at least one worker")
    d = states[0].dim
    for s in states:
        if s.x.shape != (d,) or s.m.shape != (d,) or s.v.shape != (d,):
            raise ValueError("workers have mismatched dimensions")
    v_bar = ordered_mean([s.v for s in states])
    root = np.sqrt(v_bar)
    x_new = ordered_mean([s.x - h.alpha * s.m / root for s in states])
    out = []
    for s in states:
        v = v_bar.copy() if h.reset_local_v else s.v
        out.append(WorkerState(x=x_new.copy(), m=s.m.copy(), v=v, v_bar=v_bar.copy(), t=s.t))
    return out


def adagrad_sparse_update(weight, accumulator, g, lr: float):
    """AdaGrad on one sparse row: ``acc += g**2; w -= lr * g / sqrt(acc)``."""
    weight = np.asarray(weight, dtype=np.float64)
    accumulator = np.asarray(accumulator, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if not (weight.shape == accumulator.shape == g.shape):
        raise ValueError(f"shape mismatch: weight {weight.shape}, accumulator "
                         f"{accumulator.shape}, gradient {g.shape}")
    acc = accumulator + g * g
    return weight - lr * g / np.sqrt(acc), acc


@dataclass
class Trajectory:
    """Per-step diagnostics of a k-step Adam run.

    Row ``t-1`` of ``x_bar`` is the worker average at which step ``t``'s
    gradients were taken; row ``t-1`` of ``v_bar`` is the synchronised second
    moment after step ``t``. ``v_bar_init`` is the value before step 1.
    """

    x_bar: np.ndarray
    v_bar: np.ndarray
    v_bar_init: np.ndarray
    merged: np.ndarray
    a3: np.ndarray
    final_x: np.ndarray
    loss: np.ndarray | None = None
    true_grad: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x_bar.shape[0]

    @property
    def merge_count(self) -> int:
        return int(self.merged.sum())

    def to_jsonl(self, path: str | Path) -> None:
        # deferred import: diagnostics imports this module
        from .diagnostics import convergence_metric

        metric = convergence_metric(self)[0] if self.true_grad is not None else None
        with open(path, "w") as fh:
            header = {"schema": TRAJECTORY_SCHEMA, "version": TRAJECTORY_VERSION,
                      "steps": len(self), "dim": int(self.x_bar.shape[1])}
            header.update(self.meta)
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for t in range(len(self)):
                rec = {
                    "step": t + 1,
                    "merge": bool(self.merged[t]),
                    "loss": None if self.loss is None else float(self.loss[t]),
                    "metric": None if metric is None else float(metric[t]),
                    "a3": float(self.a3[t]),
                }
                fh.write(json.dumps(rec) + "\n")


def read_trajectory_jsonl(path: str | Path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("schema") != TRAJECTORY_SCHEMA:
        raise ValueError(f"{path} is not a trajectory file")
    return lines[0], lines[1:]


def a3_increment(v_prev: np.ndarray, v_next: np.ndarray) -> float:
    return float(np.abs(1.0 / np.sqrt(v_prev) - 1.0 / np.sqrt(v_next)).sum())


class TrajectoryRecorder:
    """Accumulates per-step rows; shared by the synthetic runner and the trainer."""

    def __init__(self, v_bar_init: np.ndarray):
        self.v_bar_init = v_bar_init.copy()
        self._last_v = v_bar_init.copy()
        self.x_bar: list[np.ndarray] = []
        self.v_bar: list[np.ndarray] = []
        self.merged: list[bool] = []
        self.a3: list[float] = []
        self.loss: list[float] = []
        self.true_grad: list[np.ndarray] = []

    def add(self, x_bar, v_bar, merged, loss=None, true_grad=None):
        self.x_bar.append(np.array(x_bar, copy=True))
        self.v_bar.append(np.array(v_bar, copy=True))
        self.merged.append(bool(merged))
        self.a3.append(a3_increment(self._last_v, v_bar))
        self._last_v = np.array(v_bar, copy=True)
        if loss is not None:
            self.loss.append(float(loss))
        if true_grad is not None:
            self.true_grad.append(np.array(true_grad, copy=True))

    def finish(self, final_x, meta=None) -> Trajectory:
        n = len(self.x_bar)
        d = self.v_bar_init.shape[0]
        return Trajectory(
            x_bar=np.array(self.x_bar).reshape(n, d),
            v_bar=np.array(self.v_bar).reshape(n, d),
            v_bar_init=self.v_bar_init,
            merged=np.array(self.merged, dtype=bool),
            a3=np.array(self.a3, dtype=np.float64),
            final_x=np.array(final_x, copy=True),
            loss=np.array(self.loss) if len(self.loss) == n and n else None,
            true_grad=np.array(self.true_grad).reshape(n, d) if len(self.true_grad) == n and n else None,
            meta=dict(meta or {}),
        )


def worker_rngs(seed: int, n_workers: int, same_stream: bool = False) -> list[np.random.Generator]:
    """One generator per worker, keyed on (seed, worker index)."""
    return [np.random.default_rng([seed, 0 if same_stream else i]) for i in range(n_workers)]


def kstep_step(states: list[WorkerState], grads: Sequence[np.ndarray], h: AdamHyper) -> tuple[list[WorkerState], bool]:
    """Advance every worker by one step; returns (states, merged)."""
    states = [accumulate_moments(s, g, h) for s, g in zip(states, grads)]
    if states[0].t % h.k == 0:
        return global_merge(states, h), True
    for s in states:
        s.x = s.x - h.alpha * s.m / np.sqrt(s.v_bar)
    return states, False


def _check_states(states: Sequence[WorkerState], step: int) -> None:
    for i, s in enumerate(states):
        for name in ("x", "m", "v", "v_bar"):
            if not np.all(np.isfinite(getattr(s, name))):
                raise NonFiniteError(f"worker {i} has non-finite {name}", step)
        if np.any(s.v <= 0) or np.any(s.v_bar <= 0):
            raise NonFiniteError(f"worker {i} second moment is not strictly positive", step)


def run_kstep_adam(oracle, h: AdamHyper, n_workers: int, T: int, x0, seed: int = 0,
                   same_stream: bool = False) -> Trajectory:
    """Run T steps of k-step Adam on ``oracle`` and record diagnostics.

    ``same_stream=True`` gives every worker the generator of worker 0, so all
    replicas see identical gradient noise.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    if T < 1:
        raise ValueError("T must be >= 1")
    rngs = worker_rngs(seed, n_workers, same_stream)
    states = [WorkerState.initial(x0, h) for _ in range(n_workers)]
    has_loss = _supports(oracle, "loss", states[0].x)
    has_grad = _supports(oracle, "true_gradient", states[0].x)

    rec = TrajectoryRecorder(states[0].v_bar)
    for t in range(1, T + 1):
        x_bar = ordered_mean([s.x for s in states])
        grads = []
        for i, s in enumerate(states):
            try:
                g = oracle.gradient(i, s.x, rngs[i])
            except NonFiniteError:
                raise
            except Exception as exc:
                raise RuntimeError(f"step {t}: gradient oracle failed for worker {i}: {exc}") from exc
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"worker {i} produced a non-finite gradient", t)
            grads.append(g)
        states, merged = kstep_step(states, grads, h)
        _check_states(states, t)
        rec.add(
            x_bar,
            states[0].v_bar,
            merged,
            loss=oracle.loss(x_bar) if has_loss else None,
            true_grad=oracle.true_gradient(x_bar) if has_grad else None,
        )
    final_x = ordered_mean([s.x for s in states])
    meta = {"n_workers": n_workers, "k": h.k, "alpha": h.alpha, "beta1": h.beta1,
            "beta2": h.beta2, "epsilon": h.epsilon, "seed": seed}
    return rec.finish(final_x, meta)


def _supports(oracle, name: str, x) -> bool:
    fn = getattr(oracle, name, None)
    if fn is None:
        return False
    try:
        fn(x)
    except NotImplementedError:
        return False
    return True
