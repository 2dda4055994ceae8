"""Batch-level training loop over N simulated workers.

Per batch: pull the union of referenced sparse rows into the store's working
set, shard the batch into per-worker minibatches, then for each minibatch
round every worker runs forward/backward, the dense models take one k-step
Adam step (merging every k rounds, counted globally across batches), the
sparse gradients are averaged over workers and pushed as one AdaGrad step,
and finally the cache is trimmed back to capacity.

Workers are mapped onto the accelerators of one node graph; sparse rows are
owned by accelerator ``key % gpus_used``. Pulls and pushes between a worker's
GPU and the owner are costed along planned routes. Dense merges and sparse
gradient averaging cross the inter-node link: each worker stands in for one
node for those two categories.
"""

from __future__ import annotations

import math
import tempfile
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..ledger import Category, CommLedger, InterNodeLink
from ..optimizer.kstep import AdamHyper, TrajectoryRecorder, WorkerState, kstep_step, ordered_mean
from ..store import DEFAULT_ACC_INIT, TierConfig, TieredStore
from ..topology import TopologyGraph, example_topology, plan_all_pairs, transfer_time
from .data import Batch, Instance, shard_batch
from .metrics import compute_auc
from .model import Minibatch, ModelConfig, bce_loss, forward, gather_embeddings, init_dense, loss_and_grads

KEY_BYTES = 8


@dataclass(frozen=True)
class TrainerConfig:
    n_workers: int = 4
    adam: AdamHyper = field(default_factory=AdamHyper)
    model: ModelConfig = field(default_factory=ModelConfig)
    sparse_lr: float = 0.5
    minibatch_size: int = 128
    cache_capacity: int = 4096
    store_dir: str | Path | None = None
    acc_init: float = DEFAULT_ACC_INIT
    seed: int = 0
    merge_round_trip: bool = True
    pipelined: bool = False
    inter_node: InterNodeLink = field(default_factory=InterNodeLink)
    ssd_bandwidth: float = 2e9
    wire_bytes: int = 4

    def __post_init__(self):
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if not self.sparse_lr > 0:
            raise ValueError("sparse_lr must be > 0")
        if not self.ssd_bandwidth > 0:
            raise ValueError("ssd_bandwidth must be > 0")


@dataclass(frozen=True)
class BatchMetrics:
    batch_id: int
    instances: int
    trained: int
    train_loss: float
    dense_steps: int
    merges: int
    evicted: int
    eval_auc: float | None = None
    eval_loss: float | None = None
    cumulative_auc: float | None = None

    def to_record(self) -> dict:
        return asdict(self)


class TrainingContext:
    """Mutable training state shared by :func:`train_batch` and :func:`online_eval`."""

    def __init__(self, config: TrainerConfig, topology: TopologyGraph | None = None):
        self.config = config
        self.topology = topology if topology is not None else example_topology()
        self.plan = plan_all_pairs(self.topology)
        accs = self.topology.accelerators
        if not accs:
            raise ValueError("topology has no accelerators")
        self.gpus_used = min(config.n_workers, len(accs))
        self.gpus = accs[:self.gpus_used]
        store_dir = config.store_dir
        if store_dir is None:
            store_dir = tempfile.mkdtemp(prefix="kstepctr-store-")
        self.store = TieredStore(TierConfig(config.cache_capacity, store_dir),
                                 config.model.embedding_dim, config.acc_init)
        rng = np.random.default_rng(config.seed)
        theta0 = init_dense(config.model, rng)
        self.workers = [WorkerState.initial(theta0, config.adam) for _ in range(config.n_workers)]
        self.recorder = TrajectoryRecorder(self.workers[0].v_bar)
        self.ledger = CommLedger()
        self.pull_matrix = np.zeros((self.gpus_used, self.gpus_used), dtype=np.int64)
        self.timings: dict[str, float] = defaultdict(float)
        self.merges = 0
        self.history: list[BatchMetrics] = []
        self._eval_scores: list[np.ndarray] = []
        self._eval_labels: list[np.ndarray] = []

    @property
    def dense_steps(self) -> int:
        return self.workers[0].t

    @property
    def row_bytes(self) -> int:
        return self.config.model.embedding_dim * self.config.wire_bytes

    @property
    def model_bytes(self) -> int:
        return self.config.model.n_dense * self.config.wire_bytes

    def dense_average(self) -> np.ndarray:
        return ordered_mean([w.x for w in self.workers])

    def trajectory(self):
        meta = {"source": "trainer", "n_workers": self.config.n_workers, "k": self.config.adam.k,
                "seed": self.config.seed, "metric_gradient": "mean worker minibatch gradient"}
        return self.recorder.finish(self.dense_average(), meta)

    def close(self) -> None:
        self.store.close()

    def _record_cold_io(self, nbytes: int) -> None:
        if nbytes:
            self.ledger.add(Category.COLD_TIER_IO, nbytes, "ssd", nbytes / self.config.ssd_bandwidth)

    def _record_peer_traffic(self, worker: int, keys: np.ndarray) -> None:
        own = worker % self.gpus_used
        per_owner = np.bincount(keys % self.gpus_used, minlength=self.gpus_used) * self.row_bytes
        for owner in range(self.gpus_used):
            nbytes = int(per_owner[owner])
            if owner == own or nbytes == 0:
                continue
            pull = self.plan.route(self.gpus[owner], self.gpus[own])
            push = self.plan.route(self.gpus[own], self.gpus[owner])
            self.ledger.add(Category.GPU_PULL, nbytes, pull.mode.value,
                            transfer_time(pull, nbytes, self.config.pipelined))
            self.ledger.add(Category.GPU_PUSH, nbytes, push.mode.value,
                            transfer_time(push, nbytes, self.config.pipelined))
            self.pull_matrix[owner, own] += nbytes


def n_minibatches(batch_len: int, n_workers: int, minibatch_size: int) -> int:
    return max(1, math.ceil(batch_len / (n_workers * minibatch_size)))


def predict_with(ctx: TrainingContext, theta: np.ndarray, instances, table) -> tuple[np.ndarray, np.ndarray]:
    mb = Minibatch.build(list(instances), ctx.config.model.pooling)
    emb = gather_embeddings(mb, table)
    _, cache = forward(theta, emb, mb, ctx.config.model)
    return cache.probs, cache.logits


def train_batch(ctx: TrainingContext, batch: Batch, evaluate: bool = False) -> BatchMetrics:
    """Run one batch through the pipeline.

    With ``evaluate=True`` the whole batch is first scored by the current
    averaged dense model and the pulled sparse rows, before any update.
    """
    cfg = ctx.config
    N = cfg.n_workers
    t0 = time.perf_counter()
    read_before = ctx.store.bytes_read
    working = ctx.store.pull_batch(batch.keys())
    ctx._record_cold_io(ctx.store.bytes_read - read_before)
    ctx.timings["pull"] += time.perf_counter() - t0

    eval_auc = eval_loss = None
    if evaluate:
        t0 = time.perf_counter()
        labels = batch.labels
        probs, logits = predict_with(ctx, ctx.dense_average(), batch.instances, working)
        eval_auc = compute_auc(probs, labels)
        eval_loss = bce_loss(logits, labels.astype(np.float64))
        ctx._eval_scores.append(probs)
        ctx._eval_labels.append(labels)
        ctx.timings["eval"] += time.perf_counter() - t0

    M = n_minibatches(len(batch), N, cfg.minibatch_size)
    shards = shard_batch(batch, N, M)
    losses: list[float] = []
    trained = 0
    for j in range(M):
        t0 = time.perf_counter()
        dense_grads = []
        sparse_sum: dict[int, np.ndarray] = {}
        step_losses = []
        for i, w in enumerate(ctx.workers):
            mb = Minibatch.build(shards[i][j], cfg.model.pooling)
            emb = gather_embeddings(mb, working)
            loss, g_dense, g_emb = loss_and_grads(w.x, emb, mb, cfg.model)
            dense_grads.append(g_dense)
            if mb.size:
                step_losses.append(loss)
                losses.append(loss)
                trained += mb.size
                ctx._record_peer_traffic(i, mb.keys)
                ctx.ledger.add(Category.SPARSE_SYNC, mb.keys.shape[0] * (ctx.row_bytes + KEY_BYTES),
                               "inter_node", cfg.inter_node.time(mb.keys.shape[0] * (ctx.row_bytes + KEY_BYTES)))
            for key, row in zip(mb.keys.tolist(), g_emb):
                if key in sparse_sum:
                    sparse_sum[key] = sparse_sum[key] + row
                else:
                    sparse_sum[key] = row.copy()
        x_bar = ctx.dense_average()
        ctx.workers, merged = kstep_step(ctx.workers, dense_grads, cfg.adam)
        if merged:
            ctx.merges += 1
            per_worker = ctx.model_bytes * (2 if cfg.merge_round_trip else 1)
            for _ in range(N):
                ctx.ledger.add(Category.DENSE_MERGE, per_worker, "inter_node", cfg.inter_node.time(per_worker))
        ctx.recorder.add(x_bar, ctx.workers[0].v_bar, merged,
                         loss=float(np.mean(step_losses)) if step_losses else 0.0,
                         true_grad=ordered_mean(dense_grads))
        ctx.timings["train"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        if sparse_sum:
            ctx.store.push_updates({k: g / N for k, g in sparse_sum.items()}, cfg.sparse_lr)
        ctx.timings["push"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    written_before = ctx.store.bytes_written
    evicted = ctx.store.evict()
    ctx._record_cold_io(ctx.store.bytes_written - written_before)
    ctx.timings["evict"] += time.perf_counter() - t0

    cumulative = None
    if evaluate:
        cumulative = compute_auc(np.concatenate(ctx._eval_scores), np.concatenate(ctx._eval_labels))
    metrics = BatchMetrics(
        batch_id=batch.batch_id,
        instances=len(batch),
        trained=trained,
        train_loss=float(np.mean(losses)) if losses else 0.0,
        dense_steps=ctx.dense_steps,
        merges=ctx.merges,
        evicted=evicted,
        eval_auc=eval_auc,
        eval_loss=eval_loss,
        cumulative_auc=cumulative,
    )
    ctx.history.append(metrics)
    return metrics


@dataclass(frozen=True)
class OnlineResult:
    batches: list[BatchMetrics]
    cumulative_auc: float | None


def online_eval(ctx: TrainingContext, stream: Iterable[Batch]) -> OnlineResult:
    """Predict-then-train over ``stream``; AUC for a batch never sees its own updates."""
    out = [train_batch(ctx, b, evaluate=True) for b in stream]
    return OnlineResult(out, out[-1].cumulative_auc if out else None)


def predict_proba(ctx: TrainingContext, instances: Iterable[Instance]) -> np.ndarray:
    """Score instances with the averaged dense model; unseen features embed to zero.

    Reads the store without touching access statistics.
    """
    instances = list(instances)
    table = {}
    for ins in instances:
        for f in ins.feature_ids:
            if f not in table:
                entry = ctx.store.get(f)
                table[f] = entry.weights if entry is not None else np.zeros(ctx.config.model.embedding_dim)
    probs, _ = predict_with(ctx, ctx.dense_average(), instances, table)
    return probs
