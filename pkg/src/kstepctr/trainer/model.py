"""The desk CTR network: pooled sparse embeddings -> MLP -> sigmoid.

Dense parameters live in one flat vector so the k-step optimizer can treat
them as a single model. Layout, layer by layer: ``W`` (row-major, in x out)
then ``b``; the last layer maps to a single logit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .data import Instance


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


class Pooling(str, enum.Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 10_000
    embedding_dim: int = 8
    hidden: tuple[int, ...] = (16,)
    activation: Activation = Activation.RELU
    pooling: Pooling = Pooling.SUM

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "pooling", Pooling(self.pooling))
        if self.vocab_size < 1 or self.embedding_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("vocab_size, embedding_dim and hidden widths must be >= 1")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.embedding_dim, *self.hidden, 1]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_dense(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


def init_dense(cfg: ModelConfig, rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
    return rng.uniform(-scale, scale, cfg.n_dense)


def unpack(theta: np.ndarray, cfg: ModelConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of ``theta`` as [(W, b), ...]."""
    if theta.shape != (cfg.n_dense,):
        raise ValueError(f"dense vector has shape {theta.shape}, expected ({cfg.n_dense},)")
    layers, off = [], 0
    for i, o in cfg.layer_shapes:
        W = theta[off:off + i * o].reshape(i, o)
        off += i * o
        b = theta[off:off + o]
        off += o
        layers.append((W, b))
    return layers


def _act(z, kind: Activation):
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act_grad(z, a, kind: Activation):
    if kind is Activation.RELU:
        return (z > 0).astype(z.dtype)
    if kind is Activation.TANH:
        return 1.0 - a * a
    return a * (1.0 - a)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


@dataclass
class Minibatch:
    """Instances flattened for vectorised pooling.

    ``keys`` are the sorted distinct feature ids; ``pool`` is the n x len(keys)
    sparse pooling matrix (ones for sum, 1/nnz for mean).
    """

    keys: np.ndarray
    pool: sp.csr_matrix
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def build(cls, instances: Sequence[Instance], pooling: Pooling = Pooling.SUM) -> "Minibatch":
        pooling = Pooling(pooling)
        n = len(instances)
        if n == 0:
            return cls(np.zeros(0, dtype=np.int64), sp.csr_matrix((0, 0)), np.zeros(0))
        lengths = np.fromiter((len(ins.feature_ids) for ins in instances), dtype=np.int64, count=n)
        flat = np.fromiter((f for ins in instances for f in ins.feature_ids), dtype=np.int64,
                           count=int(lengths.sum()))
        keys, cols = np.unique(flat, return_inverse=True)
        rows = np.repeat(np.arange(n), lengths)
        vals = np.ones(flat.shape[0]) if pooling is Pooling.SUM else np.repeat(1.0 / lengths, lengths)
        pool = sp.csr_matrix((vals, (rows, cols.ravel())), shape=(n, keys.shape[0]))
        labels = np.fromiter((ins.label for ins in instances), dtype=np.float64, count=n)
        return cls(keys, pool, labels)


def gather_embeddings(mb: Minibatch, table: Mapping[int, object]) -> np.ndarray:
    """Stack the weights for ``mb.keys`` from a key -> entry (or vector) mapping."""
    rows = []
    for k in mb.keys:
        try:
            item = table[int(k)]
        except KeyError:
            raise KeyError(f"embedding for feature {int(k)} missing from the working set") from None
        rows.append(getattr(item, "weights", item))
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


@dataclass
class ForwardCache:
    pooled: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None


def forward(theta: np.ndarray, emb: np.ndarray, mb: Minibatch, cfg: ModelConfig):
    """Return (probabilities, cache). ``emb`` rows align with ``mb.keys``."""
    layers = unpack(theta, cfg)
    if mb.size == 0:
        empty = np.zeros(0)
        return empty, ForwardCache(np.zeros((0, cfg.embedding_dim)), logits=empty, probs=empty)
    if emb.shape != (mb.keys.shape[0], cfg.embedding_dim):
        raise ValueError(f"embedding block has shape {emb.shape}, expected "
                         f"({mb.keys.shape[0]}, {cfg.embedding_dim})")
    h = np.asarray(mb.pool @ emb)
    cache = ForwardCache(pooled=h)
    for W, b in layers[:-1]:
        z = h @ W + b
        h = _act(z, cfg.activation)
        cache.pre.append(z)
        cache.post.append(h)
    W, b = layers[-1]
    logits = (h @ W + b)[:, 0]
    cache.logits = logits
    cache.probs = sigmoid(logits)
    return cache.probs, cache


def bce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy computed from logits."""
    if logits.size == 0:
        return 0.0
    return float(np.mean(np.logaddexp(0.0, logits) - labels * logits))


def backward(theta: np.ndarray, emb: np.ndarray, mb: Minibatch, cache: ForwardCache,
             cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the mean cross-entropy.

    Returns (dense gradient, embedding gradient) with embedding rows aligned
    to ``mb.keys``; a feature shared by several instances gets the sum of
    their contributions.
    """
    labels = mb.labels
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("labels must be 0 or 1")
    grad = np.zeros_like(theta)
    if mb.size == 0:
        return grad, np.zeros((0, cfg.embedding_dim))
    layers = unpack(theta, cfg)
    glayers = unpack(grad, cfg)
    n = mb.size
    delta = ((cache.probs - labels) / n)[:, None]
    inputs = [cache.pooled] + cache.post
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        gW, gb = glayers[li]
        gW[...] = inputs[li].T @ delta
        gb[...] = delta.sum(axis=0)
        delta = delta @ W.T
        if li > 0:
            delta = delta * _act_grad(cache.pre[li - 1], cache.post[li - 1], cfg.activation)
    g_emb = np.asarray(mb.pool.T @ delta)
    return grad, g_emb


def loss_and_grads(theta: np.ndarray, emb: np.ndarray, mb: Minibatch, cfg: ModelConfig):
    _, cache = forward(theta, emb, mb, cfg)
    g_dense, g_emb = backward(theta, emb, mb, cache, cfg)
    return bce_loss(cache.logits, mb.labels), g_dense, g_emb
