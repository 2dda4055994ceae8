"""Sparse CTR instances, the synthetic planted-model stream and batch sharding.

Instance files hold one instance per line, ``label<TAB>id,id,...`` with label
0 or 1 and at least one non-negative feature id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class Instance:
    feature_ids: tuple[int, ...]
    label: int

    def __post_init__(self):
        if not self.feature_ids:
            raise ValueError("instance needs at least one feature id")
        if len(set(self.feature_ids)) != len(self.feature_ids):
            raise ValueError(f"duplicate feature ids in {self.feature_ids}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    def to_line(self) -> str:
        return f"{self.label}\t{','.join(map(str, self.feature_ids))}"

    @classmethod
    def from_line(cls, line: str) -> "Instance":
        label, _, ids = line.rstrip("\n").partition("\t")
        return cls(tuple(int(t) for t in ids.split(",") if t), int(label))


@dataclass(frozen=True)
class Batch:
    instances: tuple[Instance, ...]
    batch_id: int = 0

    def __post_init__(self):
        if not self.instances:
            raise ValueError("batch must be non-empty")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def labels(self) -> np.ndarray:
        return np.array([ins.label for ins in self.instances], dtype=np.int64)

    def keys(self) -> set[int]:
        out: set[int] = set()
        for ins in self.instances:
            out.update(ins.feature_ids)
        return out


def batched(instances: Iterable[Instance], batch_size: int, first_id: int = 0) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    buf: list[Instance] = []
    bid = first_id
    for ins in instances:
        buf.append(ins)
        if len(buf) == batch_size:
            yield Batch(tuple(buf), bid)
            bid += 1
            buf = []
    if buf:
        yield Batch(tuple(buf), bid)


class PlantedCTRModel:
    """Hidden ground truth for synthetic clicks.

    Each feature has a hidden embedding; an instance's click logit is
    ``bias + scale * <sum of hidden embeddings, direction> / sqrt(nnz)``.
    Feature popularity follows a power law with exponent ``skew`` over a
    random permutation of ids.
    """

    def __init__(self, vocab: int, rng: np.random.Generator, hidden_dim: int = 8,
                 scale: float = 2.0, bias: float = 0.0, skew: float = 1.0):
        self.vocab = vocab
        self.hidden = rng.standard_normal((vocab, hidden_dim))
        direction = rng.standard_normal(hidden_dim)
        self.direction = direction / np.linalg.norm(direction)
        self.feature_score = self.hidden @ self.direction
        self.scale = scale
        self.bias = bias
        ranks = rng.permutation(vocab)
        weights = 1.0 / (ranks + 1.0) ** skew
        self.popularity = weights / weights.sum()
        self._cdf = np.cumsum(self.popularity)
        self._cdf[-1] = 1.0

    def logit(self, feature_ids: Sequence[int]) -> float:
        ids = np.asarray(feature_ids)
        return float(self.bias + self.scale * self.feature_score[ids].sum() / np.sqrt(len(ids)))

    def sample_ids(self, rng: np.random.Generator, nnz: int) -> tuple[int, ...]:
        if nnz * 2 > self.vocab:
            picked = rng.choice(self.vocab, size=nnz, replace=False, p=self.popularity)
            return tuple(int(i) for i in picked)
        seen: dict[int, None] = {}
        while len(seen) < nnz:
            draw = np.searchsorted(self._cdf, rng.random(2 * (nnz - len(seen)) + 4), side="right")
            for i in draw:
                seen.setdefault(int(i))
                if len(seen) == nnz:
                    break
        return tuple(seen)


def generate_synthetic_ctr(seed: int, n_instances: int, vocab: int, nnz_mean: float,
                           batch_size: int = 1024, **planted) -> Iterator[Batch]:
    """Deterministic stream of batches labelled by a :class:`PlantedCTRModel`.

    The number of non-zeros per instance is Poisson(nnz_mean) clamped to
    [1, vocab]. Extra keyword arguments configure the planted model.
    """
    if vocab < 1 or n_instances < 1:
        raise ValueError("vocab and n_instances must be >= 1")
    if not 1 <= nnz_mean <= vocab:
        raise ValueError("need vocab >= nnz_mean >= 1")
    rng = np.random.default_rng(seed)
    model = PlantedCTRModel(vocab, rng, **planted)

    def instances():
        for _ in range(n_instances):
            nnz = int(np.clip(rng.poisson(nnz_mean), 1, vocab))
            ids = model.sample_ids(rng, nnz)
            p = 1.0 / (1.0 + np.exp(-model.logit(ids)))
            yield Instance(ids, int(rng.random() < p))

    return batched(instances(), batch_size)


def planted_model(seed: int, vocab: int, **planted) -> PlantedCTRModel:
    """The planted model :func:`generate_synthetic_ctr` uses for ``seed``."""
    return PlantedCTRModel(vocab, np.random.default_rng(seed), **planted)


def write_instances(path: str | Path, instances: Iterable[Instance]) -> int:
    n = 0
    with open(path, "w") as fh:
        for ins in instances:
            fh.write(ins.to_line() + "\n")
            n += 1
    return n


def read_instances(path: str | Path) -> Iterator[Instance]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield Instance.from_line(line)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None


def _split(seq: Sequence, parts: int) -> list:
    q, r = divmod(len(seq), parts)
    out, start = [], 0
    for p in range(parts):
        size = q + (1 if p < r else 0)
        out.append(list(seq[start:start + size]))
        start += size
    return out


def shard_batch(batch: Batch, n_workers: int, n_minibatch: int) -> list[list[list[Instance]]]:
    """Contiguous, order-preserving split: ``out[worker][minibatch]``.

    Worker shares differ in size by at most one, as do the minibatches within
    a worker; earlier workers take the remainder.
    """
    if n_workers < 1 or n_minibatch < 1:
        raise ValueError("n_workers and n_minibatch must be >= 1")
    if not batch.instances:
        raise ValueError("cannot shard an empty batch")
    return [_split(share, n_minibatch) for share in _split(batch.instances, n_workers)]
