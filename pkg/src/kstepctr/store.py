"""Tiered sparse-parameter store: a bounded in-memory cache over a file-backed cold tier.

Cold-tier layout (little-endian) inside the store directory:

``cold.dat``
    header: magic ``b"KSTD"``, version ``u8`` (=1), embedding dim ``u32``;
    then fixed-width records, each::

        key           u64
        dim           u32
        access_count  u64
        last_access   u64
        weights       f64 x dim
        adagrad_acc   f64 x dim
        crc32         u32   (zlib crc32 of all preceding record bytes)

``cold.idx``
    header: magic ``b"KSTI"``, version ``u8`` (=1), embedding dim ``u32``,
    logical clock ``u64``, entry count ``u64``; then ``count`` pairs of
    (key ``u64``, record slot ``u64``), sorted by key.

A record slot ``s`` starts at byte ``9 + s * record_size``. Re-evicting a key
overwrites its slot in place. Both files are consistent on disk after
``flush()`` or ``close()``.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .optimizer.kstep import adagrad_sparse_update

DATA_MAGIC = b"KSTD"
INDEX_MAGIC = b"KSTI"
FORMAT_VERSION = 1
DATA_FILE = "cold.dat"
INDEX_FILE = "cold.idx"

_DATA_HEADER = struct.Struct("<4sBI")
_INDEX_HEADER = struct.Struct("<4sBIQQ")
_REC_HEAD = struct.Struct("<QIQQ")
_CRC = struct.Struct("<I")
_INDEX_PAIR = struct.Struct("<QQ")

DEFAULT_ACC_INIT = 1e-6


class StoreError(RuntimeError):
    pass


class ColdTierCorruption(StoreError):
    pass


class Eviction(str, enum.Enum):
    LFU_THEN_LRU = "lfu_then_lru"


@dataclass
class EmbeddingEntry:
    weights: np.ndarray
    adagrad_acc: np.ndarray
    access_count: int = 0
    last_access: int = 0

    def copy(self) -> "EmbeddingEntry":
        return EmbeddingEntry(self.weights.copy(), self.adagrad_acc.copy(),
                              self.access_count, self.last_access)


@dataclass(frozen=True)
class TierConfig:
    cache_capacity: int
    cold_path: str | Path
    eviction: Eviction = Eviction.LFU_THEN_LRU

    def __post_init__(self):
        if self.cache_capacity < 1:
            raise ValueError("cache_capacity must be >= 1")
        object.__setattr__(self, "eviction", Eviction(self.eviction))


def record_size(dim: int) -> int:
    return _REC_HEAD.size + 16 * dim + _CRC.size


def encode_record(key: int, entry: EmbeddingEntry) -> bytes:
    dim = entry.weights.shape[0]
    body = (_REC_HEAD.pack(key, dim, entry.access_count, entry.last_access)
            + entry.weights.astype("<f8").tobytes()
            + entry.adagrad_acc.astype("<f8").tobytes())
    return body + _CRC.pack(zlib.crc32(body))


def decode_record(buf: bytes, dim: int) -> tuple[int, EmbeddingEntry]:
    if len(buf) != record_size(dim):
        raise ColdTierCorruption(f"short record: {len(buf)} bytes, expected {record_size(dim)}")
    body, crc = buf[:-_CRC.size], _CRC.unpack(buf[-_CRC.size:])[0]
    if zlib.crc32(body) != crc:
        raise ColdTierCorruption("record checksum mismatch")
    key, rec_dim, count, last = _REC_HEAD.unpack_from(body)
    if rec_dim != dim:
        raise ColdTierCorruption(f"record dim {rec_dim} != store dim {dim}")
    off = _REC_HEAD.size
    w = np.frombuffer(body, dtype="<f8", count=dim, offset=off).astype(np.float64)
    acc = np.frombuffer(body, dtype="<f8", count=dim, offset=off + 8 * dim).astype(np.float64)
    return key, EmbeddingEntry(w, acc, count, last)


class TieredStore:
    """Cache tier (dict) + cold tier (fixed-width record file).

    ``pull_batch`` resolves keys into the cache and marks them as the working
    set; ``push_updates`` may only touch working-set keys; ``evict`` trims the
    cache back to capacity, spilling to the cold tier.
    """

    def __init__(self, config: TierConfig, dim: int, acc_init: float = DEFAULT_ACC_INIT):
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        if not acc_init > 0:
            raise ValueError("acc_init must be positive")
        self.config = config
        self.dim = dim
        self.acc_init = float(acc_init)
        self.path = Path(config.cold_path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.cache: dict[int, EmbeddingEntry] = {}
        self._index: dict[int, int] = {}
        self._working: set[int] = set()
        self._index_dirty = False
        self.clock = 0
        self.bytes_written = 0
        self.bytes_read = 0
        self._rec_size = record_size(dim)
        data = self.path / DATA_FILE
        if data.exists():
            self._load_index()
        else:
            with open(data, "wb") as fh:
                fh.write(_DATA_HEADER.pack(DATA_MAGIC, FORMAT_VERSION, dim))
        self._fh = open(data, "r+b")

    @classmethod
    def open(cls, path: str | Path, cache_capacity: int, acc_init: float = DEFAULT_ACC_INIT) -> "TieredStore":
        """Reopen an existing store directory; dim is read from the data header."""
        data = Path(path) / DATA_FILE
        try:
            with open(data, "rb") as fh:
                magic, version, dim = _DATA_HEADER.unpack(fh.read(_DATA_HEADER.size))
        except (OSError, struct.error) as exc:
            raise StoreError(f"cannot open cold tier at {path}: {exc}") from exc
        if magic != DATA_MAGIC or version != FORMAT_VERSION:
            raise ColdTierCorruption(f"{data}: bad magic or version")
        return cls(TierConfig(cache_capacity, path), dim, acc_init)

    def close(self) -> None:
        if not self._fh.closed:
            if self._index_dirty:
                self._fh.flush()
                self._write_index()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __len__(self) -> int:
        return len(self.cache)

    def __contains__(self, key: int) -> bool:
        return key in self.cache or key in self._index

    @property
    def cold_keys(self) -> set[int]:
        return set(self._index)

    def _load_index(self) -> None:
        with open(self.path / DATA_FILE, "rb") as fh:
            head = fh.read(_DATA_HEADER.size)
        try:
            magic, version, dim = _DATA_HEADER.unpack(head)
        except struct.error:
            raise ColdTierCorruption("truncated data header") from None
        if magic != DATA_MAGIC or version != FORMAT_VERSION or dim != self.dim:
            raise ColdTierCorruption("data file header mismatch")
        idx = self.path / INDEX_FILE
        if not idx.exists():
            return
        raw = idx.read_bytes()
        try:
            magic, version, dim, clock, count = _INDEX_HEADER.unpack_from(raw)
        except struct.error:
            raise ColdTierCorruption("truncated index header") from None
        if magic != INDEX_MAGIC or version != FORMAT_VERSION or dim != self.dim:
            raise ColdTierCorruption("index file header mismatch")
        if len(raw) != _INDEX_HEADER.size + count * _INDEX_PAIR.size:
            raise ColdTierCorruption("index file length mismatch")
        self.clock = clock
        for j in range(count):
            key, slot = _INDEX_PAIR.unpack_from(raw, _INDEX_HEADER.size + j * _INDEX_PAIR.size)
            self._index[key] = slot

    def _write_index(self) -> None:
        items = sorted(self._index.items())
        buf = bytearray(_INDEX_HEADER.pack(INDEX_MAGIC, FORMAT_VERSION, self.dim, self.clock, len(items)))
        for key, slot in items:
            buf += _INDEX_PAIR.pack(key, slot)
        tmp = self.path / (INDEX_FILE + ".tmp")
        tmp.write_bytes(bytes(buf))
        tmp.replace(self.path / INDEX_FILE)
        self._index_dirty = False

    def _write_cold(self, key: int, entry: EmbeddingEntry) -> None:
        slot = self._index.get(key)
        if slot is None:
            slot = len(self._index)
            self._index[key] = slot
        try:
            self._fh.seek(_DATA_HEADER.size + slot * self._rec_size)
            self._fh.write(encode_record(key, entry))
        except OSError as exc:
            raise StoreError(f"cold-tier write failed for key {key}: {exc}") from exc
        self.bytes_written += self._rec_size

    def _read_cold(self, key: int) -> EmbeddingEntry:
        slot = self._index[key]
        self._fh.seek(_DATA_HEADER.size + slot * self._rec_size)
        buf = self._fh.read(self._rec_size)
        rec_key, entry = decode_record(buf, self.dim)
        if rec_key != key:
            raise ColdTierCorruption(f"slot {slot} holds key {rec_key}, expected {key}")
        self.bytes_read += self._rec_size
        return entry

    def fresh_entry(self) -> EmbeddingEntry:
        return EmbeddingEntry(np.zeros(self.dim), np.full(self.dim, self.acc_init))

    def pull_batch(self, keys: Iterable[int]) -> dict[int, EmbeddingEntry]:
        """Resolve ``keys`` (deduplicated) into the cache and return the live entries."""
        keys = sorted(set(int(k) for k in keys))
        if not keys:
            raise ValueError("pull_batch needs at least one key")
        self.clock += 1
        out = {}
        for key in keys:
            entry = self.cache.get(key)
            if entry is None:
                entry = self._read_cold(key) if key in self._index else self.fresh_entry()
                self.cache[key] = entry
            entry.access_count += 1
            entry.last_access = self.clock
            out[key] = entry
        self._working = set(keys)
        return out

    def push_updates(self, updates: Mapping[int, np.ndarray], lr: float) -> None:
        """Apply one AdaGrad step per key. Keys must be in the current working set."""
        missing = [k for k in updates if k not in self._working]
        if missing:
            raise KeyError(f"keys not in the working set: {sorted(missing)[:5]}")
        for key in sorted(updates):
            entry = self.cache[key]
            entry.weights, entry.adagrad_acc = adagrad_sparse_update(
                entry.weights, entry.adagrad_acc, updates[key], lr)

    def eviction_order(self) -> list[int]:
        """Cache keys from first-to-evict to last: fewest accesses, then oldest, then key."""
        return sorted(self.cache, key=lambda k: (self.cache[k].access_count, self.cache[k].last_access, k))

    def evict(self) -> int:
        """Spill entries to the cold tier until the cache is within capacity."""
        excess = len(self.cache) - self.config.cache_capacity
        if excess <= 0:
            return 0
        victims = self.eviction_order()[:excess]
        for key in victims:
            self._write_cold(key, self.cache.pop(key))
            self._working.discard(key)
        # slots are append-only, so the index only needs to hit disk on flush/close
        self._index_dirty = True
        return len(victims)

    def flush(self) -> None:
        """Persist every cached entry and the index; the cache keeps its contents."""
        for key in sorted(self.cache):
            self._write_cold(key, self.cache[key])
        self._fh.flush()
        self._write_index()

    def get(self, key: int) -> EmbeddingEntry | None:
        """Read a value without touching access statistics."""
        if key in self.cache:
            return self.cache[key]
        if key in self._index:
            return self._read_cold(key)
        return None
