"""Accounting of simulated transfers and the k-step / two-phase reduction ratios.

Times are modeled, never measured: intra-node transfers are costed along
topology routes, inter-node transfers on a single (bandwidth, latency) link.
"""

from __future__ import annotations

import enum
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .topology import TopologyGraph, naive_route, plan_route, transfer_time

REPORT_SCHEMA = "kstepctr.ledger_report"
REPORT_VERSION = 1


class Category(str, enum.Enum):
    GPU_PULL = "gpu_pull"
    GPU_PUSH = "gpu_push"
    DENSE_MERGE = "dense_merge"
    SPARSE_SYNC = "sparse_sync"
    COLD_TIER_IO = "cold_tier_io"


@dataclass(frozen=True)
class TransferRecord:
    category: Category
    nbytes: int
    mode: str = "n/a"
    modeled_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        if self.nbytes < 0:
            raise ValueError("nbytes must be non-negative")
        if not self.modeled_time >= 0:
            raise ValueError("modeled_time must be non-negative")


@dataclass(frozen=True)
class InterNodeLink:
    """Network between nodes. RDMA is just a faster setting of the same two numbers."""

    bandwidth: float = 12.5e9
    latency: float = 5e-6

    def __post_init__(self):
        if not self.bandwidth > 0 or self.latency < 0:
            raise ValueError("inter-node link needs bandwidth > 0 and latency >= 0")

    def time(self, nbytes: int) -> float:
        return 0.0 if nbytes == 0 else self.latency + nbytes / self.bandwidth


@dataclass(frozen=True)
class CategoryTotals:
    nbytes: int = 0
    time: float = 0.0
    count: int = 0

    def __add__(self, other: "CategoryTotals") -> "CategoryTotals":
        return CategoryTotals(self.nbytes + other.nbytes, math.fsum([self.time, other.time]),
                              self.count + other.count)


@dataclass(frozen=True)
class LedgerReport:
    totals: Mapping[Category, CategoryTotals] = field(default_factory=dict)
    ratios: Mapping[str, float] = field(default_factory=dict)

    def get(self, category) -> CategoryTotals:
        return self.totals.get(Category(category), CategoryTotals())

    @property
    def total_bytes(self) -> int:
        return sum(t.nbytes for t in self.totals.values())

    @property
    def total_time(self) -> float:
        return math.fsum(t.time for t in self.totals.values())

    def __add__(self, other: "LedgerReport") -> "LedgerReport":
        return LedgerReport({c: self.get(c) + other.get(c) for c in Category})

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "categories": {c.value: {"bytes": self.get(c).nbytes, "time": self.get(c).time,
                                     "count": self.get(c).count} for c in Category},
            "total_bytes": self.total_bytes,
            "total_time": self.total_time,
            "ratios": dict(sorted(self.ratios.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "LedgerReport":
        if doc.get("schema") != REPORT_SCHEMA:
            raise ValueError("not a ledger report document")
        totals = {Category(k): CategoryTotals(int(v["bytes"]), float(v["time"]), int(v["count"]))
                  for k, v in doc["categories"].items()}
        return cls(totals, {k: float(v) for k, v in doc.get("ratios", {}).items()})

    @classmethod
    def from_json(cls, text: str) -> "LedgerReport":
        return cls.from_dict(json.loads(text))


class CommLedger:
    """Append-only transfer log; safe to record into from several threads.

    Time totals use ``math.fsum`` so they do not depend on record order.
    """

    def __init__(self, records: Iterable[TransferRecord] = ()):
        self._lock = threading.Lock()
        self._records: list[TransferRecord] = []
        for r in records:
            self.record(r)

    def record(self, rec: TransferRecord) -> None:
        with self._lock:
            self._records.append(rec)

    def add(self, category, nbytes: int, mode: str = "n/a", modeled_time: float = 0.0) -> None:
        self.record(TransferRecord(Category(category), int(nbytes), str(mode), float(modeled_time)))

    @property
    def records(self) -> list[TransferRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def merge(self, other: "CommLedger") -> "CommLedger":
        return CommLedger(self.records + other.records)

    def totals(self, category) -> CategoryTotals:
        category = Category(category)
        recs = [r for r in self.records if r.category is category]
        return CategoryTotals(sum(r.nbytes for r in recs), math.fsum(r.modeled_time for r in recs), len(recs))

    def report(self, ratios: Mapping[str, float] | None = None) -> LedgerReport:
        buckets: dict[Category, list[TransferRecord]] = {c: [] for c in Category}
        for r in self.records:
            buckets[r.category].append(r)
        totals = {c: CategoryTotals(sum(r.nbytes for r in rs), math.fsum(r.modeled_time for r in rs), len(rs))
                  for c, rs in buckets.items()}
        return LedgerReport(totals, dict(ratios or {}))


def _as_report(x) -> LedgerReport:
    return x.report() if isinstance(x, CommLedger) else x


def kstep_ratio(kstep, baseline, scope: str = "dense") -> float:
    """Bytes moved by the k-step run over the k=1 baseline.

    ``scope="dense"`` compares DenseMerge bytes only; ``"total"`` compares all
    categories, so per-step sparse synchronisation keeps the ratio above 1/k.
    """
    a, b = _as_report(kstep), _as_report(baseline)
    if scope == "dense":
        num, den = a.get(Category.DENSE_MERGE).nbytes, b.get(Category.DENSE_MERGE).nbytes
    elif scope == "total":
        num, den = a.total_bytes, b.total_bytes
    else:
        raise ValueError(f"scope must be 'dense' or 'total', got {scope!r}")
    if den == 0:
        raise ValueError("baseline ledger has zero bytes in scope")
    return num / den


def two_phase_ratio(g: TopologyGraph, workload, pipelined: bool = False) -> float:
    """Planned-route time over host-routed time for a pairwise byte workload.

    ``workload`` is either a square matrix indexed by ``g.accelerators`` order
    or a mapping ``(src, dst) -> bytes`` over DeviceIds. An all-zero workload
    returns 1.0 by convention.
    """
    accs = g.accelerators
    if isinstance(workload, Mapping):
        pairs = [(src, dst, int(n)) for (src, dst), n in workload.items()]
    else:
        w = np.asarray(workload)
        if w.shape != (len(accs), len(accs)):
            raise ValueError(f"workload must be {len(accs)}x{len(accs)}, got {w.shape}")
        pairs = [(accs[i], accs[j], int(w[i, j])) for i in range(len(accs)) for j in range(len(accs))]
    planned, naive = [], []
    for src, dst, n in pairs:
        if n == 0:
            continue
        planned.append(transfer_time(plan_route(g, src, dst), n, pipelined))
        naive.append(transfer_time(naive_route(g, src, dst), n, pipelined))
    den = math.fsum(naive)
    if den == 0:
        return 1.0
    return math.fsum(planned) / den


def simulate_schedule(T: int, k: int, n_workers: int, model_bytes: int, sparse_bytes_per_step: int = 0,
                      link: InterNodeLink | None = None, round_trip: bool = True) -> CommLedger:
    """Ledger for T optimizer steps with a merge every k steps.

    Each merge records one DenseMerge transmission per worker (upload, plus
    download when ``round_trip``); sparse sync is one record per step.
    """
    if T < 0 or k < 1 or n_workers < 1:
        raise ValueError("need T >= 0, k >= 1, n_workers >= 1")
    link = link or InterNodeLink()
    per_worker = model_bytes * (2 if round_trip else 1)
    ledger = CommLedger()
    for t in range(1, T + 1):
        if sparse_bytes_per_step:
            ledger.add(Category.SPARSE_SYNC, sparse_bytes_per_step, "inter_node", link.time(sparse_bytes_per_step))
        if t % k == 0:
            for _ in range(n_workers):
                ledger.add(Category.DENSE_MERGE, per_worker, "inter_node", link.time(per_worker))
    return ledger


def export_report(report: LedgerReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json())


def load_report(path: str | Path) -> LedgerReport:
    return LedgerReport.from_json(Path(path).read_text())
