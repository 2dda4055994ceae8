"""Experiment configuration: a JSON document where every field has a default.

An empty document ``{}`` runs the desk benchmark. Unknown keys are reported,
not ignored.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

from .ledger import InterNodeLink
from .optimizer.kstep import AdamHyper
from .store import DEFAULT_ACC_INIT
from .topology import TopologyError, TopologyGraph, example_topology, load_topology
from .trainer.data import Batch, batched, generate_synthetic_ctr, read_instances
from .trainer.model import Activation, ModelConfig, Pooling
from .trainer.workflow import TrainerConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "n_workers": 4,
    "k": 16,
    "batches": None,
    "optimizer": {"alpha": 0.01, "beta1": 0.0, "beta2": 0.999, "epsilon": 0.01, "reset_local_v": True},
    "sparse_lr": 0.5,
    "model": {"embedding_dim": 8, "hidden": [16], "activation": "relu", "pooling": "sum"},
    "store": {"cache_capacity": 4096, "cold_path": None, "acc_init": DEFAULT_ACC_INIT},
    "topology": None,
    "data": {"source": "synthetic", "n_instances": 100_000, "vocab": 10_000, "nnz_mean": 10,
             "batch_size": 1024, "minibatch_size": 128, "path": None},
    "comm": {"inter_node_bandwidth": 12.5e9, "inter_node_latency": 5e-6, "merge_round_trip": True,
             "pipelined": False, "ssd_bandwidth": 2e9},
    "sweep_ks": [1, 10, 20, 50, 100, 200],
    "output_dir": "out",
}


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(diagnostics))


def load_document(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror or exc}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return doc


def _merge(defaults: dict, raw: dict, prefix: str, diags: list[str]) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in raw.items():
        name = f"{prefix}{key}"
        if key not in defaults:
            diags.append(f"unknown field {name!r}")
        elif isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                diags.append(f"{name} must be an object")
            else:
                out[key] = _merge(defaults[key], val, name + ".", diags)
        else:
            out[key] = val
    return out


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int_at_least(d, name, lo, diags, value):
    if not _is_int(value) or value < lo:
        diags.append(f"{name} must be an integer >= {lo}" if name != "k" else "k must be ≥ 1")


def _writable_target(path: Path) -> bool:
    p = path.resolve()
    while not p.exists():
        if p.parent == p:
            return False
        p = p.parent
    return p.is_dir() and os.access(p, os.W_OK)


def check_values(c: dict) -> list[str]:
    diags: list[str] = []
    chk = lambda name, value, lo: _int_at_least(c, name, lo, diags, value)
    if not _is_int(c["seed"]) or not 0 <= c["seed"] < 2 ** 64:
        diags.append("seed must be an unsigned 64-bit integer")
    chk("n_workers", c["n_workers"], 1)
    chk("k", c["k"], 1)
    if c["batches"] is not None:
        chk("batches", c["batches"], 1)

    opt = c["optimizer"]
    if not _is_num(opt["alpha"]) or not opt["alpha"] > 0:
        diags.append("optimizer.alpha must be > 0")
    for b in ("beta1", "beta2"):
        if not _is_num(opt[b]) or not 0 <= opt[b] < 1:
            diags.append(f"optimizer.{b} must be in [0, 1)")
    if not _is_num(opt["epsilon"]) or not opt["epsilon"] > 0:
        diags.append("optimizer.epsilon must be > 0")
    if not isinstance(opt["reset_local_v"], bool):
        diags.append("optimizer.reset_local_v must be true or false")
    if not _is_num(c["sparse_lr"]) or not c["sparse_lr"] > 0:
        diags.append("sparse_lr must be > 0")

    m = c["model"]
    chk("model.embedding_dim", m["embedding_dim"], 1)
    if not isinstance(m["hidden"], list) or not all(_is_int(h) and h >= 1 for h in m["hidden"]):
        diags.append("model.hidden must be a list of integers >= 1")
    if m["activation"] not in {a.value for a in Activation}:
        diags.append(f"model.activation must be one of {sorted(a.value for a in Activation)}")
    if m["pooling"] not in {p.value for p in Pooling}:
        diags.append(f"model.pooling must be one of {sorted(p.value for p in Pooling)}")

    s = c["store"]
    chk("store.cache_capacity", s["cache_capacity"], 1)
    if not _is_num(s["acc_init"]) or not s["acc_init"] > 0:
        diags.append("store.acc_init must be > 0")
    if s["cold_path"] is not None and not (isinstance(s["cold_path"], str) and _writable_target(Path(s["cold_path"]))):
        diags.append(f"store.cold_path {s['cold_path']!r} is not a writable location")

    if c["topology"] is not None:
        p = Path(str(c["topology"]))
        if not p.is_file():
            diags.append(f"topology file {str(p)!r} does not exist")
        else:
            try:
                load_topology(p)
            except TopologyError as exc:
                diags.append(f"topology file {str(p)!r}: {exc}")
            except OSError as exc:
                diags.append(f"topology file {str(p)!r} is not readable: {exc}")

    d = c["data"]
    chk("data.batch_size", d["batch_size"], 1)
    chk("data.minibatch_size", d["minibatch_size"], 1)
    if d["source"] == "synthetic":
        chk("data.n_instances", d["n_instances"], 1)
        chk("data.vocab", d["vocab"], 1)
        if not _is_num(d["nnz_mean"]) or not 1 <= d["nnz_mean"]:
            diags.append("data.nnz_mean must be >= 1")
        elif _is_int(d["vocab"]) and d["nnz_mean"] > d["vocab"]:
            diags.append("data.nnz_mean must not exceed data.vocab")
    elif d["source"] == "file":
        if not d["path"] or not Path(str(d["path"])).is_file():
            diags.append(f"data.path {d['path']!r} does not exist")
    else:
        diags.append("data.source must be 'synthetic' or 'file'")

    comm = c["comm"]
    for key in ("inter_node_bandwidth", "ssd_bandwidth"):
        if not _is_num(comm[key]) or not comm[key] > 0:
            diags.append(f"comm.{key} must be > 0")
    if not _is_num(comm["inter_node_latency"]) or comm["inter_node_latency"] < 0:
        diags.append("comm.inter_node_latency must be >= 0")
    for key in ("merge_round_trip", "pipelined"):
        if not isinstance(comm[key], bool):
            diags.append(f"comm.{key} must be true or false")

    ks = c["sweep_ks"]
    if not isinstance(ks, list) or not ks or not all(_is_int(k) and k >= 1 for k in ks):
        diags.append("sweep_ks must be a non-empty list of integers >= 1")
    if not isinstance(c["output_dir"], str) or not c["output_dir"]:
        diags.append("output_dir must be a non-empty path")
    elif not _writable_target(Path(c["output_dir"])):
        diags.append(f"output_dir {c['output_dir']!r} is not writable")
    return diags


def resolve(raw: dict, overrides: dict | None = None) -> tuple[dict, list[str]]:
    diags: list[str] = []
    merged = _merge(DEFAULTS, raw, "", diags)
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = val
    diags += check_values(merged)
    return merged, diags


def validate(raw: dict, overrides: dict | None = None) -> list[str]:
    """Diagnostics for a raw config document; empty means it will run."""
    return resolve(raw, overrides)[1]


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    @classmethod
    def from_document(cls, raw: dict, overrides: dict | None = None) -> "ExperimentConfig":
        merged, diags = resolve(raw, overrides)
        if diags:
            raise ConfigError(diags)
        return cls(merged)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output_dir"])

    def with_values(self, **changes) -> "ExperimentConfig":
        vals = copy.deepcopy(self.values)
        vals.update(changes)
        return ExperimentConfig(vals)

    def topology(self) -> TopologyGraph:
        path = self.values["topology"]
        return example_topology() if path is None else load_topology(path)

    def trainer_config(self, store_dir: str | Path) -> TrainerConfig:
        v = self.values
        opt, m, comm = v["optimizer"], v["model"], v["comm"]
        return TrainerConfig(
            n_workers=v["n_workers"],
            adam=AdamHyper(alpha=opt["alpha"], beta1=opt["beta1"], beta2=opt["beta2"],
                           epsilon=opt["epsilon"], k=v["k"], reset_local_v=opt["reset_local_v"]),
            model=ModelConfig(vocab_size=v["data"]["vocab"], embedding_dim=m["embedding_dim"],
                              hidden=tuple(m["hidden"]), activation=m["activation"], pooling=m["pooling"]),
            sparse_lr=v["sparse_lr"],
            minibatch_size=v["data"]["minibatch_size"],
            cache_capacity=v["store"]["cache_capacity"],
            store_dir=store_dir,
            acc_init=v["store"]["acc_init"],
            seed=v["seed"],
            merge_round_trip=comm["merge_round_trip"],
            pipelined=comm["pipelined"],
            inter_node=InterNodeLink(comm["inter_node_bandwidth"], comm["inter_node_latency"]),
            ssd_bandwidth=comm["ssd_bandwidth"],
        )

    def batches(self) -> Iterator[Batch]:
        d = self.values["data"]
        if d["source"] == "synthetic":
            stream = generate_synthetic_ctr(self.values["seed"], d["n_instances"], d["vocab"],
                                            d["nnz_mean"], d["batch_size"])
        else:
            stream = batched(read_instances(d["path"]), d["batch_size"])
        limit = self.values["batches"]
        for i, b in enumerate(stream):
            if limit is not None and i >= limit:
                break
            yield b
