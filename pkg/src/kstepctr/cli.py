"""Command line runner.

    kstepctr run           --config cfg.json --out DIR
    kstepctr sweep-k       --config cfg.json --out DIR [--ks 1,10,20]
    kstepctr route-compare --config cfg.json --out DIR [--bytes N]
    kstepctr validate      --config cfg.json

Exit status: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_document, validate
from .ledger import Category, kstep_ratio, two_phase_ratio
from .topology import naive_route, plan_route, transfer_time
from .trainer.workflow import TrainingContext, train_batch

log = logging.getLogger("kstepctr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
METRICS_SCHEMA = "kstepctr.metrics"
SUMMARY_SCHEMA = "kstepctr.summary"
SWEEP_SCHEMA = "kstepctr.sweep"
ROUTES_SCHEMA = "kstepctr.routes"
SCHEMA_VERSION = 1
RUN_FILES = ("trajectory.jsonl", "metrics.jsonl", "ledger.json", "summary.json")


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fresh_store_dir(cfg: ExperimentConfig, out: Path) -> Path:
    store = Path(cfg["store"]["cold_path"]) if cfg["store"]["cold_path"] else out / "store"
    store.mkdir(parents=True, exist_ok=True)
    for name in ("cold.dat", "cold.idx"):
        (store / name).unlink(missing_ok=True)
    return store


def run_experiment(cfg: ExperimentConfig, out: Path) -> dict:
    """Online predict-then-train run; writes the run files into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    wall = time.perf_counter()
    topo = cfg.topology()
    ctx = TrainingContext(cfg.trainer_config(_fresh_store_dir(cfg, out)), topo)
    try:
        with (out / "metrics.jsonl").open("w") as fh:
            fh.write(json.dumps({"schema": METRICS_SCHEMA, "version": SCHEMA_VERSION}, sort_keys=True) + "\n")
            last = None
            for batch in cfg.batches():
                last = train_batch(ctx, batch, evaluate=True)
                fh.write(json.dumps(last.to_record(), sort_keys=True) + "\n")
                log.info("batch %d loss %.4f auc %s", last.batch_id, last.train_loss, last.cumulative_auc)
        if last is None:
            raise RuntimeError("data source produced no batches")
        ctx.trajectory().to_jsonl(out / "trajectory.jsonl")
        G = len(topo.accelerators)
        pulls = np.zeros((G, G), dtype=np.int64)
        pulls[:ctx.gpus_used, :ctx.gpus_used] = ctx.pull_matrix
        report = ctx.ledger.report({"two_phase_pull": two_phase_ratio(topo, pulls, cfg["comm"]["pipelined"])})
        _dump(out / "ledger.json", report.to_dict())
        result = {
            "batches": len(ctx.history),
            "instances": sum(m.instances for m in ctx.history),
            "dense_steps": ctx.dense_steps,
            "merges": ctx.merges,
            "dense_merge_events": report.get(Category.DENSE_MERGE).count,
            "cumulative_auc": last.cumulative_auc,
            "final_train_loss": last.train_loss,
        }
        _dump(out / "summary.json", {"schema": SUMMARY_SCHEMA, "version": SCHEMA_VERSION,
                                     "config": cfg.values, "result": result, "files": list(RUN_FILES)})
        timings = dict(sorted(ctx.timings.items()))
        timings["wall"] = time.perf_counter() - wall
        _dump(out / "timings.json", timings)
    finally:
        ctx.close()
    return {"result": result, "report": report}


def sweep_k(cfg: ExperimentConfig, out: Path, ks: list[int]) -> list[dict]:
    ks = sorted(set(ks) | {1})
    runs = {}
    for k in ks:
        log.info("sweep: k=%d", k)
        sub = cfg.with_values(k=k)
        runs[k] = run_experiment(sub, out / f"k{k}")
    base = runs[1]
    rows = []
    for k in ks:
        r = runs[k]
        auc, auc1 = r["result"]["cumulative_auc"], base["result"]["cumulative_auc"]
        rows.append({
            "k": k,
            "dense_merge_events": r["result"]["dense_merge_events"],
            "dense_bytes": r["report"].get(Category.DENSE_MERGE).nbytes,
            "total_bytes": r["report"].total_bytes,
            "dense_ratio": kstep_ratio(r["report"], base["report"], "dense"),
            "total_ratio": kstep_ratio(r["report"], base["report"], "total"),
            "cumulative_auc": auc,
            "auc_diff": None if auc is None or auc1 is None else auc - auc1,
        })
    _dump(out / "sweep.json", {"schema": SWEEP_SCHEMA, "version": SCHEMA_VERSION, "rows": rows})
    cols = list(rows[0])
    lines = ["\t".join(cols)] + ["\t".join("" if r[c] is None else str(r[c]) for c in cols) for r in rows]
    (out / "sweep.tsv").write_text("\n".join(lines) + "\n")
    return rows


def route_compare(cfg: ExperimentConfig, out: Path, nbytes: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    g = cfg.topology()
    pipelined = cfg["comm"]["pipelined"]
    accs = g.accelerators
    rows = []
    for s in accs:
        for d in accs:
            p, n = plan_route(g, s, d), naive_route(g, s, d)
            rows.append({
                "src": str(s), "dst": str(d),
                "mode": p.mode.value, "hops": [str(h) for h in p.hops],
                "planned_time": transfer_time(p, nbytes, pipelined),
                "naive_hops": [str(h) for h in n.hops],
                "naive_time": transfer_time(n, nbytes, pipelined),
            })
    workload = np.full((len(accs), len(accs)), nbytes, dtype=np.int64)
    np.fill_diagonal(workload, 0)
    doc = {"schema": ROUTES_SCHEMA, "version": SCHEMA_VERSION, "bytes_per_pair": nbytes,
           "pipelined": pipelined, "two_phase_ratio": two_phase_ratio(g, workload, pipelined), "routes": rows}
    _dump(out / "routes.json", doc)
    cols = ("src", "dst", "mode", "hops", "planned_time", "naive_time")
    lines = ["\t".join(cols)] + ["\t".join(
        ">".join(r[c]) if c == "hops" else str(r[c]) for c in cols) for r in rows]
    (out / "routes.tsv").write_text("\n".join(lines) + "\n")
    return doc


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be >= 1")
    return ks


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; omitted fields take their defaults")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=_u64, help="overrides the config seed")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    p = argparse.ArgumentParser(prog="kstepctr", description="k-step Adam CTR training experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="online predict-then-train run")
    sw = sub.add_parser("sweep-k", parents=[common], help="run once per merge period k")
    sw.add_argument("--ks", type=_parse_ks, help="comma-separated k values (default: sweep_ks)")
    rc = sub.add_parser("route-compare", parents=[common], help="planned vs host-routed transfers")
    rc.add_argument("--bytes", type=int, default=1 << 20, help="bytes per accelerator pair")
    sub.add_parser("validate", parents=[common], help="check a config and print diagnostics")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    overrides = {"seed": args.seed, "output_dir": args.out}
    try:
        raw = load_document(args.config)
        if args.command == "validate":
            diags = validate(raw, overrides)
            for d in diags:
                print(f"error: {d}", file=sys.stderr)
            if not diags and not args.quiet:
                print("config ok")
            return EXIT_CONFIG if diags else EXIT_OK
        cfg = ExperimentConfig.from_document(raw, overrides)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            res = run_experiment(cfg, cfg.output_dir)["result"]
            if not args.quiet:
                print(json.dumps(res, sort_keys=True))
        elif args.command == "sweep-k":
            rows = sweep_k(cfg, cfg.output_dir, args.ks or cfg["sweep_ks"])
            if not args.quiet:
                for r in rows:
                    print(f"k={r['k']}\tdense_ratio={r['dense_ratio']:.6f}\ttotal_ratio={r['total_ratio']:.6f}"
                          f"\tauc={r['cumulative_auc']}")
        else:
            if args.bytes < 1:
                print("error: --bytes must be >= 1", file=sys.stderr)
                return EXIT_CONFIG
            doc = route_compare(cfg, cfg.output_dir, args.bytes)
            if not args.quiet:
                print(f"two_phase_ratio={doc['two_phase_ratio']:.6f}")
    except Exception as exc:  # surfaced with the component that raised it
        mod = type(exc).__module__.replace("kstepctr.", "")
        print(f"runtime error [{mod}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
