import json

import pytest

from kstepctr.cli import main
from kstepctr.config import DEFAULTS, ConfigError, ExperimentConfig, validate

SMALL = {"batches": 4, "data": {"n_instances": 2000, "vocab": 300, "batch_size": 256, "minibatch_size": 32},
         "store": {"cache_capacity": 200}}


def write_cfg(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_validate_examples(tmp_path):
    assert validate({}) == []
    assert "k must be ≥ 1" in validate({"k": 0})
    diags = validate({"topology": str(tmp_path / "missing.topo")})
    assert len(diags) == 1 and "missing.topo" in diags[0]
    assert any("unknown field" in d for d in validate({"optimiser": {}}))
    assert any("optimizer.beta2" in d for d in validate({"optimizer": {"beta2": 1.0}}))
    assert any("data.path" in d for d in validate({"data": {"source": "file"}}))


def test_validate_does_not_mutate(tmp_path):
    doc = {"k": 3, "model": {"hidden": [4]}}
    before = json.dumps(doc, sort_keys=True)
    validate(doc)
    ExperimentConfig.from_document(doc)
    assert json.dumps(doc, sort_keys=True) == before
    assert DEFAULTS["k"] == 16


def test_bad_topology_document_reported(tmp_path):
    topo = tmp_path / "bad.topo"
    topo.write_text("device gpu 0\nlink gpu0 gpu4 nvlink 1\n")
    diags = validate({"topology": str(topo)})
    assert diags and "line 2" in diags[0]


def test_from_document_raises(tmp_path):
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_document({"n_workers": 0, "k": -1})
    assert len(err.value.diagnostics) == 2


def test_cli_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", "--config", write_cfg(tmp_path, {})]) == 0
    assert main(["validate", "--config", write_cfg(tmp_path, {"k": 0}, "bad.json")]) == 1
    assert "k must be" in capsys.readouterr().err
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["validate", "--config", str(p)]) == 1
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == 1
    assert main(["frobnicate"]) == 1


def test_run_outputs_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--quiet"]) == 0
    for name in ("trajectory.jsonl", "metrics.jsonl", "ledger.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    out = tmp_path / "a"
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert metrics[0] == {"schema": "kstepctr.metrics", "version": 1}
    assert len(metrics) == 1 + 4 and metrics[-1]["batch_id"] == 3
    traj = [json.loads(l) for l in (out / "trajectory.jsonl").read_text().splitlines()]
    assert traj[0]["schema"] == "kstepctr.trajectory"
    ledger = json.loads((out / "ledger.json").read_text())
    assert ledger["schema"] == "kstepctr.ledger_report"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["schema"] == "kstepctr.summary"
    assert summary["config"]["data"]["n_instances"] == 2000
    assert summary["config"]["optimizer"] == DEFAULTS["optimizer"]
    assert summary["result"]["batches"] == 4
    assert "wall" in json.loads((out / "timings.json").read_text())


def test_seed_override_changes_data(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    main(["run", "--config", cfg, "--out", str(tmp_path / "a"), "--quiet"])
    main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7", "--quiet"])
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() != (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert json.loads((tmp_path / "b" / "summary.json").read_text())["config"]["seed"] == 7


def test_rerun_into_same_directory_is_fresh(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    out = str(tmp_path / "o")
    main(["run", "--config", cfg, "--out", out, "--quiet"])
    first = (tmp_path / "o" / "metrics.jsonl").read_bytes()
    main(["run", "--config", cfg, "--out", out, "--quiet"])
    assert (tmp_path / "o" / "metrics.jsonl").read_bytes() == first


def test_run_from_instance_file(tmp_path):
    data = tmp_path / "d.tsv"
    data.write_text("".join(f"{i % 2}\t{i % 7},{10 + i % 5}\n" for i in range(300)))
    cfg = write_cfg(tmp_path, {"data": {"source": "file", "path": str(data), "vocab": 20, "batch_size": 100}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["result"]["instances"] == 300


def test_runtime_error_exit_code(tmp_path, capsys):
    data = tmp_path / "d.tsv"
    data.write_text("1\t1,2\n3\toops\n")
    cfg = write_cfg(tmp_path, {"data": {"source": "file", "path": str(data), "vocab": 5}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "runtime error" in capsys.readouterr().err


def test_sweep_k(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["sweep-k", "--config", cfg, "--out", str(tmp_path / "s"), "--ks", "2,4", "--quiet"]) == 0
    doc = json.loads((tmp_path / "s" / "sweep.json").read_text())
    rows = doc["rows"]
    assert [r["k"] for r in rows] == [1, 2, 4]
    assert rows[0]["dense_ratio"] == 1.0 and rows[0]["auc_diff"] == 0.0
    assert rows[1]["dense_merge_events"] == rows[0]["dense_merge_events"] // 2
    totals = [r["total_ratio"] for r in rows]
    assert totals == sorted(totals, reverse=True)
    for k in (1, 2, 4):
        assert (tmp_path / "s" / f"k{k}" / "summary.json").exists()
    assert (tmp_path / "s" / "sweep.tsv").read_text().splitlines()[0].startswith("k\t")


def test_route_compare(tmp_path, capsys):
    assert main(["route-compare", "--out", str(tmp_path / "r")]) == 0
    doc = json.loads((tmp_path / "r" / "routes.json").read_text())
    assert len(doc["routes"]) == 64
    assert 0 < doc["two_phase_ratio"] < 1
    assert "two_phase_ratio=" in capsys.readouterr().out
    assert main(["route-compare", "--out", str(tmp_path / "r"), "--bytes", "0"]) == 1
