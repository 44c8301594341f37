import copy
import csv
import io
import json
import os

import numpy as np
import pytest
import yaml

from gprebn.errors import CheckpointError, ConfigError, NumericalError
from gprebn.harness import cli
from gprebn.harness.config import ExperimentConfig, config_from_dict, dump_config, load_config
from gprebn.harness.experiments import (
    ABLATIONS,
    CheckpointStore,
    build_task,
    run_ablation,
    run_eval,
    run_experiment,
    run_sweep,
    sweep_label,
    train_all,
)
from gprebn.harness.report import ResultTable, aggregate, reaggregate, to_csv, to_json, to_markdown
from gprebn.network import checkpoint_bytes
from gprebn.shiftgen import save_csv

TINY = {
    "task": {"generator": {"num_classes": 3, "dim": 8, "samples_per_domain": 300},
             "targets": [0, 2], "severities": [1, 3], "corruptions": ["gaussian_noise", "scaling"]},
    "model": {"hidden": [16, 16], "epochs": 4},
    "adaptation": {"batch_size": 32, "rho": 100.0},
    "sweep": {"theta": [0.0, 1.0], "rho": [0.0, 100.0], "delta": [1]},
    "ablation_d": {"corruptions": ["scaling"], "pretrain_epochs": 3, "finetune_epochs": 2},
    "repetitions": 2,
}


def tiny(**over):
    d = copy.deepcopy(TINY)
    for dotted, value in over.items():
        node = d
        *path, last = dotted.split(".")
        for k in path:
            node = node.setdefault(k, {})
        node[last] = value
    return config_from_dict(d)


@pytest.fixture(scope="module")
def store():
    return CheckpointStore()


class TestConfig:
    def test_defaults_validate(self):
        cfg = config_from_dict({})
        assert cfg.sweep.theta == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert cfg.sweep.rho == [0.1, 1.0, 10.0] and cfg.sweep.delta == [1, 3]
        assert list(cfg.seeds) == [0, 1, 2]

    @pytest.mark.parametrize("data,field", [
        ({"adaptation": {"rho": -1}}, "adaptation.rho"),
        ({"adaptation": {"delta": 0}}, "adaptation.delta"),
        ({"adaptation": {"theta": 2}}, "adaptation.theta"),
        ({"sweep": {"theta": [0.1, 1.5]}}, "sweep.theta[1]"),
        ({"sweep": {"rho": []}}, "sweep.rho"),
        ({"task": {"protocol": "holdout"}}, "task.protocol"),
        ({"task": {"targets": [7]}}, "task.targets[0]"),
        ({"task": {"severities": [0]}}, "task.severities[0]"),
        ({"task": {"corruptions": ["blur"]}}, "task.corruptions[0]"),
        ({"task": {"generator": {"dim": 1}}}, "task.generator.dim"),
        ({"task": {"data_files": ["/nonexistent/a.csv", "/nonexistent/b.csv"]}},
         "task.data_files[0].path"),
        ({"model": {"hidden": "wide"}}, "model.hidden"),
        ({"model": {"lr": 0}}, "model.lr"),
        ({"model": {"epsilon": 0}}, "model.epsilon"),
        ({"adaptation": {"methods": ["Tent", "SHOT"]}}, "adaptation.methods[1]"),
        ({"adaptation": {"episodic": "yes"}}, "adaptation.episodic"),
        ({"repetitions": 0}, "repetitions"),
        ({"modle": {}}, "modle"),
        ({"model": {"epoch": 3}}, "model.epoch"),
    ])
    def test_errors_name_field(self, data, field):
        with pytest.raises(ConfigError) as ei:
            config_from_dict(data)
        assert ei.value.details["field"] == field

    def test_yaml_round_trip(self, tmp_path):
        cfg = tiny()
        p = tmp_path / "c.yaml"
        p.write_text(dump_config(cfg), encoding="utf-8")
        back = load_config(p)
        assert back.to_dict() == cfg.to_dict() and back.fingerprint() == cfg.fingerprint()

    def test_bad_yaml_and_missing(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("task: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(p)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.yaml")


class TestCells:
    def test_row_counts(self, store):
        cfg = tiny()
        methods = ["source-stats eval", "Tent", "GpreBN+TRS"]
        t = run_experiment(cfg, methods, store=store)
        assert len(t.records) == len(methods) * 2 * 1 * 2  # methods x targets x severities x seeds
        c = tiny(**{"task.protocol": "corruption"})
        t = run_experiment(c, methods, store=store)
        assert len(t.records) == len(methods) * 2 * 2 * 2

    def test_source_stats_equals_eval(self, store):
        cfg = tiny()
        a = run_experiment(cfg, ["source-stats eval", "Tent"], store=store)
        b = run_eval(cfg, store=store)
        assert a.select("source-stats eval") == b.select("source-stats eval")

    def test_tent_equals_gprebn_current_batch(self, store):
        t = run_experiment(tiny(), ["Tent", "GpreBN(CurrentBatch)"], store=store)
        for r, s in zip(t.select("Tent"), t.select("GpreBN(CurrentBatch)")):
            assert (r["target"], r["seed"]) == (s["target"], s["seed"])
            assert abs(r["accuracy"] - s["accuracy"]) <= 1e-10
            assert abs(r["affine_delta"] - s["affine_delta"]) <= 1e-10
            assert r["affine_delta"] > 0

    def test_ablation_matrices(self, store):
        cfg = tiny(repetitions=1)
        for which in ("A", "b", "C"):
            t = run_ablation(cfg, which, store=store)
            assert t.methods() == list(ABLATIONS[which.upper()])
        d = run_ablation(cfg, "D")
        assert len(d.methods()) == 8 and d.name == "ablation_D"
        with pytest.raises(ConfigError):
            run_ablation(cfg, "E")

    def test_parallel_matches_serial(self, tmp_path):
        cfg = tiny()
        serial = run_experiment(cfg, ["Tent", "GpreBN+TRS"])
        par = run_experiment(cfg, ["Tent", "GpreBN+TRS"], jobs=2,
                             store=CheckpointStore(str(tmp_path)))
        assert serial.records == par.records

    def test_file_backed_task(self, tmp_path, store):
        cfg = tiny()
        task = build_task(cfg, 0)
        paths = []
        for k, dom in enumerate(task.domains[1:]):
            p = tmp_path / f"d{k}.csv"
            save_csv(dom, p)
            paths.append({"path": str(p), "format": "csv"})
        fcfg = tiny(**{"task.data_files": paths, "task.targets": [1], "repetitions": 1})
        t = run_experiment(fcfg, ["source-stats eval"])
        assert len(t.records) == 1 and 0 < t.records[0]["accuracy"] <= 1


class TestCheckpointStore:
    def test_reuse_and_mismatch(self, tmp_path):
        cfg = tiny(repetitions=1)
        st = CheckpointStore(str(tmp_path))
        first = train_all(cfg, store=st)
        again = train_all(cfg, store=CheckpointStore(str(tmp_path), retrain=False))
        assert [n for n, _ in first] == [n for n, _ in again]
        other = tiny(repetitions=1, **{"model.epochs": 5})
        with pytest.raises(CheckpointError):
            train_all(other, store=CheckpointStore(str(tmp_path), retrain=False))


def test_default_task_trains_well():
    cfg = config_from_dict({"repetitions": 1})
    trained = train_all(cfg)
    accs = [ck.metadata["source_val_accuracy"] for _, ck in trained]
    assert len(trained) == 4 and min(accs) >= 0.95, accs
    again = train_all(cfg, seeds=[0])
    assert checkpoint_bytes(again[0][1]) == checkpoint_bytes(trained[0][1])


class TestSweep:
    def test_single_cell(self, store):
        cfg = tiny(**{"sweep.theta": [0.5], "sweep.rho": [10.0], "sweep.delta": [2]})
        best, table = run_sweep(cfg, store=store)
        assert (best["theta"], best["rho"], best["delta"]) == (0.5, 10.0, 2)
        assert table.methods() == [sweep_label(0.5, 10.0, 2)]

    def test_best_at_least_rho_zero_and_deterministic(self, store):
        cfg = tiny()
        best, table = run_sweep(cfg, store=store)
        zero = max(np.mean(list(table.per_seed(sweep_label(t, 0.0, 1)).values())) for t in (0.0, 1.0))
        assert best["score"] >= zero
        again, _ = run_sweep(cfg, store=CheckpointStore())
        assert again == best

    def test_empty_grid(self):
        cfg = tiny()
        cfg.sweep.rho = []
        with pytest.raises(ConfigError):
            run_sweep(cfg)


class TestReport:
    def _table(self):
        t = ResultTable("t")
        r = np.random.default_rng(0)
        for m in ("a", "b"):
            for tgt in ("x", "y"):
                for s in range(3):
                    t.add(method=m, target=tgt, severity=0, seed=s, accuracy=float(r.random()),
                          entropy=0.1, entropy_first=0.2, entropy_last=0.05, affine_delta=0.0, n=10)
        return t

    def test_empty(self, tmp_path):
        t = ResultTable("empty")
        assert "(no records)" in to_markdown(t)
        assert reaggregate(to_json(t)).records == []
        assert to_csv(t).count("\n") == 1

    def test_json_reaggregation_bitwise(self):
        t = self._table()
        back = reaggregate(to_json(t))
        assert back.aggregates() == t.aggregates()
        doc = json.loads(to_json(t))
        doc["aggregates"][0]["mean"] += 1e-16
        with pytest.raises(NumericalError):
            reaggregate(json.dumps(doc))

    def test_csv_matches_json(self):
        t = self._table()
        rows = list(csv.DictReader(io.StringIO(to_csv(t))))
        recs = json.loads(to_json(t))["records"]
        assert len(rows) == len(recs)
        assert all(float(a["accuracy"]) == b["accuracy"] for a, b in zip(rows, recs))

    def test_aggregate_values(self):
        recs = [dict(method="m", target="x", severity=0, seed=s, accuracy=a)
                for s, a in enumerate((0.5, 0.7))]
        (cell, avg) = aggregate(recs)
        assert cell["mean"] == pytest.approx(0.6) and cell["std"] == pytest.approx(np.sqrt(0.02))
        assert avg["target"] == "avg" and avg["n"] == 2

    def test_markdown_format(self):
        md = to_markdown(self._table())
        assert md.splitlines()[2] == "| Method | x | y | Avg |"
        assert " ± " in md


def _cfg_file(tmp_path, **over):
    p = tmp_path / "cfg.yaml"
    d = copy.deepcopy(TINY)
    d["repetitions"] = 1
    d.update(over)
    p.write_text(yaml.safe_dump(d), encoding="utf-8")
    return str(p)


class TestCLI:
    def test_train_writes_manifest(self, tmp_path, capsys):
        out = tmp_path / "run"
        rc = cli.main(["train", "--config", _cfg_file(tmp_path), "--out", str(out), "--quiet"])
        assert rc == 0
        man = json.loads((out / "manifest.json").read_text())
        assert {"config.yaml", "train_log.jsonl", "train_summary.json"} <= set(man["files"])
        assert any(f.startswith("checkpoints/") for f in man["files"])
        assert man["commands"][0]["command"] == "train"
        for rel, info in man["files"].items():
            assert (out / rel).stat().st_size == info["bytes"]

    def test_progress_records_on_stdout(self, tmp_path, capsys):
        cli.main(["train", "--config", _cfg_file(tmp_path), "--out", str(tmp_path / "r")])
        lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert lines and {"epoch", "loss", "accuracy"} <= set(lines[0])

    def test_all_subcommands_then_report(self, tmp_path):
        cfg, out = _cfg_file(tmp_path), str(tmp_path / "run")
        for argv in (["train"], ["eval"], ["adapt", "--methods", "Tent", "GpreBN+TRS"],
                     ["ablate", "C"], ["sweep"], ["report"]):
            assert cli.main(argv + ["--config", cfg, "--out", out, "--quiet"]) == 0, argv
        report = (tmp_path / "run" / "report.md").read_text()
        for name in ("eval", "adapt", "ablation_C", "sweep"):
            assert f"### {name}" in report
        best = json.loads((tmp_path / "run" / "best.json").read_text())
        tuned = load_config(tmp_path / "run" / "best_config.yaml")
        assert tuned.adaptation.rho == best["rho"]

    def test_report_on_empty_dir(self, tmp_path):
        assert cli.main(["report", "--out", str(tmp_path / "e")]) == 0
        assert "(no result tables)" in (tmp_path / "e" / "report.md").read_text()

    def test_config_error_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("adaptation: {delta: 0}\n", encoding="utf-8")
        assert cli.main(["adapt", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "adaptation.delta" in capsys.readouterr().err
        assert cli.main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
        assert cli.main(["train", "--config", _cfg_file(tmp_path), "--jobs", "0",
                         "--out", str(tmp_path / "o")]) == 2

    def test_numerical_error_exit_3(self, tmp_path):
        cfg = _cfg_file(tmp_path, model={"hidden": [16, 16], "epochs": 4, "lr": 1e300})
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 3

    def test_io_error_exit_4(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        cfg = _cfg_file(tmp_path)
        assert cli.main(["train", "--config", cfg, "--out", str(blocker / "sub")]) == 4
        ck = tmp_path / "ck"
        ck.mkdir()
        (ck / "seed0_target0.ckpt").write_bytes(b"GPBNCKPT garbage")
        assert cli.main(["adapt", "--config", cfg, "--out", str(tmp_path / "o"),
                         "--checkpoints", str(ck)]) == 4

    def test_reports_byte_identical(self, tmp_path):
        cfg = _cfg_file(tmp_path)
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            for argv in (["adapt", "--methods", "Tent", "GpreBN+TRS+rT3A"], ["report"]):
                assert cli.main(argv + ["--config", cfg, "--out", str(out), "--quiet"]) == 0
            outs.append(out)
        for rel in ("report.md", "tables/adapt.json", "tables/adapt.csv", "tables/adapt.md"):
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()
