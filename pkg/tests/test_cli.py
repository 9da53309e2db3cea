import csv
import json

import numpy as np
import pytest

from hopgraph import cli
from hopgraph.datagen import SynthConfig, generate
from hopgraph.graph import read_events


def tiny_spec(dataset, **extra):
    spec = {
        "synth": {"n_users": 150, "n_items": 20, "n_clusters": 3, "seed": 4},
        "run": {"dataset": str(dataset), "dim": 8, "encoder_hidden": 8, "tower_hidden": 8,
                "train": {"batch_size": 32, "users_per_step": 100, "lr": 0.01, "epochs": 2}},
        "models": ["appnp"], "K_values": [2], "seeds": [0],
        "attack_models": ["appnp", "appnp_hs"], "attack_K": 2, "attack_epochs": 3,
    }
    spec.update(extra)
    return spec


@pytest.fixture
def setup(tmp_path):
    data = tmp_path / "data"

    def make(**extra):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(tiny_spec(data, **extra), indent=2))
        if not (data / "events.csv").exists():
            assert cli.main(["generate", "--config", str(path), "--out", str(data)]) == 0
        return path

    return make


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestGenerate:
    def test_files_reload_to_in_memory_log(self, setup, tmp_path):
        setup()
        data = tmp_path / "data"
        for name in ("events.csv", "attributes.csv", "synth_config.json", "experiment.json"):
            assert (data / name).exists()
        log, _, _ = generate(SynthConfig(n_users=150, n_items=20, n_clusters=3, seed=4))
        back = read_events(data / "events.csv", 150, 20)
        for col in ("day", "user", "item"):
            np.testing.assert_array_equal(getattr(back, col), getattr(log, col))

    def test_same_seed_same_files(self, setup, tmp_path):
        spec = setup()
        assert cli.main(["generate", "--config", str(spec), "--out", str(tmp_path / "again")]) == 0
        for name in ("events.csv", "attributes.csv"):
            assert (tmp_path / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    def test_seed_env_override(self, setup, tmp_path, monkeypatch):
        spec = setup()
        monkeypatch.setenv("HOPGRAPH_SEED", "11")
        assert cli.main(["generate", "--config", str(spec), "--out", str(tmp_path / "s11")]) == 0
        meta = json.loads((tmp_path / "s11" / "synth_config.json").read_text())
        assert meta["synth"]["seed"] == 11
        assert (tmp_path / "data" / "events.csv").read_bytes() != (tmp_path / "s11" / "events.csv").read_bytes()


class TestConfigErrors:
    def test_malformed_json_reports_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{\n  "models": ["appnp"],\n  "K_values": [1,,2]\n}')
        assert cli.main(["sweep", "--config", str(bad)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_bad_field_reports_path(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"run": {"train": {"lr": "fast"}}}))
        assert cli.main(["train", "--config", str(bad)]) == 2
        assert "run.train.lr" in capsys.readouterr().err

    def test_unknown_field(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"run": {"K": 2, "depth": 3}}))
        assert cli.main(["sweep", "--config", str(bad)]) == 2
        assert "run.depth" in capsys.readouterr().err

    def test_unknown_model(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"models": ["gat"]}))
        assert cli.main(["sweep", "--config", str(bad)]) == 2
        assert "gat" in capsys.readouterr().err

    def test_bad_seeds_flag(self, setup, capsys):
        assert cli.main(["sweep", "--config", str(setup()), "--seeds", "a,b"]) == 2

    def test_missing_dataset(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(tiny_spec(tmp_path / "nowhere")))
        assert cli.main(["train", "--config", str(cfg)]) == 1
        assert "generate" in capsys.readouterr().err


class TestSweep:
    def test_one_row_per_metric_per_day(self, setup, tmp_path):
        out = tmp_path / "sweep"
        assert cli.main(["sweep", "--config", str(setup()), "--out", str(out)]) == 0
        got = rows(out / "metrics.csv")
        keys = [(r["day"], r["metric"]) for r in got]
        assert len(keys) == len(set(keys))
        assert {r["metric"] for r in got} == {f"{m}@10" for m in ("ndcg", "map", "hit", "ild", "coverage", "entropy")}
        assert {int(r["day"]) for r in got} <= {17, 18, 19}
        assert {(r["model"], r["K"], r["seed"]) for r in got} == {("appnp", "2", "0")}
        run = out / "runs" / "appnp-K2-seed0"
        for name in ("config.json", "curves.csv", "metrics.csv", "checkpoint.npz"):
            assert (run / name).exists()
        assert json.loads((out / "experiment.json").read_text())["models"] == ["appnp"]

    def test_rerun_hits_manifest(self, setup, tmp_path, monkeypatch):
        spec, out = setup(), tmp_path / "sweep"
        assert cli.main(["sweep", "--config", str(spec), "--out", str(out)]) == 0
        first = (out / "metrics.csv").read_bytes()

        def boom(*a, **k):
            raise AssertionError("retrained")

        monkeypatch.setattr(cli, "train", boom)
        assert cli.main(["sweep", "--config", str(spec), "--out", str(out)]) == 0
        assert (out / "metrics.csv").read_bytes() == first

    def test_summary_schema_with_dnn_replicated(self, setup, tmp_path):
        spec, out = setup(models=["dnn", "gcn_hs"], K_values=[1, 2], seeds=[0, 1]), tmp_path / "sweep"
        assert cli.main(["sweep", "--config", str(spec), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary) == {"dnn", "gcn_hs"}
        for model in summary:
            assert set(summary[model]) == {"1", "2"}
            entry = summary[model]["1"]["ndcg@10"]
            assert entry["n_seeds"] == 2 and entry["ci95"] >= 0
        assert summary["dnn"]["1"] == summary["dnn"]["2"]
        manifest = json.loads((out / "manifest.json").read_text())["runs"]
        assert sorted(manifest) == ["dnn-K0-seed0", "dnn-K0-seed1", "gcn_hs-K1-seed0", "gcn_hs-K1-seed1",
                                    "gcn_hs-K2-seed0", "gcn_hs-K2-seed1"]
        assert {r["K"] for r in rows(out / "metrics.csv") if r["model"] == "dnn"} == {"0"}

    def test_partial_failure_recorded(self, setup, tmp_path, monkeypatch):
        spec, out = setup(models=["dnn", "appnp"]), tmp_path / "sweep"
        real = cli.train

        def flaky(cfg, ds, **kw):
            if cfg.model == "dnn":
                raise RuntimeError("simulated crash")
            return real(cfg, ds, **kw)

        monkeypatch.setattr(cli, "train", flaky)
        assert cli.main(["sweep", "--config", str(spec), "--out", str(out)]) == 1
        manifest = json.loads((out / "manifest.json").read_text())["runs"]
        assert manifest["dnn-K0-seed0"]["status"] == "failed"
        assert "simulated crash" in manifest["dnn-K0-seed0"]["error"]
        assert manifest["appnp-K2-seed0"]["status"] == "done"
        monkeypatch.setattr(cli, "train", real)
        assert cli.main(["sweep", "--config", str(spec), "--out", str(out)]) == 0
        assert {r["model"] for r in rows(out / "metrics.csv")} == {"dnn", "appnp"}

    def test_sweeps_byte_identical_and_parallel_agrees(self, setup, tmp_path):
        spec = setup(models=["dnn", "appnp"], seeds=[0, 1])
        outs = [tmp_path / "a", tmp_path / "b", tmp_path / "p"]
        assert cli.main(["sweep", "--config", str(spec), "--out", str(outs[0])]) == 0
        assert cli.main(["sweep", "--config", str(spec), "--out", str(outs[1])]) == 0
        assert cli.main(["sweep", "--config", str(spec), "--out", str(outs[2]), "--parallel", "2"]) == 0
        ref = (outs[0] / "metrics.csv").read_bytes()
        assert all((o / "metrics.csv").read_bytes() == ref for o in outs[1:])


class TestAttack:
    def test_curves(self, setup, tmp_path):
        spec = setup(seeds=[0, 1])
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["attack", "--config", str(spec), "--out", str(a)]) == 0
        got = rows(a / "attack.csv")
        keys = [(r["model"], r["seed"], r["epoch"]) for r in got]
        assert len(keys) == len(set(keys)) == 2 * 2 * 4
        summary = json.loads((a / "attack_summary.json").read_text())
        assert set(summary) == {"appnp", "appnp_hs"}
        for entry in summary.values():
            assert all(s["decay"] >= 0 for s in entry["per_seed"].values())
        assert cli.main(["attack", "--config", str(spec), "--out", str(b)]) == 0
        assert (a / "attack.csv").read_bytes() == (b / "attack.csv").read_bytes()

    def test_test_graphs_are_edgeless(self, setup, tmp_path, monkeypatch):
        spec = setup()
        seen = []
        real = cli._check_attack_graphs
        monkeypatch.setattr(cli, "_check_attack_graphs", lambda ds: seen.append(real(ds)))
        assert cli.main(["attack", "--config", str(spec), "--out", str(tmp_path / "a")]) == 0
        assert len(seen) == 2


def test_train_then_evaluate(setup, tmp_path, capsys):
    spec, run = setup(), tmp_path / "run"
    assert cli.main(["train", "--config", str(spec), "--out", str(run), "--seeds", "3"]) == 0
    assert json.loads((run / "config.json").read_text())["seed"] == 3
    ev = tmp_path / "ev"
    assert cli.main(["evaluate", str(run / "checkpoint.npz"), "--out", str(ev)]) == 0
    assert (ev / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()
    assert "ndcg@10" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "hopgraph", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sweep" in res.stdout
