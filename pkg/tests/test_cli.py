import csv
import json
import os

import pytest

from delome.cli import load_config, main, parse_config
from delome.evaluation import AccuracyMatrix
from delome.taskstream import load_graph, load_stream

FAST = "epochs: 60\ncondense_epochs: 20\n"


@pytest.fixture(scope="module")
def stream_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--blocks", "50,50,50,50", "--intra", "0.2", "--inter", "0.01",
                 "--seed", "7", "--out", str(root / "g")]) == 0
    assert main(["split", "--graph", str(root / "g"), "--classes-per-task", "2",
                 "--out", str(root / "s")]) == 0
    return root / "s"


def write(path, text):
    path.write_text(text)
    return str(path)


class TestGenSplit:
    def test_gen_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen", "--blocks", "10,10", "--intra", "0.3", "--inter", "0.1",
                         "--seed", "3", "--out", str(tmp_path / name)]) == 0
        for f in ("manifest.json", "edges.csv", "features.bin", "labels.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert load_graph(tmp_path / "a").num_nodes == 20

    def test_gen_bad_probability(self, tmp_path, capsys):
        assert main(["gen", "--blocks", "10", "--intra", "1.5", "--inter", "0.1",
                     "--out", str(tmp_path / "g")]) == 2
        assert "--intra" in capsys.readouterr().err

    def test_split(self, stream_dir):
        assert len(load_stream(stream_dir)) == 2

    def test_split_zero(self, tmp_path, stream_dir):
        g = stream_dir.parent / "g"
        assert main(["split", "--graph", str(g), "--classes-per-task", "0",
                     "--out", str(tmp_path / "s")]) == 2

    def test_missing_graph(self, tmp_path):
        assert main(["split", "--graph", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


class TestCondense:
    def test_budget_rows_and_report(self, tmp_path, stream_dir, capsys):
        assert main(["condense", "--stream", str(stream_dir), "--task", "0", "--budget", "4",
                     "--epochs", "30", "--out", str(tmp_path), "--report-expressiveness"]) == 0
        meta = json.loads((tmp_path / "memory_0.json").read_text())
        assert len(meta["labels"]) == 8
        out = capsys.readouterr().out
        assert "condensed memory test accuracy" in out and "sampled memory test accuracy" in out

    def test_zero_epochs(self, tmp_path, stream_dir):
        assert main(["condense", "--stream", str(stream_dir), "--epochs", "0",
                     "--out", str(tmp_path)]) == 2

    def test_divergence_exit_code(self, tmp_path, stream_dir, capsys):
        assert main(["condense", "--stream", str(stream_dir), "--budget", "2", "--epochs", "50",
                     "--lr", "1e200", "--out", str(tmp_path)]) == 3
        assert "epoch" in capsys.readouterr().err


class TestRun:
    def test_finetune_forgets_and_delome_beats_it(self, tmp_path, stream_dir):
        ft = write(tmp_path / "ft.yaml", "strategy: finetune\n")
        dl = write(tmp_path / "dl.yaml", "strategy: delome\nbudget_per_class: 8\n")
        assert main(["run", "--config", ft, "--stream", str(stream_dir),
                     "--out", str(tmp_path / "ft")]) == 0
        assert main(["run", "--config", dl, "--stream", str(stream_dir),
                     "--out", str(tmp_path / "dl")]) == 0
        m_ft = json.loads((tmp_path / "ft" / "metrics.json").read_text())
        m_dl = json.loads((tmp_path / "dl" / "metrics.json").read_text())
        assert m_ft["af_cil"] < -0.3
        assert m_dl["aa_cil"] > m_ft["aa_cil"]

    def test_seeds_schema_and_artifacts(self, tmp_path, stream_dir):
        cfg = write(tmp_path / "c.yaml", "strategy: vanilla_replay\nbudget_per_class: 2\n" + FAST)
        out = tmp_path / "r"
        assert main(["run", "--config", cfg, "--stream", str(stream_dir), "--out", str(out),
                     "--seeds", "1,2,3,4,5"]) == 0
        m = json.loads((out / "metrics.json").read_text())
        assert [r["seed"] for r in m["per_seed"]] == [1, 2, 3, 4, 5]
        for k in ("aa_cil", "af_cil", "aa_til", "af_til"):
            assert k in m and k in m["mean"] and k in m["std"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [1, 2, 3, 4, 5]
        assert all(os.path.exists(out / p) for p in manifest["artifacts"])
        matrix = AccuracyMatrix.from_csv(out / "seed_3" / "matrix_cil.csv")
        assert matrix.row_complete(1)
        assert "seconds" not in json.dumps(m)

    def test_deterministic_metrics(self, tmp_path, stream_dir):
        cfg = write(tmp_path / "c.yaml", "strategy: delome\nbudget_per_class: 2\n" + FAST)
        for name in ("a", "b"):
            assert main(["run", "--config", cfg, "--stream", str(stream_dir),
                         "--out", str(tmp_path / name), "--seeds", "4"]) == 0
        assert ((tmp_path / "a" / "metrics.json").read_bytes()
                == (tmp_path / "b" / "metrics.json").read_bytes())

    def test_budget_sweep(self, tmp_path, stream_dir):
        cfg = write(tmp_path / "c.yaml", "strategy: sampled_memory_replay\n" + FAST)
        assert main(["run", "--config", cfg, "--stream", str(stream_dir),
                     "--out", str(tmp_path / "r"), "--budget-sweep", "2,4"]) == 0
        with open(tmp_path / "r" / "sweep_budget.csv") as f:
            rows = list(csv.DictReader(f))
        assert [int(r["budget_per_class"]) for r in rows] == [2, 4]
        assert "aa_cil_mean" in rows[0]

    def test_imbalance_sweep(self, tmp_path, stream_dir):
        cfg = write(tmp_path / "c.yaml", "strategy: sampled_debiased_replay\n" + FAST)
        assert main(["run", "--config", cfg, "--stream", str(stream_dir),
                     "--out", str(tmp_path / "r"), "--imbalance-sweep", "3,15"]) == 0
        with open(tmp_path / "r" / "sweep_imbalance.csv") as f:
            rows = list(csv.DictReader(f))
        # 30 training nodes per class
        assert [int(r["budget_per_class"]) for r in rows] == [10, 2]

    def test_bad_config(self, tmp_path, stream_dir, capsys):
        cfg = write(tmp_path / "c.yaml", "strategy: delome\nbogus: 1\n")
        assert main(["run", "--config", cfg, "--stream", str(stream_dir),
                     "--out", str(tmp_path / "r")]) == 2
        assert "bogus" in capsys.readouterr().err
        cfg = write(tmp_path / "d.yaml", "tau: 0\n")
        assert main(["run", "--config", cfg, "--stream", str(stream_dir),
                     "--out", str(tmp_path / "r")]) == 2

    def test_parse_config_published_preset(self):
        cfg, run = parse_config({"condense_optimizer": "adam", "condense_learning_rate": 1e-4,
                                 "condense_epochs": 800, "seeds": "1,2"})
        assert cfg.condense.optimizer == "adam" and cfg.condense.epochs == 800
        assert run["seeds"] == [1, 2]


class TestEval:
    def test_hand_matrix(self, tmp_path, capsys):
        p = write(tmp_path / "m.csv", "0.9,\n0.8,0.7\n")
        assert main(["eval", p]) == 0
        out = capsys.readouterr().out.split()
        assert out == ["AA", "0.75", "AF", "-0.1"]

    def test_single_entry(self, tmp_path, capsys):
        p = write(tmp_path / "m.csv", "0.9\n")
        assert main(["eval", p, "--json"]) == 0
        res = json.loads(capsys.readouterr().out)
        assert res == {"aa": 0.9, "af": 0.0, "af_degenerate": True}

    def test_malformed(self, tmp_path):
        assert main(["eval", write(tmp_path / "m.csv", "a,b\n")]) == 2


@pytest.mark.parametrize("name", ["fixture.yaml", "published.yaml"])
def test_shipped_configs_parse(name):
    path = os.path.join(os.path.dirname(__file__), "..", "configs", name)
    cfg, run = load_config(path)
    assert cfg.strategy == "delome" and run["seeds"] == [0, 1, 2, 3, 4]
