import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cdn.cli import main
from cdn.corpus import Corpus

TINY_RUN = {
    "corpus": {"node_counts": [4], "families": ["linear"], "interventions": ["hard"], "datasets_per_config": 3,
               "m_obs": 120, "m_int": 60, "max_targets": 2},
    "model": {"d": 8, "structure_layers": 1, "diff_layers": 1, "T": 5, "k": 3, "n_max": 8, "ensemble": 2},
    "train": {"max_epochs": 2, "val_fraction": 0.34},
    "eval": {"soft_bootstrap": 5},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(TINY_RUN))
    assert main(["gen", "--config", str(cfg), "--out", str(root / "corpus"), "--seed", "7"]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(root / "corpus"), "--out", str(root / "model"),
                 "--seed", "7"]) == 0
    return root, cfg


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def log_without_seconds(path):
    with open(path, newline="") as fh:
        return [{k: v for k, v in r.items() if k != "seconds"} for r in csv.DictReader(fh)]


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert main(["gen", "--out", "x", "--bogus"]) == 1

    def test_missing_required(self, capsys):
        assert main(["eval", "--method", "dge"]) == 1

    def test_bad_config_is_runtime_error(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"corpus": {"nodes": 3}}))
        assert main(["gen", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2
        assert "cdn: error" in capsys.readouterr().err

    def test_missing_corpus(self, tmp_path):
        assert main(["featurize", "--corpus", str(tmp_path / "nope")]) == 2

    def test_predict_needs_inputs(self, run):
        root, _ = run
        assert main(["predict", "--ckpt", str(root / "model" / "model.ckpt")]) == 1

    def test_bad_log_level(self, monkeypatch, tmp_path):
        monkeypatch.setenv("CDN_LOG", "loud")
        assert main(["featurize", "--corpus", str(tmp_path)]) == 1

    def test_console_script(self):
        out = subprocess.run([sys.executable, "-m", "cdn.cli", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "featurize" in out.stdout


class TestPipeline:
    def test_gen_manifest_and_determinism(self, run, tmp_path):
        root, cfg = run
        corpus = Corpus(root / "corpus")
        assert len(corpus) == 3
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "again"), "--seed", "7"]) == 0
        a = {k: v for k, v in tree_bytes(root / "corpus").items() if not k.endswith(".bin")}
        assert a == tree_bytes(tmp_path / "again")

    def test_workers_do_not_change_results(self, run, tmp_path):
        root, cfg = run
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "w2"), "--seed", "7", "--workers", "2"]) == 0
        a = {k: v for k, v in tree_bytes(root / "corpus").items() if not k.endswith(".bin")}
        assert a == tree_bytes(tmp_path / "w2")

    def test_featurize_and_train_reproducible(self, run, tmp_path):
        root, cfg = run
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "7"]) == 0
        assert main(["featurize", "--config", str(cfg), "--corpus", str(tmp_path / "c"), "--seed", "7"]) == 0
        assert tree_bytes(tmp_path / "c") == tree_bytes(root / "corpus")
        assert main(["train", "--config", str(cfg), "--corpus", str(tmp_path / "c"), "--out", str(tmp_path / "m"),
                     "--seed", "7", "--no-featurize"]) == 0
        assert log_without_seconds(tmp_path / "m" / "train_log.csv") == log_without_seconds(root / "model" / "train_log.csv")
        assert (tmp_path / "m" / "model.ckpt").read_bytes() == (root / "model" / "model.ckpt").read_bytes()

    def test_no_featurize_fails_without_features(self, run, tmp_path):
        _, cfg = run
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "1"]) == 0
        assert main(["train", "--config", str(cfg), "--corpus", str(tmp_path / "c"), "--out", str(tmp_path / "m"),
                     "--no-featurize"]) == 2

    def test_eval_reproducible(self, run, tmp_path):
        root, cfg = run
        ckpt = str(root / "model" / "model.ckpt")
        docs = []
        for name in ("a", "b"):
            rep = tmp_path / name / "report.json"
            assert main(["eval", "--config", str(cfg), "--method", "cdn", "--corpus", str(root / "corpus"),
                         "--ckpt", ckpt, "--report", str(rep), "--seed", "3"]) == 0
            doc = json.loads(rep.read_text())
            doc.pop("runtime")
            docs.append(doc)
            assert (tmp_path / name / "recall_curve.csv").exists()
        assert docs[0] == docs[1]

    def test_eval_oracle_hard(self, run, tmp_path):
        root, cfg = run
        rep = tmp_path / "report.json"
        assert main(["eval", "--config", str(cfg), "--method", "analytic-hard", "--oracle-graphs",
                     "--corpus", str(root / "corpus"), "--report", str(rep)]) == 0
        corpus = Corpus(root / "corpus")
        rows = list(csv.DictReader(open(tmp_path / "per_regime.csv")))
        by_key = {(r["dataset"], int(r["regime"])): r for r in rows}
        identifiable = 0
        for ds in corpus.datasets:
            g = ds.g_obs()
            for reg in ds.regimes:
                if all(g.parents(t) for t in reg.targets):
                    identifiable += 1
                    row = by_key[(ds.id, reg.index)]
                    assert float(row["mAP"]) == 1.0
                    assert row["AUC"] == "nan" or float(row["AUC"]) == 1.0
        assert identifiable > 0

    @pytest.mark.parametrize("method", ["mbci", "dge", "analytic-soft"])
    def test_eval_baselines(self, run, tmp_path, method):
        root, cfg = run
        assert main(["eval", "--config", str(cfg), "--method", method, "--corpus", str(root / "corpus"),
                     "--report", str(tmp_path / "r.json"), "--metric-aggregation", "pooled"]) == 0
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["aggregation"] == "pooled" and doc["method"] == method

    def test_eval_variant_mismatch(self, run, tmp_path):
        root, cfg = run
        assert main(["eval", "--method", "cdn", "--variant", "cat", "--corpus", str(root / "corpus"),
                     "--ckpt", str(root / "model" / "model.ckpt"), "--report", str(tmp_path / "r.json")]) == 1


class TestPairCommands:
    def test_predict_from_files(self, run, tmp_path, capsys):
        root, cfg = run
        ds = Corpus(root / "corpus").datasets[0]
        obs, iv = ds.load_obs(), ds.regimes[0].load_int()
        np.save(tmp_path / "obs.npy", obs)
        np.savetxt(tmp_path / "int.csv", iv, delimiter=",", header="a,b,c,d", comments="")
        ckpt = str(root / "model" / "model.ckpt")
        assert main(["predict", "--ckpt", ckpt, "--obs", str(tmp_path / "obs.npy"), "--int", str(tmp_path / "int.csv"),
                     "--out", str(tmp_path / "p.csv"), "--seed", "1"]) == 0
        rows = list(csv.DictReader(open(tmp_path / "p.csv")))
        assert [int(r["node_index"]) for r in rows] == [0, 1, 2, 3]
        p = np.array([float(r["probability"]) for r in rows])
        assert np.all((p > 0) & (p < 1))
        assert main(["predict", "--ckpt", ckpt, "--corpus", str(root / "corpus"), "--dataset", ds.id,
                     "--regime", "0", "--seed", "1"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0] == "node_index,probability" and len(out) == 5
        np.testing.assert_allclose([float(line.split(",")[1]) for line in out[1:]], p, rtol=1e-5)

    @pytest.mark.parametrize("method", ["mbci", "dge", "analytic-soft", "analytic-hard"])
    def test_baseline(self, run, tmp_path, method):
        root, cfg = run
        ds = Corpus(root / "corpus").datasets[1]
        args = ["baseline", "--config", str(cfg), "--method", method, "--corpus", str(root / "corpus"),
                "--dataset", ds.id, "--regime", "2", "--out", str(tmp_path / "s.csv")]
        if method == "analytic-hard":
            args.append("--oracle-graphs")
        assert main(args) == 0
        rows = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert len(rows) == 4 and all(np.isfinite(float(r["score"])) for r in rows)

    def test_analytic_hard_with_estimated_graphs(self, run, tmp_path):
        root, cfg = run
        ds = Corpus(root / "corpus").datasets[0]
        assert main(["baseline", "--method", "analytic-hard", "--ckpt", str(root / "model" / "model.ckpt"),
                     "--corpus", str(root / "corpus"), "--dataset", ds.id, "--regime", "1",
                     "--out", str(tmp_path / "s.csv")]) == 0
        assert main(["baseline", "--method", "analytic-hard", "--corpus", str(root / "corpus"), "--dataset", ds.id,
                     "--regime", "1"]) == 1
