import json

import pytest

from anembed.cli import main
from anembed.model import load_model

SMALL_TRAIN = ["--dim", "8", "--layers", "8,4", "--epochs", "2", "--lr", "0.01",
               "--num-walks", "2", "--walk-length", "10", "--window", "3", "-q"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "sbm"), "--nodes-per-block", "20", "--p-in", "0.3",
                 "--seed", "1", "-q"]) == 0
    assert main(["split", "--edges", str(d / "sbm.edges"), "--out", str(d / "split.bin"),
                 "--seed", "42", "-q"]) == 0
    assert main(["train", "--split", str(d / "split.bin"), "--attrs", str(d / "sbm.attrs"),
                 "--out", str(d / "m.bin"), *SMALL_TRAIN]) == 0
    return d


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    # commands without --out drop their manifest in the working directory
    monkeypatch.chdir(tmp_path)


def manifest(path):
    return json.loads(path.read_text())


class TestSynthSplit:
    def test_outputs_and_manifest(self, data):
        for suffix in ("edges", "attrs", "labels"):
            assert (data / f"sbm.{suffix}").is_file()
        m = manifest(data / "split.bin.manifest.json")
        assert m["status"] == "ok" and m["seed"] == 42
        assert str(data / "sbm.edges") in m["inputs"]
        assert len(m["inputs"][str(data / "sbm.edges")]) == 64
        assert m["duration_seconds"] >= 0 and m["tool_version"]

    def test_missing_file(self, tmp_path, capsys):
        code = main(["split", "--edges", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "s")])
        assert code == 2
        assert "nope.txt" in capsys.readouterr().err
        m = manifest(tmp_path / "s.manifest.json")
        assert m["status"] == "error" and "nope.txt" in m["error"]

    def test_fractions_too_large(self, data, tmp_path):
        code = main(["split", "--edges", str(data / "sbm.edges"), "--out", str(tmp_path / "s"),
                     "--test", "0.6", "--val", "0.5"])
        assert code == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["split", "--bogus"])
        assert exc.value.code == 2


class TestTrain:
    def test_deterministic_twice(self, data, tmp_path):
        args = ["train", "--split", str(data / "split.bin"), "--attrs", str(data / "sbm.attrs"),
                "--freeze-walks", "--deterministic", "--seed", "7", *SMALL_TRAIN]
        assert main([*args, "--out", str(tmp_path / "a.bin")]) == 0
        assert main([*args, "--out", str(tmp_path / "b.bin")]) == 0
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert (tmp_path / "a.bin.log").read_text() == (tmp_path / "b.bin.log").read_text()
        assert (tmp_path / "a.bin.log").read_text().splitlines()[0].endswith("\t0")

    def test_structure_only_without_attributes(self, data, tmp_path):
        code = main(["train", "--edges", str(data / "sbm.edges"), "--lambda", "0",
                     "--out", str(tmp_path / "s.bin"), *SMALL_TRAIN])
        assert code == 0
        _, cfg = load_model(tmp_path / "s.bin")
        assert cfg.lam == 0.0

    def test_needs_exactly_one_source(self, data, tmp_path):
        assert main(["train", "--out", str(tmp_path / "x.bin"), *SMALL_TRAIN]) == 2

    def test_config_file_and_precedence(self, data, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("dim: 6\nlayers: [5]\nepochs: 3\nlambda: 0.25\n")
        code = main(["train", "--config", str(cfg), "--edges", str(data / "sbm.edges"),
                     "--attrs", str(data / "sbm.attrs"), "--out", str(tmp_path / "c.bin"),
                     "--num-walks", "1", "--walk-length", "6", "--window", "2",
                     "--epochs", "1", "-q"])
        assert code == 0
        _, mc = load_model(tmp_path / "c.bin")
        assert (mc.d_id, mc.hidden_sizes, mc.lam) == (6, (5,), 0.25)
        assert len((tmp_path / "c.bin.log").read_text().splitlines()) == 1

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"nonsense": 1}')
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


class TestEval:
    def test_link_prediction_json(self, data, tmp_path):
        out = tmp_path / "lp.json"
        code = main(["eval-lp", "--model", str(data / "m.bin"), "--attrs", str(data / "sbm.attrs"),
                     "--split", str(data / "split.bin"), "--out", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        assert 0.0 <= rep["metrics"]["auroc"] <= 1.0
        assert rep["meta"]["split_seed"] == 42

    def test_train_edges_flagged(self, data, capsys):
        code = main(["eval-lp", "--model", str(data / "m.bin"), "--attrs", str(data / "sbm.attrs"),
                     "--split", str(data / "split.bin"), "--on", "train", "--score", "cosine"])
        assert code == 0
        assert "leakage" in capsys.readouterr().out

    def test_size_mismatch_exit_3(self, data, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "o"), "--nodes-per-block", "10", "-q"]) == 0
        assert main(["split", "--edges", str(tmp_path / "o.edges"), "--out",
                     str(tmp_path / "o.split"), "-q"]) == 0
        code = main(["eval-lp", "--model", str(data / "m.bin"), "--attrs", str(data / "sbm.attrs"),
                     "--split", str(tmp_path / "o.split")])
        assert code == 3

    def test_wrong_artifact_exit_3(self, data):
        assert main(["eval-lp", "--model", str(data / "split.bin"),
                     "--split", str(data / "split.bin")]) == 3

    def test_classification_grid(self, data, tmp_path):
        out = tmp_path / "nc.json"
        code = main(["eval-nc", "--model", str(data / "m.bin"), "--attrs", str(data / "sbm.attrs"),
                     "--labels", str(data / "sbm.labels"), "--repeats", "2", "--out", str(out)])
        assert code == 0
        rows = json.loads(out.read_text())
        assert [r["meta"]["rho"] for r in rows] == [0.1, 0.3, 0.5]


class TestQueryExport:
    def test_query_rows(self, data, capsys):
        code = main(["query", "--model", str(data / "m.bin"), "--attrs", str(data / "sbm.attrs"),
                     "--node", "5", "--k", "3"])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        rows = [line.split("\t") for line in lines[2:]]
        assert [r[0] for r in rows] == ["1", "2", "3"]
        sims = [float(r[2]) for r in rows]
        assert sims == sorted(sims, reverse=True)

    def test_query_k_zero(self, data, tmp_path, capsys):
        code = main(["query", "--model", str(data / "m.bin"), "--attrs", str(data / "sbm.attrs"),
                     "--node", "5", "--k", "0"])
        assert code == 0
        assert capsys.readouterr().out.splitlines() == ["query: 5", "rank\tnode\tcosine"]
        assert manifest(tmp_path / "anembed-query.manifest.json")["results"] == []

    def test_query_names(self, data, tmp_path, capsys):
        names = tmp_path / "names.tsv"
        names.write_text("".join(f"{i}\tpaper-{i}\n" for i in range(80)))
        code = main(["query", "--model", str(data / "m.bin"), "--attrs", str(data / "sbm.attrs"),
                     "--node", "5", "--k", "2", "--names", str(names)])
        assert code == 0
        out = capsys.readouterr().out
        assert "query: paper-5" in out and "\tpaper-" in out

    def test_export_matches_train_embeddings(self, data, tmp_path):
        args = ["--attrs", str(data / "sbm.attrs")]
        assert main(["train", "--split", str(data / "split.bin"), *args, "--out",
                     str(tmp_path / "m.bin"), "--embeddings", str(tmp_path / "a.txt"),
                     *SMALL_TRAIN]) == 0
        assert main(["export", "--model", str(tmp_path / "m.bin"), *args,
                     "--out", str(tmp_path / "b.txt")]) == 0
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
