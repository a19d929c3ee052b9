import csv
import json

import numpy as np
import pytest

from ugnn.checkpoint import save_checkpoint
from ugnn.cli import load_cases, main, oracle_checkpoint
from ugnn.data import count_branches
from ugnn.gradcheck import registered_ops
from ugnn.network import NetworkSpec, build_network, valid_input_dims


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def cases(tmp_path_factory):
    out = tmp_path_factory.mktemp("cases")
    assert main(["synth", "--seed", "5", "--count", "5", "--dims", "32x32x32", "--out", str(out)]) == 0
    return out


def _config(tmp_path, cases, **train):
    cfg = {"seed": 1, "data": {"cases": str(cases)},
           "network": {"variant": "UGnnReg", "output_size": 32, "first_level_features": 4},
           "train": {"max_epochs": 5, "learning_rate": 3e-4, "dtype": "float64", **train}}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestSynth:
    def test_empty(self, tmp_path):
        assert main(["synth", "--seed", "0", "--count", "0", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["cases"] == []

    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--seed", "9", "--count", "2", "--dims", "32x32x32", "--out",
                         str(tmp_path / name)]) == 0
        assert _files(tmp_path / "a") == _files(tmp_path / "b")

    def test_cases_valid(self, cases):
        vols = load_cases(cases)
        assert len(vols) == 5
        manifest = json.loads((cases / "manifest.json").read_text())
        for v, entry in zip(vols, manifest["cases"]):
            assert v.shape == (32, 32, 32)
            assert np.all(v.reference[tuple(v.centreline.points.T)] == 1)
            assert count_branches(v) == entry["branches"]

    def test_eight_cases_64(self, tmp_path):
        assert main(["synth", "--seed", "2", "--count", "8", "--dims", "64x64x64", "--out", str(tmp_path)]) == 0
        vols = load_cases(tmp_path)
        assert len(vols) == 8 and {v.shape for v in vols} == {(64, 64, 64)}
        for v in vols:
            assert v.reference.any() and np.all(v.roi[v.reference.astype(bool)] == 1)
            assert np.all(v.reference[tuple(v.centreline.points.T)] == 1)

    def test_bad_dims(self, tmp_path):
        assert main(["synth", "--seed", "0", "--count", "1", "--dims", "32x32", "--out", str(tmp_path)]) == 1
        assert main(["synth", "--seed", "0", "--count", "1", "--dims", "16x16x16", "--out", str(tmp_path)]) == 1


class TestTrain:
    def test_history_and_rerun(self, tmp_path, cases):
        cfg = _config(tmp_path, cases)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r1")]) == 0
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r2")]) == 0
        rows = list(csv.reader((tmp_path / "r1" / "history.csv").open()))
        assert rows[0] == ["epoch", "train_loss", "valid_loss", "moving_avg"] and len(rows) == 6
        assert {"best.ckpt", "final.ckpt", "history.csv"} <= set(_files(tmp_path / "r1"))
        assert _files(tmp_path / "r1") == _files(tmp_path / "r2")

    def test_invalid_variant(self, tmp_path, cases):
        cfg = json.loads(_config(tmp_path, cases).read_text())
        cfg["network"]["variant"] = "UNetLev4"
        (tmp_path / "bad.json").write_text(json.dumps(cfg))
        assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 1

    def test_missing_seed_and_file(self, tmp_path, cases):
        cfg = json.loads(_config(tmp_path, cases).read_text())
        del cfg["seed"]
        (tmp_path / "noseed.json").write_text(json.dumps(cfg))
        assert main(["train", "--config", str(tmp_path / "noseed.json"), "--out", str(tmp_path / "o")]) == 1
        assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1

    def test_missing_data(self, tmp_path):
        (tmp_path / "empty").mkdir()
        cfg = {"seed": 0, "data": {"cases": "empty"}, "network": {"variant": "UNetLev3", "output_size": 4}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self, tmp_path, cases):
        cfg = _config(tmp_path, cases, max_epochs=1, learning_rate=1e300)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


@pytest.fixture(scope="module")
def model(tmp_path_factory):
    d = tmp_path_factory.mktemp("model")
    n = valid_input_dims("UGnnReg", 32)
    net = build_network(NetworkSpec("UGnnReg", input_dims=(n, n, n), first_level_features=4), seed=3)
    from ugnn.checkpoint import Checkpoint
    path = d / "net.ckpt"
    save_checkpoint(path, Checkpoint(net.spec.to_dict(), {k: p.data for k, p in net.params.items()}, seed=3))
    oracle = d / "oracle.ckpt"
    save_checkpoint(oracle, oracle_checkpoint())
    return path, oracle


class TestEvalRoc:
    def test_oracle_perfect(self, tmp_path, cases, model):
        _, oracle = model
        assert main(["eval", "--ckpt", str(oracle), "--cases", str(cases), "--threshold", "0.5",
                     "--out", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "metrics.json").read_text())
        for c in doc["cases"]:
            assert c["dice"] == 1.0 and c["leakage"] == 0.0 and c["completeness"] == 1.0

    def test_threshold_matches_roc(self, tmp_path, cases, model):
        net, _ = model
        assert main(["eval", "--ckpt", str(net), "--cases", str(cases), "--threshold", "0.5",
                     "--out", str(tmp_path / "e")]) == 0
        assert main(["roc", "--ckpt", str(net), "--cases", str(cases), "--grid", "0.3:0.7:0.2",
                     "--out", str(tmp_path / "r")]) == 0
        agg = json.loads((tmp_path / "e" / "metrics.json").read_text())["aggregate"]
        roc = json.loads((tmp_path / "r" / "roc.json").read_text())
        assert roc["thresholds"] == [0.3, 0.5, 0.7]
        i = roc["thresholds"].index(0.5)
        assert roc["completeness"][i] == agg["completeness"]["mean"]
        assert roc["leakage"][i] == agg["leakage"]["mean"]
        for a, b in zip(roc["completeness"], roc["completeness"][1:]):
            assert b <= a
        for a, b in zip(roc["leakage"], roc["leakage"][1:]):
            assert b <= a

    def test_single_threshold_grid(self, tmp_path, cases, model):
        net, _ = model
        assert main(["roc", "--ckpt", str(net), "--cases", str(cases), "--grid", "0.4:0.4:0.1",
                     "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "roc.csv").read_text().splitlines()
        assert len(rows) == 2

    def test_target_leakage(self, tmp_path, cases, model):
        net, _ = model
        assert main(["eval", "--ckpt", str(net), "--cases", str(cases), "--target-leakage", "0.13",
                     "--tol", "1e-4", "--out", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "metrics.json").read_text())
        op = doc["operating_point"]
        if op["reached"]:
            assert abs(doc["aggregate"]["leakage"]["mean"] - 0.13) <= 1e-4
            assert abs(op["leakage"] - 0.13) <= 1e-4
        else:
            assert op["unreachable"] or op["leakage"] != 0.13

    def test_bad_checkpoint(self, tmp_path, cases):
        (tmp_path / "x.ckpt").write_bytes(b"not a zip")
        assert main(["eval", "--ckpt", str(tmp_path / "x.ckpt"), "--cases", str(cases), "--threshold", "0.5",
                     "--out", str(tmp_path)]) == 2

    def test_threshold_or_target_required(self, tmp_path, cases, model):
        assert main(["eval", "--ckpt", str(model[0]), "--cases", str(cases)]) == 1


class TestGradcheck:
    def test_all_pass_and_listed_once(self, capsys):
        assert main(["gradcheck"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("PASS", "FAIL"))]
        ops = [l.split()[1] for l in lines]
        assert sorted(ops) == sorted(registered_ops()) and len(ops) == len(set(ops))
        assert all(l.startswith("PASS") for l in lines)

    def test_fault_detected(self, capsys):
        assert main(["gradcheck", "--inject-fault", "matmul"]) == 3
        out = capsys.readouterr().out
        assert "FAIL matmul" in out
        assert sum(l.startswith("FAIL") for l in out.splitlines()) == 1

    def test_unknown_op(self):
        assert main(["gradcheck", "--inject-fault", "nope"]) == 1
