import csv
import json

import numpy as np
import pytest

from koopman_minset import cli
from koopman_minset.errors import DivergenceError


def run(*args):
    return cli.main([str(a) for a in args])


def test_list_systems(capsys):
    assert run("list-systems") == 0
    out = capsys.readouterr().out
    for line in ("linear_real (N=2)", "limit_cycle (N=2)", "brunton (N=2, lifted N=3)"):
        assert line in out


def test_analyze_linear_real(tmp_path):
    assert run("analyze", "--system", "linear_real", "--patch", 1, 3, 1, 3, "--outdir", tmp_path) == 0
    report = json.loads((tmp_path / "residuals.json").read_text())
    assert report["max_abs"] <= 1e-9 and report["passed"]
    for kind in ("split", "canonical", "flowbox"):
        assert (tmp_path / f"{kind}.csv").exists()


def test_analyze_complex_columns(tmp_path):
    assert run("analyze", "--system", "linear_imaginary", "--patch", 1, 3, 1, 3, "--outdir", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "flowbox.csv")))
    assert len(rows) == 2500
    im = np.array([[float(r["z1_im"]), float(r["z2_im"])] for r in rows])
    assert np.abs(im).max() > 0.1


def test_analyze_unknown_system(tmp_path, capsys):
    assert run("analyze", "--system", "lorenz", "--outdir", tmp_path) == 2
    assert "lorenz" in capsys.readouterr().err


def test_usage_error():
    assert run("frobnicate") == 2
    assert run("analyze", "--resolution", "many") == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("train", "--config", cfg) == 2


def test_config_invariant_violated(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"orth_weight": 1.5, "outdir": str(tmp_path)}))
    assert run("train", "--config", cfg) == 2


def test_flags_override_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"orth_weight": 1.5, "epochs": 3, "hidden": [4], "outdir": str(tmp_path / "o")}))
    assert run("train", "--config", cfg, "--orth-weight", 0.2) == 0
    report = json.loads((tmp_path / "o" / "train_report.json").read_text())
    assert report["config"]["orth_weight"] == 0.2 and report["config"]["epochs"] == 3


def test_train_default(tmp_path):
    out = tmp_path / "run"
    assert run("train", "--outdir", out, "--held-out", 5, 7, 1, 3) == 0
    report = json.loads((out / "train_report.json").read_text())
    assert report["unit_sum"] <= 1e-3
    assert report["foliation_warnings"] == []
    held = report["reports"]["held_out"]["unit_residual_stats"]
    assert held[0]["var"] <= 1e-3 and held[1]["var"] <= 1e-4
    rows = list(csv.reader(open(out / "curve.csv")))
    assert rows[0][:2] == ["epoch", "total"] and len(rows) == 5001


def test_train_foliation_patch(tmp_path):
    out = tmp_path / "run"
    assert run("train", "--outdir", out, "--patch", 2.5, 3, 2.5, 3, "--epochs", 50) == 0
    report = json.loads((out / "train_report.json").read_text())
    assert [w["label"] for w in report["foliation_warnings"]] == ["x1=x2"]


def test_train_divergence(tmp_path, monkeypatch, capsys):
    def boom(field, config):
        raise DivergenceError("non-finite loss at epoch 7", where=7)

    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--outdir", tmp_path, "--epochs", 10) == 3
    assert "epoch 7" in capsys.readouterr().err


def test_train_is_idempotent(tmp_path):
    args = ["train", "--epochs", 30, "--hidden", 4]
    assert run(*args, "--outdir", tmp_path / "a") == 0
    assert run(*args, "--outdir", tmp_path / "b") == 0
    assert (tmp_path / "a" / "curve.csv").read_bytes() == (tmp_path / "b" / "curve.csv").read_bytes()
    a = json.loads((tmp_path / "a" / "checkpoint.json").read_text())
    b = json.loads((tmp_path / "b" / "checkpoint.json").read_text())
    a.pop("metadata"), b.pop("metadata")
    assert a == b


def test_validate_held_out(tmp_path, checkpoint_path):
    assert run("validate", "--checkpoint", checkpoint_path, "--held-out", 5, 7, 1, 3, "--outdir", tmp_path) == 0
    report = json.loads((tmp_path / "validation_report.json").read_text())
    assert report["passed"]
    assert report["unit_residual_stats"][0]["var"] <= 1e-3
    assert report["independence"]["verdict"] == "independent"


def test_validate_failure_patch(tmp_path, checkpoint_path, capsys):
    code = run("validate", "--checkpoint", checkpoint_path, "--patch", 2.5, 3, 2.5, 3, "--outdir", tmp_path)
    assert code == 1
    report = json.loads((tmp_path / "validation_report.json").read_text())
    assert [w["label"] for w in report["foliation"]["warnings"]] == ["x1=x2"]
    assert "x1=x2" in capsys.readouterr().err


def test_validate_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("garbage")
    assert run("validate", "--checkpoint", bad, "--outdir", tmp_path) == 2


def test_validate_dimension_mismatch(tmp_path, checkpoint_path):
    data = json.loads(checkpoint_path.read_text())
    data["layer_sizes"] = [3, 2]
    data["weights"] = [np.zeros((3, 2)).tolist()]
    data["biases"] = [[0.0, 0.0]]
    data["config"]["patch"] = [[0, 1], [0, 1], [0, 1]]
    path = tmp_path / "c3.json"
    path.write_text(json.dumps(data))
    assert run("validate", "--checkpoint", path, "--outdir", tmp_path) == 2


def test_validate_needs_checkpoint(tmp_path):
    assert run("validate", "--outdir", tmp_path) == 2


def test_export_levelsets(tmp_path, checkpoint_path):
    assert run("export-levelsets", "--system", "limit_cycle", "--chart", "canonical", "--patch", 0.5, 1.5, -1, 1,
               "--resolution", 11, "--outdir", tmp_path) == 0
    rows = list(csv.reader(open(tmp_path / "levelsets_canonical.csv")))
    assert rows[0] == ["x1", "x2", "p1", "p2", "z1_re", "z1_im", "z2_re", "z2_im"]
    assert len(rows) == 122
    assert run("export-levelsets", "--checkpoint", checkpoint_path, "--outdir", tmp_path, "--resolution", 5) == 0
    assert (tmp_path / "levelsets_learned_flowbox.csv").exists()
