import csv
import json

import numpy as np
import pytest

from kalmanhj.cli import main
from kalmanhj.config import ExperimentConfig, preset_frame
from kalmanhj.errors import ConfigError, UnknownPresetError


def write_config(tmp_path, **overrides):
    cfg = {"frame": "kolmogorov2", "q": 2.0, "p": 10.0, "scenarios": [], "seed": 5}
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_presets():
    k = preset_frame("kolmogorov2").frame
    assert k.N == 2 and k.kappa == 1
    c = preset_frame("chain-4").frame
    assert c.n == (1, 1, 1, 1) and c.homogeneous_dimension == 6
    with pytest.raises(UnknownPresetError):
        preset_frame("heisenberg")


@pytest.mark.parametrize("bad", [{"p": 3.0}, {"colour": "red"}, {"frame": "chain-0"},
                                 {"lam": 2.0, "Lam": 1.0}, {"scenarios": ["nope"]},
                                 {"grid": {"cells": 3}}, {"delta": 1.5}])
def test_config_rejection(tmp_path, bad, capsys):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"frame": "kolmogorov2", **bad})
    assert main(["--config", str(write_config(tmp_path, **bad)), "--out", str(tmp_path / "o"), "run"]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "absent.json"), "run"]) == 2


def test_empty_scenarios_writes_manifest_only(tmp_path):
    out = tmp_path / "res"
    assert main(["--config", str(write_config(tmp_path)), "--out", str(out), "run"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "summary.json"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 5 and "numpy" in manifest["versions"]
    assert json.loads((out / "summary.json").read_text()) == {"checks": {}, "passed": True}


def test_run_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, scenarios=["decompose", "flow-identity", "gramian", "group-algebra"])
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["--config", str(cfg), "--out", str(out), "run"]) == 0
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    for name in names:
        if name != "manifest.json":
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    other = tmp_path / "c"
    assert main(["--seed", "6", "--config", str(cfg), "--out", str(other), "run"]) == 0
    assert (other / "flow-identity.json").read_bytes() != (outs[0] / "flow-identity.json").read_bytes()


def test_decompose_and_custom_frame(tmp_path, capsys):
    assert main(["decompose", "--frame", "chain-3"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n"] == [1, 1, 1]
    (tmp_path / "A.csv").write_text("0,0,0\n1,0,0\n0,1,0\n")
    (tmp_path / "P.json").write_text("[[1,0,0],[0,0,0],[0,0,0]]")
    out = tmp_path / "frame.json"
    assert main(["--out", str(out), "decompose", "--matrix-file", str(tmp_path / "A.csv"),
                 "--p0-file", str(tmp_path / "P.json")]) == 0
    assert json.loads(out.read_text())["kappa"] == 2
    assert main(["gauge", "--frame", str(out), "--points", "[[-0.5, 0.1, 0.2, 0.3]]"]) == 0
    (tmp_path / "bad.csv").write_text("0,0\n0,1\n")
    assert main(["decompose", "--matrix-file", str(tmp_path / "bad.csv"),
                 "--p0-file", str(tmp_path / "P.json")]) == 2


def test_gauge_and_modulus(tmp_path, capsys):
    assert main(["gauge", "--points", "[[-0.25, 0.5, 0.125], [0, 0, 0]]"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 2 and float(rows[1]["rho"]) == 0.0
    assert main(["modulus", "--points", "[[-0.25, 0.5, 0.125]]", "--alpha", "0.5"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert float(rows[0]["omega"]) > 0
    assert main(["gauge", "--points", "[[0, 1]]"]) == 2


def test_cost_subcommand(tmp_path, capsys):
    traj = tmp_path / "traj.csv"
    assert main(["cost", "--to", "[0, 1]", "--trajectory", str(traj)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["J"] == pytest.approx(6.0, rel=1e-8)
    data = np.loadtxt(traj, delimiter=",", skiprows=1)
    assert data.shape[1] == 5


def test_curved_subcommand(tmp_path):
    out = tmp_path / "curved"
    assert main(["--out", str(out), "curved", "--alphas", "0.6", "0.8"]) == 0
    rows = list(csv.DictReader((out / "curved.csv").open()))
    assert len(rows) == 9 and float(rows[0]["det"]) == pytest.approx(1.0)
    assert main(["curved", "--alphas", "0.6"]) == 2


def test_solve_then_analyse(tmp_path, capsys):
    path = tmp_path / "u.f64"
    assert main(["--out", str(path), "solve", "--kind", "upper", "--grid", "17,33,64",
                 "--bmax", "2"]) == 0
    meta = json.loads(capsys.readouterr().out)
    assert meta["dims"] == [65, 17, 33]
    assert (tmp_path / "u.f64.json").exists()
    assert main(["--out", str(tmp_path / "osc"), "oscillate", "--input", str(path), "--levels", "2"]) == 0
    report = json.loads((tmp_path / "osc" / "oscillation.json").read_text())
    assert report["osc"][0] >= report["osc"][-1]
    assert main(["holderfit", "--input", str(path)]) == 3
    assert main(["solve", "--grid", "33,33,4", "--bmax", "9"]) == 3
    assert main(["solve", "--grid", "33,x"]) == 2
