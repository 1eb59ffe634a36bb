import json
import os

import pytest

from smjls.cli import main


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = {
        "model": {"preset": "maglev"},
        "grid_sizes": [5],
        "mc_runs": 30,
        "clvq_iters": 20_000,
        "distortion_samples": 2_000,
        "out_dir": "out",
        "seed": 7,
    }
    with open("cfg.json", "w") as fh:
        json.dump(cfg, fh)
    return tmp_path


def test_missing_config_no_partial_output(workdir):
    rc = main(["quantize", "--config", "missing.json"])
    assert rc != 0
    assert not os.path.exists("out")


def test_stage_order_enforced(workdir, capsys):
    rc = main(["precompute", "--config", "cfg.json"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "grid_mode0_nu5.json" in err and "quantize" in err

    rc = main(["compare", "--config", "cfg.json"])
    assert rc == 2


def test_full_pipeline(workdir):
    assert main(["quantize", "--config", "cfg.json"]) == 0
    assert main(["precompute", "--config", "cfg.json"]) == 0
    assert main(["simulate", "--config", "cfg.json"]) == 0
    assert main(["compare", "--config", "cfg.json"]) == 0
    assert main(["curves", "--config", "cfg.json"]) == 0
    assert main(["validate", "--config", "cfg.json"]) == 0
    assert main(["tree-info", "out/trees/tree_nu5_T0.02.npz"]) == 0
    expected = [
        "out/grids/grid_mode0_nu5.json",
        "out/grids/grid_mode1_nu5.json",
        "out/trees/tree_nu5_T0.02.npz",
        "out/tables/table1.csv",
        "out/tables/table1.png",
        "out/tables/table2.csv",
        "out/tables/table2.png",
        "out/tables/table34.csv",
        "out/tables/table34.png",
        "out/curves/riccati_error.csv",
        "out/curves/riccati_error.png",
        "out/curves/filter_error.csv",
        "out/curves/filter_error.png",
        "out/runs/run0_kbf.csv",
        "out/runs/run0_quantized.csv",
        "out/runs/run0_lmmse.csv",
        "out/runs/run0_selection.csv",
        "out/validation.txt",
        "out/manifest_compare.json",
    ]
    for path in expected:
        assert os.path.exists(path), path
    header = open("out/runs/run0_kbf.csv").readline().strip()
    assert header == "t,x_true_0,x_true_1,x_true_2,x_hat_0,x_hat_1,x_hat_2,P_norm,K_norm"
    sel_header = open("out/runs/run0_selection.csv").readline().strip()
    assert sel_header == "k,T_k,T_tilde_k,S_tilde_k,S_hat_k,node_id"
    t34 = open("out/tables/table34.csv").read()
    assert t34.startswith("horizon,nu,")
    assert t34.endswith("\n")


def test_idempotent_outputs(workdir):
    assert main(["quantize", "--config", "cfg.json"]) == 0
    first_grid = open("out/grids/grid_mode0_nu5.json").read()
    first_table = open("out/tables/table1.csv").read()
    assert main(["quantize", "--config", "cfg.json"]) == 0
    assert open("out/grids/grid_mode0_nu5.json").read() == first_grid
    assert open("out/tables/table1.csv").read() == first_table


def test_tampered_grid_refused(workdir, capsys):
    assert main(["quantize", "--config", "cfg.json"]) == 0
    path = "out/grids/grid_mode0_nu5.json"
    doc = json.load(open(path))
    doc["payload"]["points"][0] = repr(0.42)
    json.dump(doc, open(path, "w"))
    rc = main(["precompute", "--config", "cfg.json"])
    assert rc == 1
    assert "checksum" in capsys.readouterr().err


def test_single_run_se_flagged(workdir):
    assert main(["quantize", "--config", "cfg.json"]) == 0
    assert main(["precompute", "--config", "cfg.json"]) == 0
    assert main(["compare", "--config", "cfg.json", "--set", "mc_runs=1"]) == 0
    rows = open("out/tables/table34.csv").read().splitlines()
    header = rows[0].split(",")
    row = rows[1].split(",")
    assert row[header.index("kbf_se")] == "nan"
    assert row[header.index("se_undefined")] == "True"


def test_unknown_config_key_rejected(workdir, capsys):
    with open("bad.json", "w") as fh:
        json.dump({"grid_sizes": [4], "wat": 1}, fh)
    rc = main(["quantize", "--config", "bad.json"])
    assert rc == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_seed_and_out_overrides(workdir):
    assert main(["quantize", "--config", "cfg.json", "--out", "alt", "--seed", "9"]) == 0
    assert os.path.exists("alt/grids/grid_mode0_nu5.json")
    manifest = json.load(open("alt/manifest_quantize.json"))
    assert manifest["config"]["seed"] == 9


def test_invalid_model_rejected(workdir, capsys):
    cfg = json.load(open("cfg.json"))
    cfg["model"] = {
        "modes": [
            {"A": [[0.0]], "C": [[1.0]], "D": [[0.0]], "E": [[1.0]]},
        ],
        "embedded": [[0.0]],
        "sojourns": [{"kind": "exponential", "rate": 1.0}],
        "init_mode_dist": [1.0],
        "x0_mean": [0.0],
        "x0_cov": [[1.0]],
    }
    json.dump(cfg, open("bad_model.json", "w"))
    rc = main(["quantize", "--config", "bad_model.json"])
    assert rc == 2
    assert "singular" in capsys.readouterr().err
