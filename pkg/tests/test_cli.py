import json

import pytest

from rograd.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


def test_pipeline_end_to_end(tmp_path, capsys):
    data, att, gen, enr, rep = (tmp_path / d for d in ("data", "att", "gen.jsonl", "enr", "r2cl"))
    assert run(capsys, "synthetic", "--out", data, "--nodes", 60)[0] == 0
    assert (data / "vocab.json").exists()

    code, out = run(capsys, "attack", "--graph", data, "--out", att, "--nra", 0.5, "--labeled-ratio", 0.4)
    info = json.loads(out)
    assert code == 0 and info["intensity"] == 0.83 and info["nodes_removed"] == 18
    assert (att / "provenance.csv").exists() and (att / "vocab.json").exists()

    code, out = run(capsys, "generate", "--graph", att, "--out", gen, "--per-class", 2)
    assert code == 0 and json.loads(out)["samples"] == 4

    code, out = run(capsys, "enrich", "--graph", att, "--samples", gen, "--out", enr)
    assert code == 0 and json.loads(out)["nodes_added"] == 4

    code, out = run(capsys, "train-r2cl", "--graph", enr, "--out", rep, "--epochs", 4, "--period", 2, "--anchors", 2)
    assert code == 0 and json.loads(out)["refinements"] == 2
    assert (rep / "r2cl_log.csv").exists() and (rep / "projections.npy").exists()

    code, out = run(capsys, "classify", "--graph", rep, "--epochs", 10, "--backbone", "sage")
    assert code == 0 and 0 <= json.loads(out)["test_acc"] <= 100


def test_grid_and_report(tmp_path, capsys):
    spec = {"synthetic": {"n_nodes": 40}, "nra": [0.0, 0.5], "sha": [0.0], "fda": [0.0], "labeled": [0.6, 0.2],
            "backbone": {"hidden": 8, "max_epochs": 5}}
    (tmp_path / "grid.json").write_text(json.dumps(spec))
    code, out = run(capsys, "grid", "--grid", tmp_path / "grid.json", "--out", tmp_path / "g")
    assert code == 0 and out.startswith("vanilla/compound")
    code, out = run(capsys, "report", "--results", tmp_path / "g" / "results.csv", "--out", tmp_path / "r")
    assert code == 0 and "vanilla/compound" in json.loads(out)
    assert (tmp_path / "r" / "curve_vanilla.csv").exists()


def test_config_file_sets_defaults(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"out": str(tmp_path / "d"), "nodes": 30, "classes": 3}))
    assert run(capsys, "--config", tmp_path / "cfg.json", "synthetic")[0] == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["num_classes"] == 3


def test_argument_errors(tmp_path, capsys):
    with pytest.raises(SystemExit):
        main(["attack", "--out", str(tmp_path)])
    (tmp_path / "cfg.json").write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit):
        main(["--config", str(tmp_path / "cfg.json"), "synthetic", "--out", str(tmp_path)])
