import json

import numpy as np
import pytest

from cltm.cli import main
from cltm.potentials import TrainConfig, init_cltm, load_model
from cltm.data import ingest
from cltm.structure import load_tree

SMALL = {"synth": {"n": 400}, "kernel": {"query_subsample": 100},
         "train": {"epochs": 2, "depth": 2, "hidden_widths": [8], "dropout_rate": 0.0}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    return code, json.loads(out[0])


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return path


def pipeline(capsys, cfg, root):
    data = root / "data" / "manifest.json"
    steps = [
        ("synth", "--out-dir", root / "data"),
        ("distances", "--data", data, "--out-dir", root / "dist"),
        ("structure", "--distances", root / "dist" / "distances.csv", "--out-dir", root / "tree"),
        ("train", "--data", data, "--tree", root / "tree" / "tree.json", "--out-dir", root / "model"),
        ("train", "--kind", "baseline", "--data", data, "--out-dir", root / "model"),
        ("infer", "--model", root / "model" / "model.json", "--data", data, "--out-dir", root / "infer"),
        ("eval", "--model", root / "model" / "model.json", "--data", data, "--out-dir", root / "eval"),
        ("eval", "--model", root / "model" / "baseline.json", "--data", data, "--out-dir", root / "eval-base"),
        ("scene", "--model", root / "model" / "model.json", "--data", data, "--out-dir", root / "scene"),
    ]
    summaries = []
    for step in steps:
        code, summary = run(capsys, *step, "--config", cfg, "--seed", 5)
        assert code == 0, summary
        assert summary["ok"] and summary["command"] == step[0]
        summaries.append(summary)
    return summaries


def test_full_pipeline_outputs(tmp_path, capsys, cfg):
    summaries = pipeline(capsys, cfg, tmp_path / "run")
    root = tmp_path / "run"
    tree = load_tree(root / "tree" / "tree.json")
    header = (root / "infer" / "marginals.csv").read_text().splitlines()[0]
    assert header.split(",") == tree.node_names
    metrics = json.loads((root / "eval" / "metrics.json").read_text())
    assert metrics["decision"] == "map" and metrics["config"]["seed"] == 5
    cluster = json.loads((root / "scene" / "cluster.json").read_text())
    assert cluster["k"] == 3 and 0 <= cluster["misclassification"] <= 1
    truth = json.loads((root / "data" / "truth.json").read_text())
    assert len(truth["clusters"]) == 400 and len(truth["hidden"][0]) == 2
    assert summaries[0]["train"] + summaries[0]["validation"] == 400


def test_reruns_are_byte_identical(tmp_path, capsys, cfg):
    pipeline(capsys, cfg, tmp_path / "a")
    pipeline(capsys, cfg, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 20
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_structure_on_two_labels(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("0.0,0.7\n0.7,0.0\n")
    (tmp_path / "d.json").write_text(json.dumps({"labels": ["a", "b"]}))
    code, summary = run(capsys, "structure", "--distances", tmp_path / "d.csv", "--out-dir", tmp_path)
    assert code == 0 and summary["latent_count"] == 0 and summary["edges"] == 1


def test_zero_epochs_writes_initialization(tmp_path, capsys, cfg):
    root = tmp_path / "run"
    run(capsys, "synth", "--config", cfg, "--out-dir", root)
    (root / "tree.json").write_text(json.dumps({"observed": [f"y{i}" for i in range(8)], "latent": [],
                                                "edges": [[f"y{i}", f"y{i + 1}"] for i in range(7)]}))
    zero_cfg = tmp_path / "zero.json"
    zero_cfg.write_text(json.dumps({**SMALL, "train": {**SMALL["train"], "epochs": 0}}))
    code, _ = run(capsys, "train", "--config", zero_cfg, "--data", root / "manifest.json",
                  "--tree", root / "tree.json", "--out-dir", root)
    assert code == 0
    from cltm import config
    c = config.load(zero_cfg)
    tc = config.train_config(c, "train-cltm")
    data = ingest(root / "manifest.json").part("train")
    fresh = init_cltm(load_tree(root / "tree.json"), data.features, tc, np.random.default_rng(tc.seed))
    assert load_model(root / "model.json").to_dict() == fresh.to_dict()


def test_errors_are_json_with_nonzero_exit(tmp_path, capsys):
    code, summary = run(capsys, "structure", "--distances", tmp_path / "missing.csv", "--out-dir", tmp_path)
    assert code == 1 and summary["ok"] is False and summary["error"] == "FileNotFoundError"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"kernel": {"sigma": 1}}))
    code, summary = run(capsys, "synth", "--config", bad, "--out-dir", tmp_path)
    assert code == 1 and "sigma" in summary["message"]
    code, summary = run(capsys, "train", "--data", tmp_path / "m.json", "--out-dir", tmp_path)
    assert code != 0 and summary["ok"] is False
