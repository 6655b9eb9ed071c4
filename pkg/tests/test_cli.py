import csv
import json

import numpy as np
import pytest

import main
from src import cgp
from src.config import cfg
from src.models import RUNLOG_HEADER
from src.transformer import ModelConfig, init_params, save_checkpoint


@pytest.fixture(autouse=True)
def no_slack(monkeypatch):
    monkeypatch.setattr(cfg, "SLACK_BOT_TOKEN", None)


STEP = ["--clock", "step", "--step-cost", "0.001"]


def _evolve(out, *extra):
    return main.main(["evolve", "--bits", "2", "--gens", "60", "--rng", "3", "--out", str(out), *STEP, *extra])


def test_evolve_writes_outputs(tmp_path):
    assert _evolve(tmp_path / "e") == 0
    best = cgp.load(str(tmp_path / "e" / "best.chr"))
    assert best.params.bits == 2
    with open(tmp_path / "e" / "run.runlog.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == RUNLOG_HEADER
    assert rows[1][-1] == "start" and rows[-1][-1] == "end"
    manifest = json.loads((tmp_path / "e" / "manifest.json").read_text())
    assert manifest["command"] == "evolve"
    assert set(manifest["outputs"]) == {"best.chr", "run.runlog.csv"}
    assert "out" not in manifest["config"]


def test_step_clock_runs_are_byte_identical(tmp_path):
    assert _evolve(tmp_path / "a") == 0
    assert _evolve(tmp_path / "b") == 0
    for name in ("best.chr", "run.runlog.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_default_clock_reruns_are_byte_identical(tmp_path):
    argv = ["evolve", "--bits", "2", "--gens", "60", "--rng", "3"]
    assert main.main([*argv, "--out", str(tmp_path / "a")]) == 0
    assert main.main([*argv, "--out", str(tmp_path / "b")]) == 0
    for name in ("best.chr", "run.runlog.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["clock"] == "step"
    assert manifest["reproducible"] is True


def test_wall_clock_budget_is_marked_not_reproducible(tmp_path):
    assert main.main(["evolve", "--bits", "2", "--gens", "5", "--time-sec", "30", "--out", str(tmp_path / "w")]) == 0
    manifest = json.loads((tmp_path / "w" / "manifest.json").read_text())
    assert manifest["config"]["clock"] == "wall"
    assert manifest["reproducible"] is False


def test_yaml_config_and_flag_precedence(tmp_path):
    config = tmp_path / "exp.yaml"
    config.write_text("bits: 3\ngens: 5\nepsilon-pct: 10\nclock: step\n")
    assert main.main(["evolve", "--config", str(config), "--gens", "7", "--out", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["bits"] == 3
    assert manifest["config"]["gens"] == 7
    assert manifest["config"]["epsilon_pct"] == 10


@pytest.mark.parametrize("argv", [
    ["evolve", "--bits", "2", "--mode", "hybrid", "--out", "x"],
    ["evolve", "--bits", "2", "--seed-kind", "booth", "--out", "x"],
    ["evolve", "--bits", "2"],
    ["evolve", "--bits", "2", "--epsilon-pct", "0", "--out", "x"],
    ["report", "--out", "x"],
    ["batch", "--bits", "2", "--out", "x"],
])
def test_usage_errors_exit_2(tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert main.main(argv) == 2


def test_missing_dataset_exits_3(tmp_path):
    assert main.main(["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == 3


def test_report_on_empty_directory_exits_3(tmp_path):
    (tmp_path / "runs").mkdir()
    assert main.main(["report", "--runs-dir", str(tmp_path / "runs"), "--out", str(tmp_path / "r")]) == 3


def test_dataset_train_hybrid_batch_pipeline(tmp_path):
    data, model_dir = tmp_path / "data", tmp_path / "model"
    assert main.main([
        "gen-dataset", "--bits", "2", "--epsilon-pct", "10", "--runs", "2", "--gens-per-run", "40",
        "--clock", "step", "--labels", "--samples", "2", "--out", str(data),
    ]) == 0
    assert (data / "manifest.csv").exists()
    assert list((data / "labels").glob("*.sens.npy"))

    assert main.main([
        "train", "--dataset", str(data), "--epsilon-pct", "10", "--epochs", "2", "--batch", "4",
        "--d-model", "8", "--heads", "2", "--layers", "1", "--ffn-hidden", "8", "--out", str(model_dir),
    ]) == 0
    for name in ("model.npz", "loss_trace.csv", "train_manifest.csv", "manifest.json"):
        assert (model_dir / name).exists()
    inputs = json.loads((model_dir / "manifest.json").read_text())["inputs"]
    assert any(name.endswith(".L8.r0.sens.npy") for name in inputs)
    assert any(name.endswith(".chr") for name in inputs)

    model = str(model_dir / "model.npz")
    assert _evolve(tmp_path / "h", "--mode", "hybrid", "--model", model) == 0
    with open(tmp_path / "h" / "run.runlog.csv", newline="") as f:
        first = next(csv.DictReader(f))
    assert first["operator"] == "guided" and first["inferences"] == "1"

    camp = tmp_path / "camp"
    assert main.main([
        "batch", "--bits", "2", "--model", model, "--runs", "2", "--time-sec", "0.04",
        "--stag-max", "3", "--stag-max-sweep", "5", *STEP, "--out", str(camp),
    ]) == 0
    for label in ("standard", "hybrid", "hybrid-stag5"):
        assert len(list((camp / label).glob("run_*.runlog.csv"))) == 2
        assert len(list((camp / label).glob("run_*.chr"))) == 2
    for name in ("deciles.csv", "scatter.csv", "utest.csv", "manifest.json"):
        assert (camp / name).exists()

    report = tmp_path / "rep"
    assert main.main([
        "report", "--runs-dir", str(camp / "standard"), "--compare-dir", str(camp / "hybrid"),
        "--checkpoints", "0.02,0.04", "--out", str(report),
    ]) == 0
    with open(report / "utest.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [(r["baseline"], r["candidate"]) for r in rows] == [("standard", "hybrid")] * 2


def test_hybrid_with_wrong_width_model_exits_2(tmp_path):
    cfg3 = ModelConfig(n_i=6, n_c=40, d_model=8, heads=2, layers=1, ffn_hidden=8)
    path = tmp_path / "m.npz"
    save_checkpoint(str(path), cfg3, init_params(cfg3, np.random.default_rng(0)))
    assert _evolve(tmp_path / "x", "--mode", "hybrid", "--model", str(path)) == 2
