import json
import subprocess
import sys
from pathlib import Path

import pytest

from magrep.cli import main

SMALL = {
    "seed": 3,
    "terrain": {"height": 40, "width": 36, "n_anomalies": 3, "anomaly_radius": 4},
    "train": {"epochs": 1, "train_subsample": 300, "batch_size": 32},
    "patch": {"patch_size": 8},
}

STAGES = [["synth"], ["train-ae"], ["stitch"], ["experiment", "--all-cells"],
          ["classify", "--mode", "pixel"], ["classify", "--mode", "patch"], ["evaluate"]]


def run(workdir, *args, config=None):
    argv = ["--workdir", str(workdir)]
    if config is not None:
        argv += ["--config", str(config)]
    return main(argv + list(args))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    wd = tmp_path_factory.mktemp("run")
    cfg = wd / "config.json"
    cfg.write_text(json.dumps(SMALL))
    for stage in STAGES:
        assert run(wd, *stage, config=cfg) == 0, stage
    return wd, cfg


def snapshot(wd: Path) -> dict:
    return {str(p.relative_to(wd)): p.read_bytes() for p in sorted(wd.rglob("*")) if p.is_file()}


def test_pipeline_artifacts(pipeline):
    wd, _ = pipeline
    metrics = sorted(p.name for p in (wd / "metrics").glob("*.json"))
    assert metrics == ["patch_features.json", "patch_samples.json",
                       "pixel_features.json", "pixel_samples.json"]
    for name in metrics:
        m = json.loads((wd / "metrics" / name).read_text())
        assert {"mode", "representation", "kernel", "C", "seed", "fold_accuracies",
                "mean_cv_accuracy", "overall_accuracy", "f1", "confusion"} <= set(m)
        assert len(m["fold_accuracies"]) == 5
    meta = json.loads((wd / "stack" / "stack.meta.json").read_text())
    assert len(meta["maps"]) == 24 and (meta["height"], meta["width"]) == (40, 36)
    for stage_dir in ("terrain", "model", "stack", "classified", "."):
        prov = json.loads((wd / stage_dir / "provenance.json").read_text())
        assert {"config_hash", "seed", "inputs", "outputs"} <= set(prov)
    hist = (wd / "model" / "loss_history.csv").read_text().splitlines()
    assert hist[0] == "epoch,loss" and len(hist) == 2
    assert (wd / "classified" / "pixel.pgm").exists() and (wd / "classified" / "patch.raw.pgm").exists()


def test_rerun_is_byte_identical(pipeline):
    wd, cfg = pipeline
    before = snapshot(wd)
    for stage in STAGES:
        assert run(wd, *stage, config=cfg) == 0
    after = snapshot(wd)
    assert before.keys() == after.keys()
    changed = [k for k in before if before[k] != after[k]]
    assert changed == []


def test_provenance_chain(pipeline):
    wd, _ = pipeline
    prov = json.loads((wd / "stack" / "provenance.json").read_text())
    from magrep.cli import file_hash
    assert prov["inputs"]["model"]["sha256"] == file_hash(wd / "model")
    assert prov["inputs"]["image"]["sha256"] == file_hash(wd / "terrain" / "image.f32")


def test_experiment_without_stack(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    assert run(tmp_path, "synth", config=cfg) == 0
    capsys.readouterr()
    assert run(tmp_path, "experiment", config=cfg) != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "missing_artifact" and err["artifact"] == "stack"
    assert "stack" in err["message"]


@pytest.mark.parametrize("payload", ['{"terrain": {"heigth": 10}}', '{"unknown": {}}', "[1, 2]",
                                     "not json", '{"terrain": {"anomaly_radius": 0}}'])
def test_invalid_config(tmp_path, capsys, payload):
    cfg = tmp_path / "c.json"
    cfg.write_text(payload)
    assert run(tmp_path, "synth", config=cfg) != 0
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "invalid_config"


def test_missing_config_file(tmp_path, capsys):
    assert run(tmp_path, "synth", config=tmp_path / "nope.json") == 1
    assert json.loads(capsys.readouterr().err)["artifact"] == "config"


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    assert run(tmp_path, "--seed", "9", "synth", "--height", "44", config=cfg) == 0
    prov = json.loads((tmp_path / "terrain" / "provenance.json").read_text())
    assert prov["seed"] == 9 and prov["config"]["height"] == 44


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    proc = subprocess.run([sys.executable, "-m", "magrep", "--workdir", str(tmp_path),
                           "--config", str(cfg), "synth"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "terrain" in json.loads(proc.stdout)
    proc = subprocess.run([sys.executable, "-m", "magrep", "--workdir", str(tmp_path), "stitch"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr)["artifact"] == "model"
