import json

import pandas as pd
import pytest

from wms3m import config as rc
from wms3m.cli import main
from wms3m.errors import ConfigError, MissingArtifactError

TINY = {
    "seed": 1,
    "data": {"window": 8, "synthetic": {"T": 400}},
    "model": {"d_model": 8, "n_layers": 1, "state_size": 4, "n_components": 2, "d_latent": 4},
    "train": {"max_epochs": 5, "patience": 10, "batch_size": 64},
    "plan": {"horizon": 3, "population": 16, "iterations": 2},
    "bench": {"lengths": [8, 16], "repeats": 2, "warmup": 1, "batch": 4},
}


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "cfg.json", TINY)
    assert main(["train", "-c", str(cfg), "--out", str(root / "run"), "--quiet"]) == 0
    return root / "run"


def test_toml_and_json_agree(tmp_path):
    (tmp_path / "a.toml").write_text('seed = 4\n[data]\nwindow = 12\n[train]\nmax_epochs = 7\n')
    write_cfg(tmp_path / "a.json", {"seed": 4, "data": {"window": 12}, "train": {"max_epochs": 7}})
    a, b = rc.load(tmp_path / "a.toml"), rc.load(tmp_path / "a.json")
    assert a == b
    assert a["train"]["seed"] == 4 and a["data"]["synthetic"]["seed"] == 4 and a["train"]["lr"] == 2e-3


def test_overrides_and_unknown_keys(tmp_path):
    cfg = rc.load(None, ["train.lr=0.01", "plan.weights={\"PRB\": 0.5}", "data.source=synthetic"])
    assert cfg["train"]["lr"] == 0.01 and cfg["plan"]["weights"]["PRB"] == 0.5
    with pytest.raises(ConfigError):
        rc.load(None, ["train.bogus=1"])
    with pytest.raises(ConfigError):
        rc.load(None, ["nonsense"])
    with pytest.raises(MissingArtifactError):
        rc.load(tmp_path / "none.toml")


def test_resolved_config_is_a_fixed_point():
    cfg = rc.load(None)
    assert rc.resolve(json.loads(rc.dumps(cfg))) == cfg


def test_train_writes_artifacts(run_dir):
    log = [json.loads(line) for line in (run_dir / "training_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2, 3, 4, 5]
    for name in ("checkpoint.json", "scaler.json", "resolved_config.json", "manifest.json"):
        assert (run_dir / name).exists()
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert set(manifest["outputs"]) >= {"checkpoint.json", "scaler.json", "training_log.jsonl"}


def test_rerun_from_resolved_config_is_identical(run_dir, tmp_path):
    assert main(["train", "-c", str(run_dir / "resolved_config.json"), "--out", str(tmp_path / "r2"),
                 "--quiet"]) == 0
    a = json.loads((run_dir / "manifest.json").read_text())
    b = json.loads((tmp_path / "r2" / "manifest.json").read_text())
    assert a["outputs"]["checkpoint.json"] == b["outputs"]["checkpoint.json"]


def test_invalid_schema_exit_2(tmp_path, capsys):
    csv = tmp_path / "t.csv"
    pd.DataFrame({"ts": [0, 1, 2], "rsrp": [1.0, 2.0, 3.0]}).to_csv(csv, index=False)
    cfg = write_cfg(tmp_path / "c.json", {"data": {"source": "csv", "path": str(csv),
                                                   "schema": {"timestamp": "ts", "target": "rsrp",
                                                              "action": "prb"}}})
    assert main(["ingest", "-c", str(cfg)]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "prb" in err["message"] and err["exit_code"] == 2


def test_missing_checkpoint_exit_3(tmp_path):
    assert main(["predict", "--run", str(tmp_path / "nothing")]) == 3
    assert main(["bench", "--run", str(tmp_path / "nothing")]) == 3


def test_stale_scaler_exit_4(run_dir, tmp_path):
    import shutil
    stale = tmp_path / "stale"
    shutil.copytree(run_dir, stale)
    doc = json.loads((stale / "scaler.json").read_text())
    doc["scaler"]["mean"][0] += 1.0
    (stale / "scaler.json").write_text(json.dumps(doc))
    assert main(["predict", "--run", str(stale)]) == 4


def test_predict_json(run_dir, capsys):
    capsys.readouterr()
    assert main(["predict", "--run", str(run_dir)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert {"mean", "aleatoric", "epistemic", "interval", "variance"} <= set(doc)
    assert doc["samples_used"] == 8


def test_evaluate_outputs(run_dir, tmp_path):
    assert main(["evaluate", "--run", str(run_dir), "--out", str(tmp_path)]) == 0
    df = pd.read_csv(tmp_path / "predictions.csv")
    assert list(df.columns) == ["timestamp", "feature", "truth", "prediction", "lower", "upper"]
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["rmse"] >= 0 and (tmp_path / "forecast.png").exists()


def test_plan_defaults_report_k(run_dir, tmp_path):
    out = tmp_path / "plan.json"
    assert main(["plan", "--run", str(run_dir), "--population", "256", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["K"] == 25 and len(doc["history"]) == 2


def test_whatif_outputs(run_dir, tmp_path):
    assert main(["whatif", "--run", str(run_dir), "--out", str(tmp_path)]) == 0
    summary = pd.read_csv(tmp_path / "whatif_summary.csv")
    steps = pd.read_csv(tmp_path / "whatif_steps.csv")
    assert len(summary) == 5 and len(steps) == 5 * 3
    assert {"scenario", "reward", "avg_rsrp", "avg_sinr", "avg_bler"} <= set(summary.columns)
    assert (tmp_path / "whatif.png").exists()


def test_bench_outputs(run_dir, tmp_path):
    assert main(["bench", "--run", str(run_dir), "--out", str(tmp_path), "--dump-taps"]) == 0
    doc = json.loads((tmp_path / "bench.json").read_text())
    assert doc["reference_parameter_count"] == 477_802
    assert doc["reference_parameter_delta"] == doc["n_parameters_reference_config"] - 477_802
    assert [r["L"] for r in doc["sweep"]] == [8, 16]
    for name in ("latency.png", "latency.csv", "taps.csv"):
        assert (tmp_path / name).exists()
    assert main(["bench", "--run", str(run_dir), "--out", str(tmp_path / "b2")]) == 0
    assert json.loads((tmp_path / "b2" / "bench.json").read_text())["n_parameters"] == doc["n_parameters"]


def test_synth_and_ingest(tmp_path, capsys):
    csv = tmp_path / "trace.csv"
    assert main(["synth", "--T", "300", "--seed", "2", "--out", str(csv)]) == 0
    cfg = write_cfg(tmp_path / "c.json", {"data": {"source": "csv", "path": str(csv),
                                                   "schema": {"timestamp": "ts", "target": "rsrp",
                                                              "action": "prb"}}})
    capsys.readouterr()
    assert main(["ingest", "-c", str(cfg), "--out", str(tmp_path / "ing")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["T"] == 300 and (tmp_path / "ing" / "scaler.json").exists()


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("WMS3M_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = write_cfg(tmp_path / "c.json", {**TINY, "train": {"max_epochs": 1}})
    assert main(["train", "-c", str(cfg), "--quiet"]) == 0
    assert (tmp_path / "root" / "train" / "checkpoint.json").exists()
