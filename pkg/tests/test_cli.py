import json
import os

import numpy as np
import pandas as pd
import pytest

import train.local_update as local_update_module
from conftest import CONFIGS_DIR
from Models.errors import DivergenceError
from automatika import config as settings
from automatika.artifacts import sha256_file
from automatika.run_pipeline import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, EXIT_RUNTIME, run

SHIPPED = ["ton_iot.json", "x_iiotid.json", "idsiot2024.json", "synthetic_small.json"]

def _small_config(**overrides):
    cfg = {
        "dataset": {
            "source": "synthetic",
            "synthetic": {"classes": 3, "features": 8, "per_class_counts": [40, 30, 30], "separation": 3.0},
        },
        "split": {"train_fraction": 0.8},
        "partition": {"mode": "quantity", "alpha": 1000000},
        "clients": 3,
        "arch": {"conv": [{"out_channels": 2, "kernel_size": 3}, {"out_channels": 3, "kernel_size": 2}], "hidden": [4]},
        "federation": {"algorithm": "fedprox", "local_epochs": 1, "rounds": 2, "rho": 0.5, "batch_size": 16},
        "sweep": [0.0, 0.5],
        "score": {"acc_unp": 0.95, "alpha2": 400},
        "seed": 3,
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    return cfg

def _write_config(tmp_path, cfg, name="experiment.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)

# ================== VALIDATE ==================

@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_are_valid(name):
    assert run(["validate", "--config", os.path.join(CONFIGS_DIR, name)]) == EXIT_OK

def test_ton_iot_class_ids_follow_published_numbering():
    cfg = settings.load_config(os.path.join(CONFIGS_DIR, "ton_iot.json"))
    names = cfg.dataset.synthetic.class_names
    assert names[0] == "backdoor"
    assert names[5] == "normal"
    assert names[9] == "xss"
    assert cfg.dataset.synthetic.per_class_counts[5] == max(cfg.dataset.synthetic.per_class_counts)

def test_validate_reports_field_violations(tmp_path, capsys):
    path = _write_config(tmp_path, _small_config(federation={"algorithm": "fedavg", "mu": 0.1}))
    assert run(["validate", "--config", path]) == EXIT_CONFIG
    assert "fedavg requires mu = 0" in capsys.readouterr().out

    path = _write_config(tmp_path, _small_config(federation={"mu": -1.0}), name="neg.json")
    assert run(["validate", "--config", path]) == EXIT_CONFIG
    assert "federation.mu: mu must be ≥ 0" in capsys.readouterr().out

def test_validate_collects_cross_field_violations(tmp_path, capsys):
    cfg = _small_config(federation={"rho": [0.1, 0.2]}, sweep=[0.0, 1.2])
    assert run(["validate", "--config", _write_config(tmp_path, cfg)]) == EXIT_CONFIG
    out = capsys.readouterr().out
    assert "federation.rho" in out
    assert "sweep.1" in out

def test_algorithm_flag_drops_foreign_mu(tmp_path):
    path = _write_config(tmp_path, _small_config(federation={"mu": 0.01}))
    assert run(["validate", "--config", path, "--algorithm", "fedavg"]) == EXIT_OK

def test_json_parse_error_has_location(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "clients": 3,\n  "seed": }\n', encoding="utf-8")
    assert run(["validate", "--config", str(path)]) == EXIT_CONFIG
    assert f"{path}:3:" in capsys.readouterr().out

def test_missing_config_is_input_error(tmp_path):
    assert run(["train", "--config", str(tmp_path / "absent.json")]) == EXIT_INPUT

# ================== COST / OPTIMIZE ==================

def test_cost_for_ton_iot_architecture(tmp_path, capsys):
    out = tmp_path / "cost"
    assert run(["cost", "--config", os.path.join(CONFIGS_DIR, "ton_iot.json"), "--out", str(out)]) == EXIT_OK
    payload = json.loads((out / "cost.json").read_text(encoding="utf-8"))
    assert payload["energy_pj"] == pytest.approx(3171152.4, abs=2.0)
    assert payload["FLOPs"] == 1378560
    assert payload["published_discrepancy"]["flops"] == 0
    assert '"energy_pj"' in capsys.readouterr().out

def test_cost_with_pruning_ratio(tmp_path):
    out = tmp_path / "cost"
    base_cfg = os.path.join(CONFIGS_DIR, "ton_iot.json")
    assert run(["cost", "--config", base_cfg, "--out", str(out / "a")]) == EXIT_OK
    assert run(["cost", "--config", base_cfg, "--out", str(out / "b"), "--rho", "0.5"]) == EXIT_OK
    full = json.loads((out / "a" / "cost.json").read_text(encoding="utf-8"))
    half = json.loads((out / "b" / "cost.json").read_text(encoding="utf-8"))
    assert half["energy_pj"] == pytest.approx(full["energy_pj"] / 2)
    assert half["rho"] == 0.5

def test_optimize_rho_for_ton_iot(tmp_path):
    out = tmp_path / "opt"
    assert run(["optimize-rho", "--config", os.path.join(CONFIGS_DIR, "ton_iot.json"), "--out", str(out)]) == EXIT_OK
    solution = json.loads((out / "rho_solution.json").read_text(encoding="utf-8"))
    assert solution["feasible"] is True
    assert np.mean(solution["rho"]) == pytest.approx(0.6575, abs=0.03)
    assert solution["score"] == pytest.approx(0.9699, abs=0.005)
    curve = pd.read_csv(out / "score_curve.csv")
    assert len(curve) == 1000

def test_optimize_rho_derives_energy_from_arch(tmp_path):
    out = tmp_path / "opt"
    path = _write_config(tmp_path, _small_config(score={"acc_unp": 0.95, "alpha2": 400, "mode": "coordinate"}))
    assert run(["optimize-rho", "--config", path, "--out", str(out)]) == EXIT_OK
    solution = json.loads((out / "rho_solution.json").read_text(encoding="utf-8"))
    assert solution["mode"] == "coordinate"
    assert len(solution["rho"]) == 3

# ================== PARTITION / TRAIN / SWEEP ==================

def test_partition_outputs(tmp_path):
    out = tmp_path / "part"
    path = _write_config(tmp_path, _small_config(partition={"mode": "label", "alpha": 10}))
    assert run(["partition", "--config", path, "--out", str(out)]) == EXIT_OK
    heat = pd.read_csv(out / "partition_heatmap.csv")
    assert list(heat.columns) == ["client", "class_0", "class_1", "class_2"]
    assert len(heat) == 3
    clients = pd.read_csv(out / "partition_clients.csv")
    assert clients["samples"].sum() == heat[["class_0", "class_1", "class_2"]].to_numpy().sum()

def test_csv_source_with_label_flag(tmp_path):
    rng = np.random.default_rng(0)
    df = pd.DataFrame(rng.standard_normal((60, 8)), columns=[f"f{i}" for i in range(8)])
    df["attack_cat"] = np.where(np.arange(60) % 3 == 0, "dos", "normal")
    csv_path = tmp_path / "flows.csv"
    df.to_csv(csv_path, index=False)

    cfg = _small_config(
        dataset={"source": "csv", "path": str(csv_path), "label_column": "wrong"},
        score={"acc_unp": 0.95, "alpha2": 400, "e_unp": 100000.0},
    )
    cfg["dataset"].pop("synthetic")
    path = _write_config(tmp_path, cfg)
    out = tmp_path / "csv_run"
    assert run(["partition", "--config", path, "--out", str(out), "--label-col", "attack_cat"]) == EXIT_OK
    heat = pd.read_csv(out / "partition_heatmap.csv")
    assert list(heat.columns) == ["client", "dos", "normal"]
    assert run(["partition", "--config", path, "--out", str(out)]) == EXIT_INPUT

def test_prune_sweep_writes_one_file_per_rho(tmp_path):
    out = tmp_path / "sweep"
    path = _write_config(tmp_path, _small_config())
    assert run(["prune-sweep", "--config", path, "--out", str(out), "--rho", "0,0.3,0.5,0.7,0.9"]) == EXIT_OK
    files = sorted(p.name for p in out.glob("metrics_rho_*.csv"))
    assert files == [f"metrics_rho_{r:.4f}.csv" for r in (0.0, 0.3, 0.5, 0.7, 0.9)]
    for name in files:
        assert len(pd.read_csv(out / name)) == 2
    summary = pd.read_csv(out / "sweep_summary.csv")
    assert summary["rho"].tolist() == [0.0, 0.3, 0.5, 0.7, 0.9]
    assert summary["energy_pj"].is_monotonic_decreasing

def test_train_is_byte_identical_on_rerun(tmp_path):
    path = _write_config(tmp_path, _small_config())
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train", "--config", path, "--out", str(a)]) == EXIT_OK
    assert run(["train", "--config", path, "--out", str(b)]) == EXIT_OK

    for name in ("client_losses.csv", "confusion_final.csv", "partition_heatmap.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    metrics_a = pd.read_csv(a / "metrics.csv").drop(columns=["seconds"])
    metrics_b = pd.read_csv(b / "metrics.csv").drop(columns=["seconds"])
    pd.testing.assert_frame_equal(metrics_a, metrics_b)
    masks = sorted(p.name for p in (a / "masks").iterdir())
    assert masks == ["client_000.pmsk", "client_001.pmsk", "client_002.pmsk"]
    assert all((a / "masks" / m).read_bytes() == (b / "masks" / m).read_bytes() for m in masks)

def test_manifest_lists_every_artifact(tmp_path):
    out = tmp_path / "run"
    path = _write_config(tmp_path, _small_config())
    assert run(["train", "--config", path, "--out", str(out), "--seed", "11"]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "train"
    assert manifest["seed"] == 11
    assert len(manifest["config_sha256"]) == 64
    assert "metrics.csv" in manifest["files"]
    for name, digest in manifest["files"].items():
        assert sha256_file(str(out / name)) == digest
    assert {"numpy", "torch", "pandas"} <= set(manifest["versions"])

def test_divergence_exit_code(tmp_path, monkeypatch, capsys):
    def broken(model, batch, labels, prox=None):
        raise DivergenceError("loss is nan")

    monkeypatch.setattr(local_update_module, "loss_and_grads", broken)
    path = _write_config(tmp_path, _small_config())
    assert run(["train", "--config", path, "--out", str(tmp_path / "div")]) == EXIT_RUNTIME
    assert "раунд 0" in capsys.readouterr().out

# ================== ПЕРЕОПРЕДЕЛЕНИЯ ==================

def test_rho_flag_routes_to_sweep_or_clients():
    raw = _small_config()
    swept = settings.apply_overrides(raw, {"rho": [0.0, 0.5]})
    assert swept["sweep"] == [0.0, 0.5]
    assert swept["federation"]["rho"] == 0.5

    per_client = settings.apply_overrides(raw, {"rho": [0.1, 0.2, 0.3]})
    assert per_client["federation"]["rho"] == [0.1, 0.2, 0.3]

    single = settings.apply_overrides(raw, {"rho": [0.25], "clients": 4, "seed": 9})
    assert single["federation"]["rho"] == 0.25
    assert single["clients"] == 4 and single["seed"] == 9
    assert raw["clients"] == 3

def test_config_hash_is_stable(tmp_path):
    path = _write_config(tmp_path, _small_config())
    a = settings.config_hash(settings.load_config(path))
    b = settings.config_hash(settings.load_config(path))
    c = settings.config_hash(settings.load_config(path, {"seed": 4}))
    assert a == b
    assert a != c
