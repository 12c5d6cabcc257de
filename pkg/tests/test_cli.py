import json
import os

import numpy as np
import pytest
import yaml

from robustlab import cli
from robustlab.config import ConfigError, load_config


def write_config(tmp_path, overrides=None, name="run.yaml"):
    cfg = {
        "seed": 0,
        "dataset": {"kind": "synthetic", "n_per_class": 12, "image_size": 16},
        "split": {"kind": "kfold", "k": 3, "fold": 0},
        "model": {"pooling": "maxpool", "classes": 2, "dtype": "float64"},
        "train": {"defense": "standard", "epochs": 2, "batch_size": 8,
                  "learning_rate": 0.003, "trajectory_steps": 4,
                  "beta": [0.6, 0.4]},
        "attacks": [
            {"kind": "fgsm", "epsilon": 0.0196},
            {"kind": "pgd", "epsilon": 0.0196, "steps": 3, "step_size": 0.01},
        ],
        "eval": {"formats": ["csv", "json"]},
    }
    if overrides:
        for key, value in overrides.items():
            if value is None:
                cfg.pop(key, None)
            elif isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update({k: v for k, v in value.items() if v is not None})
                for k, v in value.items():
                    if v is None:
                        cfg[key].pop(k, None)
            else:
                cfg[key] = value
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestConfigValidation:
    def test_unknown_top_level_key(self, tmp_path):
        path = write_config(tmp_path, {"bogus_section": {"x": 1}})
        with pytest.raises(ConfigError, match="bogus_section"):
            load_config(path)

    def test_unknown_nested_key(self, tmp_path):
        path = write_config(tmp_path, {"train": {"warmup": 5}})
        with pytest.raises(ConfigError, match="train"):
            load_config(path)

    def test_bad_defense_name(self, tmp_path):
        path = write_config(tmp_path, {"train": {"defense": "magic"}})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_manifest_path(self, tmp_path):
        path = write_config(tmp_path, {"dataset": {"kind": "folder",
                                                   "manifest": "nope.csv",
                                                   "n_per_class": None,
                                                   "image_size": None}})
        with pytest.raises(ConfigError, match="manifest"):
            load_config(path)

    def test_bad_epsilon(self, tmp_path):
        path = write_config(tmp_path, {"attacks": [{"kind": "pgd", "epsilon": -1}]})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_seed_override(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(path, seed_override=99)
        assert cfg.seed == 99 and cfg.train.seed == 99

    def test_fingerprint_stable_under_seed(self, tmp_path):
        a = load_config(write_config(tmp_path, name="a.yaml"))
        b = load_config(write_config(tmp_path, {"seed": 5}, name="b.yaml"))
        assert a.fingerprint() == b.fingerprint()
        assert a.run_dir("out") != b.run_dir("out")


class TestCliExitCodes:
    def test_invalid_config_exits_2(self, tmp_path, capsys):
        path = write_config(tmp_path, {"train": {"defense": "magic"}})
        code = cli.main(["train", "--config", str(path), "--out", str(tmp_path)])
        assert code == 2
        assert "defense" in capsys.readouterr().err

    def test_missing_pretrain_section_exits_2(self, tmp_path, capsys):
        path = write_config(tmp_path)
        code = cli.main(["pretrain", "--config", str(path), "--out", str(tmp_path)])
        assert code == 2
        assert "pretrain" in capsys.readouterr().err

    def test_evaluate_without_checkpoints_exits_2(self, tmp_path):
        path = write_config(tmp_path)
        code = cli.main(["evaluate", "--config", str(path), "--out", str(tmp_path)])
        assert code == 2


class TestCliPipeline:
    def test_train_evaluate_residuals(self, tmp_path):
        path = write_config(tmp_path)
        out = str(tmp_path / "runs")
        assert cli.main(["train", "--config", str(path), "--out", out]) == 0

        cfg = load_config(path)
        run_dir = cfg.run_dir(out)
        cell = os.path.join(run_dir, "standard-maxpool")
        assert os.path.exists(os.path.join(cell, "fold0.ckpt"))
        assert os.path.exists(os.path.join(cell, "fold0-history.csv"))
        assert os.path.exists(os.path.join(cell, "fold0-timing.log"))

        assert cli.main(["evaluate", "--config", str(path), "--out", out]) == 0
        metrics_csv = os.path.join(run_dir, "metrics.csv")
        metrics_json = os.path.join(run_dir, "metrics.json")
        assert os.path.exists(metrics_csv) and os.path.exists(metrics_json)
        blob = json.loads(open(metrics_json).read())
        assert set(blob["results"]["standard"]) == {"none", "fgsm", "pgd"}

    def test_rerun_byte_identical(self, tmp_path):
        path = write_config(tmp_path)
        out = str(tmp_path / "runs")
        assert cli.main(["train", "--config", str(path), "--out", out]) == 0
        assert cli.main(["evaluate", "--config", str(path), "--out", out]) == 0
        cfg = load_config(path)
        run_dir = cfg.run_dir(out)
        first = {}
        for name in ("metrics.csv", "metrics.json",
                     "standard-maxpool/fold0.ckpt",
                     "standard-maxpool/fold0-history.csv"):
            first[name] = open(os.path.join(run_dir, name), "rb").read()
        assert cli.main(["train", "--config", str(path), "--out", out]) == 0
        assert cli.main(["evaluate", "--config", str(path), "--out", out]) == 0
        for name, blob in first.items():
            assert open(os.path.join(run_dir, name), "rb").read() == blob, name

    def test_residuals_command(self, tmp_path):
        ids = [f"syn-0-{i:05d}" for i in range(2)]
        path = write_config(tmp_path, {"residuals": {"layer": "pool1",
                                                     "sample_ids": ids}})
        out = str(tmp_path / "runs")
        assert cli.main(["train", "--config", str(path), "--out", out]) == 0
        assert cli.main(["residuals", "--config", str(path), "--out", out]) == 0
        cfg = load_config(path)
        res_dir = os.path.join(cfg.run_dir(out), "residuals")
        pngs = [f for f in os.listdir(res_dir) if f.endswith(".png")]
        # one map per id per attack
        assert len(pngs) == 2 * 2

    def test_residuals_unknown_id_exits_2(self, tmp_path):
        path = write_config(tmp_path, {"residuals": {"layer": "pool1",
                                                     "sample_ids": ["nope"]}})
        out = str(tmp_path / "runs")
        assert cli.main(["train", "--config", str(path), "--out", out]) == 0
        assert cli.main(["residuals", "--config", str(path), "--out", out]) == 2

    def test_pretrain_writes_encoder(self, tmp_path):
        path = write_config(tmp_path, {"pretrain": {"steps": 2, "batch_n": 4}})
        out = str(tmp_path / "runs")
        assert cli.main(["pretrain", "--config", str(path), "--out", out]) == 0
        cfg = load_config(path)
        ckpt = os.path.join(cfg.run_dir(out), "encoder.ckpt")
        assert os.path.exists(ckpt)
        from robustlab import nn
        enc = nn.load_checkpoint(ckpt)
        assert enc.metadata["provenance"] == "pretrained: contrastive"

    def test_matrix_trains_all_cells(self, tmp_path):
        path = write_config(tmp_path, {
            "matrix": {"defenses": ["standard", "at"], "pooling": ["maxpool",
                                                                   "dropmax"]},
            "train": {"epochs": 1},
        })
        out = str(tmp_path / "runs")
        assert cli.main(["train", "--config", str(path), "--out", out]) == 0
        cfg = load_config(path)
        run_dir = cfg.run_dir(out)
        for cell in ("standard-maxpool", "standard-dropmax", "at-maxpool",
                     "at-dropmax"):
            assert os.path.exists(os.path.join(run_dir, cell, "fold0.ckpt")), cell

    def test_out_env_var(self, tmp_path, monkeypatch):
        path = write_config(tmp_path)
        env_out = str(tmp_path / "env-runs")
        monkeypatch.setenv(cli.OUT_ROOT_ENV, env_out)
        assert cli.main(["train", "--config", str(path)]) == 0
        assert os.path.isdir(env_out)
