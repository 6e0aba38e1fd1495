import hashlib
import json

import numpy as np
import pytest

from corridorflow.cli import main
from corridorflow.config import ConfigError, load_config, validate_config


def tiny_config(tmp_path, **overrides):
    doc = {
        "data": {
            "families": ["min_jerk_pick_place"],
            "chunks": 60,
            "chunk_len": 10,
            "t_full": 24,
            "seed": 7,
        },
        "model": {
            "hidden_width": 16,
            "hidden_layers": 2,
            "embed_dim": 8,
            "encoder_hidden": 8,
            "head_hidden": 8,
        },
        "train": {
            "batch_size": 16,
            "steps": 4,
            "eval_every": 2,
            "seed": 11,
            "sampler_steps": 3,
            "eval_max_records": 20,
        },
        "eval": {"sampler_steps": 3, "seed": 13, "max_records": 12},
    }
    for section, fields in overrides.items():
        doc.setdefault(section, {}).update(fields)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture()
def dataset(tmp_path):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "data.jsonl"
    assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            validate_config({"train": {"steps": 1, "momentum": 0.9}})

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            validate_config({"optimizer": {}})

    def test_defaults_fully_resolved(self):
        cfg = validate_config({})
        for section in ("data", "model", "corridor", "train", "eval"):
            assert section in cfg.sections
        assert cfg["train"]["steps"] == 2000
        assert cfg["corridor"]["alpha"] == 2.0

    def test_type_checked(self):
        with pytest.raises(ConfigError, match="train.steps"):
            validate_config({"train": {"steps": "many"}})

    def test_bad_family(self):
        with pytest.raises(ConfigError, match="families"):
            validate_config({"data": {"families": ["spliny"]}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")


class TestGenData:
    def test_deterministic_output_and_count(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        out1 = tmp_path / "a.jsonl"
        out2 = tmp_path / "b.jsonl"
        assert main(["gen-data", "--config", str(cfg), "--out", str(out1)]) == 0
        count = int(capsys.readouterr().out.strip())
        assert main(["gen-data", "--config", str(cfg), "--out", str(out2)]) == 0
        assert hashlib.sha256(out1.read_bytes()).hexdigest() == \
            hashlib.sha256(out2.read_bytes()).hexdigest()
        assert count == len(out1.read_text().splitlines()) == 60

    def test_missing_seed_exit_2(self, tmp_path, capsys):
        doc = json.loads(tiny_config(tmp_path).read_text())
        del doc["data"]["seed"]
        cfg = tmp_path / "noseed.json"
        cfg.write_text(json.dumps(doc))
        code = main(["gen-data", "--config", str(cfg), "--out",
                     str(tmp_path / "x.jsonl")])
        assert code == 2
        assert "seed" in capsys.readouterr().err

    def test_seed_flag_overrides(self, tmp_path):
        cfg = tiny_config(tmp_path)
        out1 = tmp_path / "s1.jsonl"
        out2 = tmp_path / "s2.jsonl"
        main(["gen-data", "--config", str(cfg), "--out", str(out1), "--seed", "1"])
        main(["gen-data", "--config", str(cfg), "--out", str(out2), "--seed", "2"])
        assert out1.read_bytes() != out2.read_bytes()

    def test_config_echo_written(self, tmp_path):
        cfg = tiny_config(tmp_path)
        out = tmp_path / "run" / "d.jsonl"
        main(["gen-data", "--config", str(cfg), "--out", str(out)])
        echo = json.loads((tmp_path / "run" / "d.config.json").read_text())
        assert echo["data"]["seed"] == 7
        assert echo["corridor"]["alpha"] == 2.0


class TestSelectAnchors:
    def test_straight_line_rdp_dp(self, tmp_path, capsys):
        poly = [[k / 9, 0.0, 0.0] for k in range(10)]
        f = tmp_path / "line.json"
        f.write_text(json.dumps(poly))
        assert main(["select-anchors", "--in", str(f), "--k", "1",
                     "--method", "rdp_dp"]) == 0
        out = capsys.readouterr().out
        assert "indices: 1" in out
        objective = float(out.split("objective:")[1])
        assert abs(objective) < 1e-12

    def test_uniform_spacing(self, tmp_path, capsys):
        poly = [[k / 12, 0.0, 0.0] for k in range(13)]  # 12 steps
        f = tmp_path / "line13.json"
        f.write_text(json.dumps(poly))
        assert main(["select-anchors", "--in", str(f), "--k", "3",
                     "--method", "uniform"]) == 0
        assert "indices: 3 7 11" in capsys.readouterr().out

    def test_infeasible_k_exit_2(self, tmp_path, capsys):
        poly = [[k / 4, 0.0, 0.0] for k in range(5)]
        f = tmp_path / "short.json"
        f.write_text(json.dumps(poly))
        assert main(["select-anchors", "--in", str(f), "--k", "4"]) == 2

    def test_bad_polyline_file(self, tmp_path):
        f = tmp_path / "bad.json"
        f.write_text("not json")
        assert main(["select-anchors", "--in", str(f), "--k", "1"]) == 3


class TestTrainEvalPipeline:
    def test_train_then_eval(self, dataset, tmp_path, capsys):
        cfg_path, data_path = dataset
        doc = json.loads(cfg_path.read_text())
        doc["data"]["path"] = str(data_path)
        cfg2 = tmp_path / "train.json"
        cfg2.write_text(json.dumps(doc))
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(cfg2), "--out-dir", str(run_dir)]) == 0
        final = json.loads(capsys.readouterr().out.strip())
        assert final["step"] == 4
        assert (run_dir / "metrics.jsonl").exists()
        assert (run_dir / "checkpoint.json").exists()
        assert (run_dir / "training_curves.png").exists()
        assert (run_dir / "resolved_config.json").exists()

        eval_dir = tmp_path / "eval"
        assert main(["eval", "--config", str(cfg2), "--out-dir", str(eval_dir),
                     "--checkpoint", str(run_dir / "checkpoint.json")]) == 0
        report = json.loads(capsys.readouterr().out.strip())
        for key in ("endpoint_error", "corridor_violation_rate", "anchor_mae",
                    "fm_val_loss", "per_family"):
            assert key in report
        assert (eval_dir / "eval_report.json").exists()
        assert (eval_dir / "eval_families.png").exists()

    def test_train_missing_dataset_path_exit_2(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        assert main(["train", "--config", str(cfg), "--out-dir",
                     str(tmp_path / "r")]) == 2
        assert "data.path" in capsys.readouterr().err

    def test_missing_train_seed_exit_2(self, dataset, tmp_path, capsys):
        cfg_path, data_path = dataset
        doc = json.loads(cfg_path.read_text())
        doc["data"]["path"] = str(data_path)
        del doc["train"]["seed"]
        cfg2 = tmp_path / "noseed_train.json"
        cfg2.write_text(json.dumps(doc))
        assert main(["train", "--config", str(cfg2), "--out-dir",
                     str(tmp_path / "r2")]) == 2
        assert "train.seed" in capsys.readouterr().err


class TestSample:
    def test_generated_lines(self, dataset, tmp_path, capsys):
        cfg_path, data_path = dataset
        doc = json.loads(cfg_path.read_text())
        doc["data"]["path"] = str(data_path)
        cfg2 = tmp_path / "s.json"
        cfg2.write_text(json.dumps(doc))
        run_dir = tmp_path / "run_s"
        main(["train", "--config", str(cfg2), "--out-dir", str(run_dir)])
        capsys.readouterr()
        out_dir = tmp_path / "samples"
        assert main(["sample", "--config", str(cfg2), "--out-dir", str(out_dir),
                     "--checkpoint", str(run_dir / "checkpoint.json")]) == 0
        lines = (out_dir / "samples.jsonl").read_text().splitlines()
        assert len(lines) == 12  # eval.max_records
        for line in lines:
            obj = json.loads(line)
            assert obj["generated"] is True
            for field in ("context", "chunk", "anchor_indices", "delta_targets",
                          "pos_targets", "delta_width", "seed"):
                assert field in obj
        assert (out_dir / "sample_paths.png").exists()


class TestGradCheckCmd:
    def test_passes_on_default_model(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        assert main(["grad-check", "--config", str(cfg), "--coords", "120",
                     "--batch", "4"]) == 0
        report = json.loads(capsys.readouterr().out.strip())
        assert report["max_rel_err"] < 1e-4

    def test_failure_exit_5(self, tmp_path):
        cfg = tiny_config(tmp_path)
        assert main(["grad-check", "--config", str(cfg), "--coords", "40",
                     "--batch", "4", "--tol", "1e-18"]) == 5


class TestAblateCmd:
    def test_emits_nine_rows_and_figure(self, dataset, tmp_path, capsys):
        cfg_path, data_path = dataset
        doc = json.loads(cfg_path.read_text())
        doc["data"]["path"] = str(data_path)
        doc["train"]["steps"] = 2
        doc["train"]["eval_every"] = 1
        cfg2 = tmp_path / "abl.json"
        cfg2.write_text(json.dumps(doc))
        out_dir = tmp_path / "ablate"
        assert main(["ablate", "--config", str(cfg2), "--out-dir", str(out_dir)]) == 0
        csv_lines = (out_dir / "ablation.csv").read_text().splitlines()
        assert csv_lines[0] == "variant,endpoint_error,violation_rate,anchor_mae,fm_val_loss"
        assert len(csv_lines) == 10
        variants = [line.split(",")[0] for line in csv_lines[1:]]
        assert variants == ["baseline-FM", "pos", "delta-pos", "extra-A", "merge",
                            "merge+buf", "merge+cons", "full", "full-RDP"]
        assert (out_dir / "ablation_metrics.png").exists()
        assert (out_dir / "metrics_full-RDP.jsonl").exists()
        rows = json.loads((out_dir / "ablation.json").read_text())
        assert all("error" not in r for r in rows)
