"""Command-line behavior: artifacts, exit codes, config validation."""

import csv
import json

import numpy as np
import pytest

from ewas.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main
from ewas.models import load_checkpoint


def write_config(path, **overrides):
    cfg = {
        "seed": 3,
        "output_dir": str(path.parent / "out"),
        "model": {
            "arch": "small_cnn", "width": 2, "input_shape": [1, 8, 8],
            "num_classes": 3, "insertion_points": ["block4"], "dtype": "float64",
        },
        "data": {
            "kind": "synthetic", "num_classes": 3, "samples_per_class": 8,
            "test_samples_per_class": 6, "shape": [1, 8, 8], "noise_std": 0.1,
        },
        "train": {
            "method": "at", "lambda": 0.01, "beta": 0.0, "epochs": 1,
            "batch_size": 12, "lr": 0.05, "momentum": 0.9,
            "weight_decay": 0.0002, "milestones": [],
            "attack": {"epsilon": 0.1, "step_size": 0.05, "steps": 2,
                       "random_start": True, "lambda_attack": 0.01},
        },
        "attack_presets": {
            "pgd2": {"epsilon": 0.1, "step_size": 0.05, "steps": 2,
                     "random_start": True},
        },
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return cfg


class TestTrain:
    def test_writes_three_artifacts(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
        assert (out / "checkpoint.ckpt").exists()
        assert (out / "trainlog.csv").exists()
        assert (out / "resolved_config.json").exists()
        log_rows = list(csv.DictReader(open(out / "trainlog.csv")))
        assert len(log_rows) == 1

    def test_zero_epochs_checkpoint_equals_initialization(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg = write_config(cfg_path)
        cfg["train"]["epochs"] = 0
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "run0"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
        from ewas.config import load_run_config

        run = load_run_config(cfg_path)
        fresh = run.model.build(run.seed)
        loaded = load_checkpoint(out / "checkpoint.ckpt")
        for (_, a), (_, b) in zip(fresh.parameters(), loaded.parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_missing_required_field_names_it(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg = write_config(cfg_path)
        del cfg["data"]["samples_per_class"]
        cfg_path.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(cfg_path)]) == EXIT_USAGE
        assert "samples_per_class" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg = write_config(cfg_path)
        cfg["train"]["warmup"] = 5
        cfg_path.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(cfg_path)]) == EXIT_USAGE
        assert "warmup" in capsys.readouterr().err

    def test_config_file_not_mutated(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path)
        before = cfg_path.read_bytes()
        main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
        assert cfg_path.read_bytes() == before

    def test_snapshot_enables_exact_rerun(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", "--config", str(cfg_path), "--out", str(out1)]) == EXIT_OK
        snapshot = out1 / "resolved_config.json"
        assert main(["train", "--config", str(snapshot), "--out", str(out2)]) == EXIT_OK
        a = (out1 / "checkpoint.ckpt").read_bytes()
        b = (out2 / "checkpoint.ckpt").read_bytes()
        assert a == b


class TestEval:
    @pytest.fixture
    def trained(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path)
        out = tmp_path / "train_out"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
        return cfg_path, out / "checkpoint.ckpt"

    def test_emits_csv_with_attack_rows(self, trained, tmp_path):
        cfg_path, ckpt = trained
        out = tmp_path / "eval_out"
        assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                     "--out", str(out)]) == EXIT_OK
        rows = list(csv.DictReader(open(out / "eval.csv")))
        assert [r["attack"] for r in rows] == ["natural", "pgd2"]

    def test_empty_preset_list_natural_only(self, trained, tmp_path):
        cfg_path, ckpt = trained
        cfg = json.loads(cfg_path.read_text())
        cfg["attack_presets"] = {}
        cfg2 = tmp_path / "cfg2.json"
        cfg2.write_text(json.dumps(cfg))
        out = tmp_path / "eval_nat"
        assert main(["eval", "--config", str(cfg2), "--checkpoint", str(ckpt),
                     "--out", str(out)]) == EXIT_OK
        rows = list(csv.DictReader(open(out / "eval.csv")))
        assert [r["attack"] for r in rows] == ["natural"]

    def test_epsilon_zero_robust_equals_natural(self, trained, tmp_path):
        cfg_path, ckpt = trained
        cfg = json.loads(cfg_path.read_text())
        cfg["attack_presets"] = {"noop": {"epsilon": 0.0, "step_size": 0.01,
                                          "steps": 1}}
        cfg2 = tmp_path / "cfg3.json"
        cfg2.write_text(json.dumps(cfg))
        out = tmp_path / "eval_noop"
        main(["eval", "--config", str(cfg2), "--checkpoint", str(ckpt),
              "--out", str(out)])
        rows = list(csv.DictReader(open(out / "eval.csv")))
        assert rows[1]["robust_acc"] == rows[1]["natural_acc"]

    def test_reevaluation_byte_identical(self, trained, tmp_path):
        cfg_path, ckpt = trained
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                  "--out", str(out)])
            outs.append((out / "eval.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_checkpoint_is_io_error(self, trained, tmp_path):
        cfg_path, _ = trained
        code = main(["eval", "--config", str(cfg_path),
                     "--checkpoint", str(tmp_path / "nope.ckpt"),
                     "--out", str(tmp_path / "x")])
        assert code == EXIT_IO


class TestAblate:
    def test_lambda_sweep_two_rows(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path)
        out = tmp_path / "ab"
        assert main(["ablate", "--config", str(cfg_path), "--axis", "lambda",
                     "--values", "0.01,0.05", "--out", str(out)]) == EXIT_OK
        rows = list(csv.reader(open(out / "ablation.csv")))
        assert rows[0] == ["lambda", "natural_acc", "pgd2"]
        assert len(rows) == 3
        assert [r[0] for r in rows[1:]] == ["0.01", "0.05"]

    def test_position_sweep_uses_insertion_points(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path)
        out = tmp_path / "pos"
        assert main(["ablate", "--config", str(cfg_path), "--axis", "position",
                     "--values", "block3,block4", "--out", str(out)]) == EXIT_OK
        rows = list(csv.reader(open(out / "ablation.csv")))
        assert [r[0] for r in rows[1:]] == ["block3", "block4"]

    def test_attack_lambda_reuses_checkpoint(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path)
        train_out = tmp_path / "t"
        main(["train", "--config", str(cfg_path), "--out", str(train_out)])
        out = tmp_path / "al"
        assert main(["ablate", "--config", str(cfg_path), "--axis", "attack_lambda",
                     "--values", "0,0.01", "--out", str(out),
                     "--checkpoint", str(train_out / "checkpoint.ckpt")]) == EXIT_OK
        rows = list(csv.reader(open(out / "ablation.csv")))
        assert len(rows) == 3
        # no per-point training directories when a checkpoint is reused
        assert not any(p.name.startswith("attack_lambda") for p in out.iterdir()
                       if p.is_dir())

    def test_invalid_axis_is_usage_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path)
        assert main(["ablate", "--config", str(cfg_path), "--axis", "widths",
                     "--values", "1"]) == EXIT_USAGE

    def test_paper_lambda_sweep_values_accepted(self, tmp_path):
        from ewas.cli import _parse_values

        vals = _parse_values("lambda", "0.01,0.05,0.1,0.5,1,2")
        assert vals == [0.01, 0.05, 0.1, 0.5, 1.0, 2.0]


class TestExportActivations:
    @pytest.fixture
    def trained(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path, analysis={"layer": "block4", "class_label": 0,
                                         "attack": "pgd2", "scope": "sample",
                                         "split": "test"})
        out = tmp_path / "t"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
        return cfg_path, out / "checkpoint.ckpt"

    def test_full_export_with_adversarial(self, trained, tmp_path):
        cfg_path, ckpt = trained
        out = tmp_path / "act"
        assert main(["export-activations", "--config", str(cfg_path),
                     "--checkpoint", str(ckpt), "--out", str(out)]) == EXIT_OK
        rows = list(csv.DictReader(open(out / "activations.csv")))
        assert rows and "adversarial_value" in rows[0]
        # re-validate against the analysis oracles
        from ewas.analysis import ActivationStats, channel_ordering
        from ewas.config import load_run_config

        run = load_run_config(cfg_path)
        model = load_checkpoint(ckpt)
        ds = run.data.load("test", run.seed)
        keep = ds.labels == 0
        from ewas.tensor import no_grad

        with no_grad():
            fwd = model.forward(ds.images[keep], mask_mode="inference",
                                capture=("block4",))
        nat = ActivationStats.collect(list(fwd.captured["block4"].data), 0, "natural")
        freq_rows = [r for r in rows if r["statistic_kind"] == "frequency"]
        assert [int(r["channel_index"]) for r in freq_rows] == \
            list(channel_ordering(nat, "frequency"))
        for r in freq_rows:
            assert float(r["natural_value"]) == pytest.approx(
                nat.frequency[int(r["channel_index"])])

    def test_natural_only_omits_adversarial_column(self, trained, tmp_path):
        cfg_path, ckpt = trained
        cfg = json.loads(cfg_path.read_text())
        cfg["analysis"]["attack"] = None
        cfg2 = tmp_path / "cfg_nat.json"
        cfg2.write_text(json.dumps(cfg))
        out = tmp_path / "act_nat"
        assert main(["export-activations", "--config", str(cfg2),
                     "--checkpoint", str(ckpt), "--out", str(out)]) == EXIT_OK
        rows = list(csv.DictReader(open(out / "activations.csv")))
        assert "adversarial_value" not in rows[0]

    def test_unknown_hook_lists_valid_hooks(self, trained, tmp_path, capsys):
        cfg_path, ckpt = trained
        cfg = json.loads(cfg_path.read_text())
        cfg["analysis"]["layer"] = "blockZ"
        cfg2 = tmp_path / "cfg_bad.json"
        cfg2.write_text(json.dumps(cfg))
        assert main(["export-activations", "--config", str(cfg2),
                     "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / "x")]) == EXIT_USAGE
        err = capsys.readouterr().err
        assert "block1" in err and "block4" in err

    def test_single_sample_class_frequencies_binary(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        write_config(cfg_path,
                     data={"kind": "synthetic", "num_classes": 3,
                           "samples_per_class": 8, "test_samples_per_class": 1,
                           "shape": [1, 8, 8], "noise_std": 0.1},
                     analysis={"layer": "block4", "class_label": 0,
                               "attack": None, "scope": "sample",
                               "split": "test"})
        out = tmp_path / "t"
        main(["train", "--config", str(cfg_path), "--out", str(out)])
        act_out = tmp_path / "act1"
        assert main(["export-activations", "--config", str(cfg_path),
                     "--checkpoint", str(out / "checkpoint.ckpt"),
                     "--out", str(act_out)]) == EXIT_OK
        rows = [r for r in csv.DictReader(open(act_out / "activations.csv"))
                if r["statistic_kind"] == "frequency"]
        assert all(float(r["natural_value"]) in (0.0, 1.0) for r in rows)
