"""Command-line interface tests: config validation, output-directory
discipline, and the four subcommands on miniature configs."""

import json
import os

import numpy as np
import pytest

import dcafuse.cli as cli
import dcafuse.gradcheck as gradcheck_mod
from dcafuse.synthscene import load_scene

TINY = {
    "seed": 0,
    "scene": {"n_points": 64, "n_classes": 4, "n_cameras": 2, "image_px": 64,
              "texture_scale": 0.45, "noise_std": 0.2},
    "train": {"epochs": 2, "batch_points": 64, "lr": 5e-3,
              "weight_decay": 0.01, "optimizer": "adamw"},
    "disturbance": {"probability": 0.5, "max_rot_deg": 2.0, "max_trans_m": 0.2},
    "attention": {"num_levels": 2, "num_directions": 2,
                  "points_per_direction": 1, "channels": 8},
    "fusion": "dca_with_dqe",
    "n_seeds": 3,
    "n_train_scenes": 1,
    "n_eval_scenes": 1,
    "gradcheck_seeds": 1,
}


def write_config(tmp_path, overrides=None, name="cfg.json"):
    data = dict(TINY)
    if overrides:
        for key, value in overrides.items():
            if isinstance(value, dict):
                data[key] = {**data.get(key, {}), **value}
            else:
                data[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


class TestConfigValidation:
    def test_error_names_offending_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"scene": {"image_px": 60}})
        rc = cli.main(["genscene", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "config.scene" in capsys.readouterr().err

    def test_unknown_field_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"scene": {"n_pionts": 5}})
        rc = cli.main(["genscene", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "config.scene.n_pionts" in capsys.readouterr().err

    def test_bad_fusion_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"fusion": "two_to_two"})
        rc = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "config.fusion" in capsys.readouterr().err

    def test_command_mismatch_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"command": "train"})
        rc = cli.main(["genscene", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "config.command" in capsys.readouterr().err

    def test_invalid_json_rejected(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        rc = cli.main(["genscene", "--config", str(path), "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "JSON" in capsys.readouterr().err

    def test_validation_happens_before_side_effects(self, tmp_path):
        cfg = write_config(tmp_path, {"n_seeds": 0})
        out = tmp_path / "untouched"
        rc = cli.main(["robustness", "--config", cfg, "--out", str(out)])
        assert rc == 2
        assert not out.exists()

    def test_default_config_is_valid(self, tmp_path):
        path = tmp_path / "default.json"
        path.write_text(json.dumps(cli.default_config("genscene")))
        parsed = cli.parse_config(path.read_bytes(), "genscene")
        assert parsed.scene.image_px == 128


class TestOutputDirectory:
    def test_refuses_existing_without_overwrite(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        assert cli.main(["genscene", "--config", cfg, "--out", str(out)]) == 0
        rc = cli.main(["genscene", "--config", cfg, "--out", str(out)])
        assert rc == 2
        assert "overwrite" in capsys.readouterr().err

    def test_overwrite_flag_allows_reuse(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        assert cli.main(["genscene", "--config", cfg, "--out", str(out)]) == 0
        assert cli.main(["genscene", "--config", cfg, "--out", str(out), "--overwrite"]) == 0

    def test_config_copied_verbatim(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        cli.main(["genscene", "--config", cfg, "--out", str(out)])
        assert (out / "config.json").read_bytes() == open(cfg, "rb").read()


class TestGenscene:
    def test_writes_scene_and_is_deterministic(self, tmp_path):
        cfg = write_config(tmp_path)
        cli.main(["genscene", "--config", cfg, "--out", str(tmp_path / "a")])
        cli.main(["genscene", "--config", cfg, "--out", str(tmp_path / "b")])
        sa = load_scene(tmp_path / "a" / "scene")
        sb = load_scene(tmp_path / "b" / "scene")
        np.testing.assert_array_equal(sa.points.coords, sb.points.coords)
        np.testing.assert_array_equal(sa.labels, sb.labels)

    def test_seed_override_changes_scene(self, tmp_path):
        cfg = write_config(tmp_path)
        cli.main(["genscene", "--config", cfg, "--out", str(tmp_path / "a")])
        cli.main(["genscene", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"])
        sa = load_scene(tmp_path / "a" / "scene")
        sb = load_scene(tmp_path / "b" / "scene")
        assert not np.array_equal(sa.points.coords, sb.points.coords)

    def test_infeasible_scene_exits_nonzero(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path,
            {"scene": {"n_classes": 64, "image_px": 32, "texture_scale": 0.05,
                       "noise_std": 0.0, "n_points": 200}},
        )
        rc = cli.main(["genscene", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "generation failed" in capsys.readouterr().err


class TestTrainWithDisturbance:
    def test_config_knob_wires_disturbance(self, tmp_path):
        cfg_clean = write_config(tmp_path, name="clean.json")
        cfg_dist = write_config(
            tmp_path, {"train": {"with_disturbance": True}}, name="dist.json"
        )
        parsed_clean = cli.parse_config(open(cfg_clean, "rb").read(), "train")
        parsed_dist = cli.parse_config(open(cfg_dist, "rb").read(), "train")
        assert parsed_clean.train.train_disturbance is None
        assert parsed_dist.train.train_disturbance == parsed_dist.disturbance


class TestGradcheckCommand:
    def test_small_suite_passes_and_writes_report(self, tmp_path, monkeypatch):
        monkeypatch.setattr(
            gradcheck_mod, "DEFAULT_CHECKS",
            {"affine": gradcheck_mod.DEFAULT_CHECKS["affine"],
             "softmax": gradcheck_mod.DEFAULT_CHECKS["softmax"]},
        )
        cfg = write_config(tmp_path)
        out = tmp_path / "gc"
        rc = cli.main(["gradcheck", "--config", cfg, "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "gradcheck.json").read_text())
        assert report["all_passed"]
        assert [e["name"] for e in report["primitives"]] == ["affine", "softmax"]
        for entry in report["primitives"]:
            assert entry["max_rel_err"] < entry["tolerance"]

    def test_corrupted_backward_fails_naming_primitive(self, tmp_path, monkeypatch, capsys):
        def corrupted_check(seed):
            return 0.5  # a deliberately wrong gradient's relative error

        monkeypatch.setattr(
            gradcheck_mod, "DEFAULT_CHECKS",
            {"affine": gradcheck_mod.DEFAULT_CHECKS["affine"],
             "bilinear_sample": (corrupted_check, 1e-4)},
        )
        cfg = write_config(tmp_path)
        rc = cli.main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "gc")])
        assert rc == 1
        captured = capsys.readouterr()
        assert "bilinear_sample" in captured.err


class TestTrainCommand:
    def test_writes_checkpoint_and_history(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        rc = cli.main(["train", "--config", cfg, "--out", str(out)])
        assert rc == 0
        assert (out / "history.csv").exists()
        assert (out / "checkpoint" / "fusion" / "manifest.json").exists()
        assert (out / "checkpoint" / "head" / "manifest.json").exists()
        lines = (out / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,accuracy"
        assert len(lines) == 1 + TINY["train"]["epochs"]

    def test_one_to_one_checkpoint_kind(self, tmp_path):
        cfg = write_config(tmp_path, {"fusion": "one_to_one"})
        out = tmp_path / "run"
        assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
        manifest = json.loads((out / "checkpoint" / "fusion" / "manifest.json").read_text())
        assert manifest["kind"] == "one_to_one"


class TestRobustnessCommand:
    def test_writes_grid_outputs(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "grid"
        rc = cli.main(["robustness", "--config", cfg, "--out", str(out)])
        assert rc == 0
        lines = (out / "results.csv").read_text().splitlines()
        assert len(lines) == 1 + 12 * TINY["n_seeds"]
        summary = json.loads((out / "summary.json").read_text())
        assert len(summary["cells"]) == 12

    def test_threads_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DCAFUSE_THREADS", "2")
        args = cli.build_parser().parse_args(
            ["robustness", "--config", "x", "--out", "y"]
        )
        assert args.threads == 2
