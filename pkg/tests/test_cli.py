import json

import numpy as np
import pytest

from rmaff_ps.cli import RunOptions, resolve_config, run_cli
from rmaff_ps.codecs import write_normals
from rmaff_ps.core import NormalMap
from rmaff_ps.metrics import AVG_COLUMN, parse_table
from rmaff_ps.settings import LightsConfig, save_config, tiny_config


@pytest.fixture
def tiny_config_file(tmp_path):
    cfg = tiny_config()
    cfg = cfg.model_copy(
        update={
            "render": cfg.render.model_copy(update={"random_scenes": 3, "lights": LightsConfig(kind="ring", count=6, zenith_deg=40.0)}),
            "train": cfg.train.model_copy(update={"epochs": 1, "batches_per_epoch": 1, "lights_per_sample": 3}),
        }
    )
    path = tmp_path / "tiny.json"
    save_config(cfg, path)
    return path


def test_render_solve_eval(tmp_path, tiny_config_file, capsys):
    assert run_cli(["--threads", "2", "render", str(tiny_config_file), str(tmp_path / "data")]) == 0
    scene = tmp_path / "data" / "scene_000"
    assert (scene / "lights.txt").exists()

    assert run_cli(["solve", str(scene), str(tmp_path / "pred.png")]) == 0
    assert (tmp_path / "pred.png").exists()

    assert run_cli(["eval", str(tmp_path / "pred.png"), str(scene), "--out", str(tmp_path / "eval")]) == 0
    out = capsys.readouterr().out
    assert "MAE" in out and "deg" in out
    assert (tmp_path / "eval" / "report.tsv").exists()
    assert (tmp_path / "eval" / "error_map.png").exists()


def test_eval_default_report_directory(dataset_dir, tmp_path):
    assert run_cli(["solve", str(dataset_dir), str(tmp_path / "n.pfm")]) == 0
    assert run_cli(["eval", str(tmp_path / "n.pfm"), str(dataset_dir)]) == 0
    assert (tmp_path / "n_eval" / "report.tsv").exists()


def test_eval_dimension_mismatch_is_invalid_input(dataset_dir, tmp_path):
    write_normals(tmp_path / "small.png", NormalMap(np.tile([0.0, 0.0, 1.0], (10, 10, 1)), np.ones((10, 10), bool)))
    assert run_cli(["eval", str(tmp_path / "small.png"), str(dataset_dir)]) == 1


def test_missing_dataset_is_invalid_input(tmp_path):
    assert run_cli(["solve", str(tmp_path / "nowhere"), str(tmp_path / "n.png")]) == 1


def test_network_without_checkpoint_is_invalid_input(dataset_dir, tmp_path):
    assert run_cli(["solve", str(dataset_dir), str(tmp_path / "n.png"), "--method", "rmaff"]) == 1


def test_solve_image_subset(dataset_dir, tmp_path, capsys):
    assert run_cli(["solve", str(dataset_dir), str(tmp_path / "n.png"), "--images", "0:4"]) == 0
    assert "Wrote" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(dataset_dir, tmp_path):
    assert run_cli(["solve", str(dataset_dir), str(tmp_path / "n.png"), "--frobnicate"]) == 1


def test_unknown_method_is_usage_error(dataset_dir, tmp_path):
    assert run_cli(["solve", str(dataset_dir), str(tmp_path / "n.png"), "--method", "ransac"]) == 1


def test_broken_config_is_invalid_input(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"config_version": 1, "render": {"width": "wide"}}')
    assert run_cli(["render", str(bad), str(tmp_path / "out")]) == 1


def test_gradcheck_reports_pass(capsys):
    assert run_cli(["--seed", "1", "gradcheck", "--probes", "1", "--no-network"]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("max relative error")
    assert last.endswith("PASS")


def test_sweep_prints_table(dataset_dir, capsys):
    assert run_cli(["sweep", str(dataset_dir), "--lights", "3,8", "--scales", "1"]) == 0
    header, rows = parse_table(capsys.readouterr().out)
    assert header == ["images", "scale", "mae_deg"]
    assert set(rows) == {"3", "8"}


def test_sweep_bad_list(dataset_dir):
    assert run_cli(["sweep", str(dataset_dir), "--lights", "three"]) == 1


def test_train_then_solve_with_network(tmp_path, tiny_config_file, capsys):
    assert run_cli(["render", str(tiny_config_file), str(tmp_path / "data")]) == 0
    code = run_cli(["--deterministic", "train", str(tiny_config_file), str(tmp_path / "data"), str(tmp_path / "run")])
    assert code == 0
    assert "Best epoch 0" in capsys.readouterr().out
    assert (tmp_path / "run" / "BEST").exists()
    scene = tmp_path / "data" / "scene_000"
    args = ["solve", str(scene), str(tmp_path / "net.png"), "--method", "rmaff", "--checkpoint", str(tmp_path / "run")]
    assert run_cli(args) == 0


def test_ablate_table(tmp_path, tiny_config_file, capsys):
    assert run_cli(["render", str(tiny_config_file), str(tmp_path / "data")]) == 0
    capsys.readouterr()
    args = ["--deterministic", "ablate", str(tiny_config_file), str(tmp_path / "data"), str(tmp_path / "abl"), "--variants", "full,no_rmaff"]
    assert run_cli(args) == 0
    header, rows = parse_table(capsys.readouterr().out)
    assert header[0] == "variant" and header[-1] == AVG_COLUMN
    assert set(rows) == {"full", "no_rmaff"}
    assert (tmp_path / "abl" / "ablation.tsv").exists()


def test_ablate_unknown_variant(tmp_path, tiny_config_file):
    args = ["ablate", str(tiny_config_file), str(tmp_path), str(tmp_path / "abl"), "--variants", "full,bogus"]
    assert run_cli(args) == 1


def test_overrides_reach_config():
    cfg = resolve_config(None, RunOptions(seed=42, precision="f64"))
    assert cfg.seed == 42 and cfg.train.seed == 42
    assert cfg.network.precision == "f64" and cfg.train.precision == "f64"


def test_repeat_runs_are_byte_identical(tmp_path, tiny_config_file):
    cfg = json.loads(tiny_config_file.read_text())
    cfg["train"]["epochs"] = 2
    config = tmp_path / "two_epochs.json"
    config.write_text(json.dumps(cfg))

    def run(root):
        assert run_cli(["--deterministic", "render", str(config), str(root / "data")]) == 0
        assert run_cli(["--deterministic", "train", str(config), str(root / "data"), str(root / "run")]) == 0
        scene = str(root / "data" / "scene_001")
        pred = str(root / "pred.png")
        assert run_cli(["solve", scene, pred, "--method", "rmaff", "--checkpoint", str(root / "run")]) == 0
        assert run_cli(["eval", pred, scene, "--out", str(root / "eval")]) == 0
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    first = run(tmp_path / "a")
    second = run(tmp_path / "b")
    assert first.keys() == second.keys()
    assert first == second
