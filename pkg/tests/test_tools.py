import asyncio

import pytest

import main
from rmaff_ps.errors import InputError, TrainingError
from rmaff_ps.settings import LightsConfig, save_config, tiny_config
from tools.eval_tools import eval_summary
from tools.render_tools import render_summary
from tools.solve_tools import solve_summary
from tools.status_tools import toolkit_status


def test_tools_registered():
    tools = asyncio.run(main.mcp.get_tools())
    assert {
        "get_toolkit_status",
        "get_config_schema",
        "render_scenes",
        "solve_normals",
        "evaluate_normals",
        "train_network",
    } <= set(tools)


class TestToolkitCall:
    def test_returns_result(self):
        assert asyncio.run(main.toolkit_call(lambda a, b=0: a + b, 2, b=3)) == 5

    def test_invalid_input_becomes_message(self):
        def boom():
            raise InputError("lights.txt:3: expected 4 or 6 numbers")

        result = asyncio.run(main.toolkit_call(boom))
        assert result == "Error: invalid input: lights.txt:3: expected 4 or 6 numbers"

    def test_toolkit_failure_becomes_message(self):
        def diverge():
            raise TrainingError("Loss is nan at batch 0:1", batch_id="0:1")

        assert asyncio.run(main.toolkit_call(diverge)) == "Error: Loss is nan at batch 0:1"

    def test_unexpected_failure_becomes_message(self):
        def crash():
            raise RuntimeError("disk full")

        assert asyncio.run(main.toolkit_call(crash)) == "Error: disk full"


def test_status_reports_environment():
    status = toolkit_status()
    assert status["status"] == "active"
    assert status["methods"] == ["l2", "rmaff"]
    assert "full" in status["variants"]


def test_render_solve_evaluate_summaries(tmp_path):
    cfg = tiny_config()
    cfg = cfg.model_copy(update={"render": cfg.render.model_copy(update={"random_scenes": 1, "lights": LightsConfig(kind="ring", count=5)})})
    save_config(cfg, tmp_path / "cfg.json")

    rendered = render_summary(str(tmp_path / "cfg.json"), str(tmp_path / "data"))
    assert rendered["scenes"] == ["scene_000"]
    scene = str(tmp_path / "data" / "scene_000")

    solved = solve_summary(scene, str(tmp_path / "n.png"), "l2", None, "0:4", None)
    assert (solved["width"], solved["height"]) == (16, 16)
    assert solved["pixels"] > 0

    report = eval_summary(str(tmp_path / "n.png"), scene, str(tmp_path / "eval"), 90.0)
    assert report["name"] == "scene_000"
    assert report["mae"] >= 0.0
    assert set(report) >= {"p50", "p75", "p90", "pixels"}


def test_missing_config_is_reported():
    with pytest.raises(InputError):
        render_summary("/nonexistent/cfg.json", "/tmp/unused")
