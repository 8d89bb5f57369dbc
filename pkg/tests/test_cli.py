"""CLI stages on a deliberately tiny configuration."""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from gradleak.cli import (EXIT_ANOMALOUS, EXIT_BAD_CONFIG, EXIT_ERROR,
                          EXIT_OK, main)
from gradleak.detection import make_rtf_module
from gradleak.models import SpabHead


FAST = {
    "dataset": {"family": "geometric", "classes": 4, "count": 128, "size": 16},
    "pretrain": {"epochs": 2, "lr": 0.05, "batch_size": 32},
    "spab": {"epochs": 4, "batches_per_epoch": 4},
    "round": {"batch_size": 2},
    "ir_match": {"iterations": 15, "perturb_every": 5},
    "master_seed": 11,
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One fast pretrain->spab->round->extract run shared by the stage tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps({**FAST, "out_dir": str(root / "run")}))
    runner = CliRunner()
    for cmd in ("pretrain-at", "spab-train", "fed-round", "extract"):
        result = runner.invoke(main, [cmd, "--config", str(cfg_path)])
        assert result.exit_code == EXIT_OK, f"{cmd}: {result.output}"
    return runner, cfg_path, root / "run"


def test_stage_artifacts_exist(pipeline):
    _, _, out = pipeline
    for name in ("config.json", "fe_robust.ckpt", "fe_natural.ckpt",
                 "head.ckpt", "update.bin", "round.json", "irs.json"):
        assert (out / name).exists(), name


def test_stages_resume_as_noop(pipeline):
    runner, cfg_path, out = pipeline
    mtime = (out / "head.ckpt").stat().st_mtime_ns
    result = runner.invoke(main, ["spab-train", "--config", str(cfg_path)])
    assert result.exit_code == EXIT_OK
    assert (out / "head.ckpt").stat().st_mtime_ns == mtime


def test_reconstruct_writes_images_and_report(pipeline):
    runner, cfg_path, out = pipeline
    result = runner.invoke(main, ["reconstruct", "--config", str(cfg_path)])
    assert result.exit_code == EXIT_OK, result.output
    report = json.loads((out / "reconstruct.json").read_text())
    assert report and all((out / e["image"]).exists() for e in report)
    assert all("psnr" in e for e in report)


def test_evaluate_sweep_csv(pipeline):
    runner, cfg_path, out = pipeline
    result = runner.invoke(main, ["evaluate", "--config", str(cfg_path),
                                  "--sweep", "batch-size", "2,4"])
    assert result.exit_code == EXIT_OK, result.output
    rows = (out / "evaluate.csv").read_text().strip().splitlines()
    assert rows[0] == "batch_size,leakage_rate_mean,leakage_rate_std"
    assert len(rows) == 3


def test_detect_clean_head_exit_zero(pipeline):
    runner, cfg_path, out = pipeline
    result = runner.invoke(main, ["detect", "--config", str(cfg_path)])
    assert result.exit_code == EXIT_OK, result.output
    doc = json.loads((out / "detect.json").read_text())
    assert doc["anomalous"] is False


def test_detect_rtf_fixture_distinct_exit(pipeline, tmp_path):
    runner, cfg_path, _ = pipeline
    bad = tmp_path / "rtf.ckpt"
    make_rtf_module(16, 8).save(bad)
    result = runner.invoke(main, ["detect", "--config", str(cfg_path),
                                  "--checkpoint", str(bad)])
    assert result.exit_code == EXIT_ANOMALOUS


def test_missing_input_is_reported(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**FAST, "out_dir": str(tmp_path / "empty")}))
    result = CliRunner().invoke(main, ["extract", "--config", str(cfg_path)])
    assert result.exit_code == EXIT_ERROR
    err = json.loads((tmp_path / "empty" / "error.json").read_text())
    assert err["error"] == "MissingInput"


def test_bad_config_exit_code(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text('{"bogus": true}')
    result = CliRunner().invoke(main, ["pretrain-at", "--config", str(cfg_path),
                                       "--out", str(tmp_path / "o")])
    assert result.exit_code == EXIT_BAD_CONFIG


def test_seed_flag_overrides_master_seed(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**FAST, "out_dir": str(tmp_path / "run")}))
    runner = CliRunner()
    result = runner.invoke(main, ["pretrain-at", "--config", str(cfg_path),
                                  "--seed", "99"])
    assert result.exit_code == EXIT_OK
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["master_seed"] == 99
