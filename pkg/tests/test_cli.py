"""End-to-end CLI flows through click's test runner."""

import os

import pytest
import yaml
from click.testing import CliRunner

from tenseg.calibration import read_calibration
from tenseg.cli import main
from tenseg.config import dump_config, load_config


@pytest.fixture
def runner():
    return CliRunner()


def _write_config(path, **overrides):
    cfg = load_config(None, **overrides)
    dump_config(cfg, path)
    return path


def test_help_screens(runner):
    assert runner.invoke(main, ["--help"]).exit_code == 0
    for sub in ("simulate", "calibrate", "rangelog"):
        res = runner.invoke(main, [sub, "--help"])
        assert res.exit_code == 0, res.output


def test_simulate_writes_artifacts(runner, tmp_path):
    cfg_path = _write_config(tmp_path / "cfg.yaml", duration=4.0, settle=2.5)
    out = tmp_path / "run"
    res = runner.invoke(main, ["simulate", "--config", str(cfg_path),
                               "--out", str(out)])
    assert res.exit_code == 0, res.output
    for name in ("trajectory.jsonl", "trajectory.csv", "metrics.csv",
                 "config.yaml"):
        assert (out / name).exists()
    pngs = [p for p in os.listdir(out) if p.endswith(".png")]
    assert pngs, "report figures should land next to the tables"
    assert "rms_overall" in res.output
    assert "scenario=local setting=full" in res.output


def test_simulate_rejects_bad_override(runner, tmp_path):
    res = runner.invoke(main, ["simulate", "--duration", "-3",
                               "--out", str(tmp_path / "x")])
    assert res.exit_code != 0
    assert "duration" in res.output


def test_rangelog_then_calibrate(runner, tmp_path):
    cfg_path = _write_config(tmp_path / "cfg.yaml", duration=1.5, settle=0.5)
    log_path = tmp_path / "log.jsonl"
    res = runner.invoke(main, ["rangelog", "--config", str(cfg_path),
                               "--out", str(log_path)])
    assert res.exit_code == 0, res.output
    assert log_path.exists()
    anchors_path = tmp_path / "log_anchors.yaml"
    assert anchors_path.exists()
    with open(anchors_path) as fh:
        anchors = yaml.safe_load(fh)
    assert len(anchors) == 8

    # Three surveyed anchors pin the frame for the fit.
    priors = {k: anchors[k] for k in sorted(anchors)[:3]}
    priors_path = tmp_path / "priors.yaml"
    priors_path.write_text(yaml.safe_dump(priors))

    out_path = tmp_path / "calib.yaml"
    res = runner.invoke(main, ["calibrate", "--log", str(log_path),
                               "--priors", str(priors_path),
                               "--out", str(out_path),
                               "--no-plots"])
    assert res.exit_code == 0, res.output
    assert out_path.exists()
    fit_anchors, offsets, diag = read_calibration(out_path)
    assert len(fit_anchors) == 8
    assert diag["gauge_fixed"]
    assert len(offsets) > 0
    # Fitted anchors should roughly agree with the survey that generated
    # the log (default radios are low-noise, and three are pinned exactly).
    err = max(
        float(((fit_anchors[aid] - anchors[aid]) ** 2).sum()) ** 0.5
        for aid in fit_anchors)
    assert err < 0.5


def test_rangelog_requires_valid_duration(runner, tmp_path):
    res = runner.invoke(main, ["rangelog", "--duration", "-1",
                               "--out", str(tmp_path / "log.jsonl")])
    assert res.exit_code != 0
