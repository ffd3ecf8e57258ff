"""Artifact writers: shapes, headers, precision, and determinism."""

import csv
import json

import numpy as np
import pytest

from tenseg.errors import ExportError
from tenseg.export import (
    write_metrics_csv,
    write_trajectory_csv,
    write_trajectory_jsonl,
)
from tenseg.metrics import RunMetrics


@pytest.fixture
def small_run():
    rng = np.random.default_rng(3)
    times = np.arange(0.0, 0.5, 0.1)
    truth = rng.normal(size=(len(times), 4, 3))
    est = truth + 0.01 * rng.normal(size=truth.shape)
    cov = rng.uniform(0.1, 0.5, size=len(times))
    return times, truth, est, cov


def test_jsonl_line_count_and_fields(tmp_path, small_run):
    times, truth, est, cov = small_run
    path = tmp_path / "traj.jsonl"
    write_trajectory_jsonl(path, times, truth, est, cov)
    lines = path.read_text().splitlines()
    assert len(lines) == len(times) * truth.shape[1]
    rec = json.loads(lines[0])
    assert set(rec) == {"t", "endcap_id", "true", "est", "cov_trace"}
    assert rec["endcap_id"] == 0
    assert rec["true"] == pytest.approx(list(truth[0, 0]))
    # End caps cycle fastest.
    assert json.loads(lines[1])["endcap_id"] == 1
    assert json.loads(lines[truth.shape[1]])["t"] == pytest.approx(times[1])


def test_csv_header_and_values(tmp_path, small_run):
    times, truth, est, _ = small_run
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, times, truth, est)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "endcap_id", "x_true", "y_true", "z_true",
                       "x_est", "y_est", "z_est"]
    assert len(rows) == 1 + len(times) * truth.shape[1]
    first = rows[1]
    assert float(first[0]) == pytest.approx(times[0])
    assert int(first[1]) == 0
    assert float(first[2]) == pytest.approx(truth[0, 0, 0], abs=1e-9)
    assert float(first[7]) == pytest.approx(est[0, 0, 2], abs=1e-9)


def test_metrics_csv_roundtrips_values(tmp_path):
    m = RunMetrics(
        rms_per_endcap={0: 0.0123456789012},
        rms_overall=0.0123456789012,
        settle=10.0,
        mean_cov_trace=0.05,
        max_cov_trace=0.2,
        accept_rate=0.97,
        com_rms=0.01,
    )
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, m)
    with open(path, newline="") as fh:
        rows = {k: v for k, v in list(csv.reader(fh))[1:]}
    assert float(rows["rms_overall"]) == pytest.approx(m.rms_overall, rel=1e-11)
    assert rows["transitions_matched"] == "1"


def test_identical_inputs_identical_bytes(tmp_path, small_run):
    times, truth, est, cov = small_run
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    write_trajectory_jsonl(a, times, truth, est, cov)
    write_trajectory_jsonl(b, times, truth, est, cov)
    assert a.read_bytes() == b.read_bytes()

    c = tmp_path / "a.csv"
    d = tmp_path / "b.csv"
    write_trajectory_csv(c, times, truth, est)
    write_trajectory_csv(d, times, truth, est)
    assert c.read_bytes() == d.read_bytes()


def test_unwritable_path_raises_export_error(tmp_path, small_run):
    times, truth, est, cov = small_run
    missing = tmp_path / "no" / "such" / "dir" / "x.jsonl"
    with pytest.raises(ExportError):
        write_trajectory_jsonl(missing, times, truth, est, cov)
