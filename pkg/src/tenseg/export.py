"""Run artifacts: trajectory JSONL/CSV, metrics CSV, config echo.

All writers format numbers with repr-stable precision so identical runs
produce byte-identical files (the determinism contract checks exactly that).
"""

import csv
import json

from .config import dump_config
from .errors import ExportError


def _guard(path, fn):
    try:
        return fn()
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc


def write_trajectory_jsonl(path, times, truth, est, cov_traces) -> None:
    """One JSON line per (step, end cap): truth and estimate side by side."""
    def emit():
        with open(path, "w") as fh:
            for k, t in enumerate(times):
                for e in range(truth.shape[1]):
                    fh.write(json.dumps({
                        "t": round(float(t), 9),
                        "endcap_id": e,
                        "true": [float(v) for v in truth[k, e]],
                        "est": [float(v) for v in est[k, e]],
                        "cov_trace": float(cov_traces[k]),
                    }) + "\n")
    _guard(path, emit)


def write_trajectory_csv(path, times, truth, est) -> None:
    def emit():
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "endcap_id", "x_true", "y_true", "z_true",
                        "x_est", "y_est", "z_est"])
            for k, t in enumerate(times):
                for e in range(truth.shape[1]):
                    w.writerow([f"{t:.6f}", e,
                                *(f"{v:.9f}" for v in truth[k, e]),
                                *(f"{v:.9f}" for v in est[k, e])])
    _guard(path, emit)


def write_metrics_csv(path, metrics) -> None:
    """Flat name,value table from RunMetrics.rows()."""
    def emit():
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for name, value in metrics.rows():
                if isinstance(value, float):
                    w.writerow([name, f"{value:.12g}"])
                else:
                    w.writerow([name, value])
    _guard(path, emit)


def write_config_echo(path, cfg) -> None:
    _guard(path, lambda: dump_config(cfg, path))


def export_run(out_dir, run, metrics) -> dict:
    """Write the full artifact set into out_dir; returns written paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "trajectory_jsonl": os.path.join(out_dir, "trajectory.jsonl"),
        "trajectory_csv": os.path.join(out_dir, "trajectory.csv"),
        "metrics_csv": os.path.join(out_dir, "metrics.csv"),
        "config_yaml": os.path.join(out_dir, "config.yaml"),
    }
    write_trajectory_jsonl(paths["trajectory_jsonl"], run.times,
                           run.truth_nodes, run.est_nodes, run.cov_traces)
    write_trajectory_csv(paths["trajectory_csv"], run.times,
                         run.truth_nodes, run.est_nodes)
    write_metrics_csv(paths["metrics_csv"], metrics)
    write_config_echo(paths["config_yaml"], run.config)
    return paths
