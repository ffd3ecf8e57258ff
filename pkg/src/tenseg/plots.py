"""Report figures rendered straight to files (headless backend)."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import face_series


def plot_tracking(run, path, highlight=()) -> str:
    """Per-end-cap position error over time; highlighted caps drawn on top."""
    err = np.linalg.norm(run.est_nodes - run.truth_nodes, axis=2)
    fig, ax = plt.subplots(figsize=(9, 4.5))
    for e in range(err.shape[1]):
        if e in highlight:
            continue
        ax.plot(run.times, err[:, e], color="0.75", lw=0.7)
    for e in highlight:
        ax.plot(run.times, err[:, e], lw=1.8, label=f"end cap {e}")
    ax.axvline(run.config.settle, color="k", ls=":", lw=1, label="settle")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("position error (m)")
    ax.set_title(f"{run.config.scenario} / {run.config.setting}")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_covariance(run, path) -> str:
    fig, ax = plt.subplots(figsize=(9, 3.2))
    ax.semilogy(run.times, run.cov_traces, lw=1.2)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("covariance trace")
    ax.set_title("belief covariance")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_faces(run, path, hysteresis: float = 0.02) -> str:
    """Detected ground face over time, truth vs estimate."""
    ft = face_series(run.model, run.truth_nodes, hysteresis)
    fe = face_series(run.model, run.est_nodes, hysteresis)
    fig, ax = plt.subplots(figsize=(9, 3.2))
    ax.step(run.times, ft, where="post", lw=2.0, label="truth")
    ax.step(run.times, fe, where="post", lw=1.0, label="estimate")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("ground face")
    ax.set_yticks(sorted(set(ft) | set(fe)))
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_report(out_dir, run) -> list[str]:
    """All figures for one run, PNGs next to the delimited exports."""
    os.makedirs(out_dir, exist_ok=True)
    highlight = []
    if run.driven_node is not None:
        highlight = [run.driven_node, run.quiet_node]
    written = [
        plot_tracking(run, os.path.join(out_dir, "tracking_error.png"),
                      highlight=highlight),
        plot_covariance(run, os.path.join(out_dir, "covariance_trace.png")),
    ]
    if run.config.scenario == "global":
        written.append(plot_faces(run, os.path.join(out_dir, "faces.png")))
    return written
