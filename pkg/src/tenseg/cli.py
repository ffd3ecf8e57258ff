"""Command-line entry points: simulate, calibrate, rangelog."""

import os
import sys

import click
import numpy as np
import yaml

from .calibration import (
    CalibrationConfig,
    CalibrationDataset,
    calibrate as run_calibration,
    internal_offsets,
    write_calibration,
)
from .config import SCENARIOS, SETTINGS, load_config
from .errors import TensegError
from .export import export_run
from .metrics import compute_metrics
from .plots import render_report
from .ranging import read_measurement_log, write_measurement_log
from .scenario import ROBOT_ID_BASE, collect_rangelog, run_scenario
from .structure import build_superball


@click.group()
def main():
    """Tensegrity state-estimation testbed: simulate, calibrate, rangelog."""


@main.command()
@click.option("--scenario", type=click.Choice(SCENARIOS), default=None,
              help="Experiment family (default from config file, else local).")
@click.option("--setting", type=click.Choice(SETTINGS), default=None,
              help="Estimator variant (default full).")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="YAML overriding any default.")
@click.option("--seed", type=int, default=None)
@click.option("--duration", type=float, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--plots/--no-plots", default=True, show_default=True)
def simulate(scenario, setting, config_path, seed, duration, out_dir, plots):
    """Run one closed-loop scenario and export all artifacts."""
    try:
        cfg = load_config(config_path, scenario=scenario, setting=setting,
                          seed=seed, duration=duration)
        run = run_scenario(cfg)
        metrics = compute_metrics(run)
        paths = export_run(out_dir, run, metrics)
        if plots:
            for p in render_report(out_dir, run):
                paths[os.path.basename(p)] = p
    except TensegError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"scenario={cfg.scenario} setting={cfg.setting} seed={cfg.seed}")
    for name, value in metrics.rows():
        click.echo(f"  {name} = {value}")
    for name in sorted(paths):
        click.echo(f"wrote {paths[name]}")


@main.command()
@click.option("--log", "log_path", type=click.Path(exists=True), required=True,
              help="Measurement JSONL (see rangelog).")
@click.option("--priors", "priors_path", type=click.Path(exists=True),
              required=True, help="YAML map anchor_id -> [x, y, z].")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--rod-length", type=float, default=1.5, show_default=True)
@click.option("--mount-offset", type=float, default=0.1, show_default=True)
@click.option("--min-anchors", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--plots/--no-plots", default=True, show_default=True)
def calibrate(log_path, priors_path, out_path, rod_length, mount_offset,
              min_anchors, seed, plots):
    """Fit anchor positions and per-pair offsets from a raw measurement log."""
    try:
        measurements = read_measurement_log(log_path)
        with open(priors_path) as fh:
            raw_priors = yaml.safe_load(fh) or {}
        priors = {int(k): np.asarray(v, dtype=float)
                  for k, v in raw_priors.items()}
        senders = {m.i for m in measurements}
        responders = {m.j for m in measurements}
        anchor_ids = sorted(senders - responders)
        float_ids = sorted(responders)
        model, _ = build_superball(rod_length)
        bars = [(ROBOT_ID_BASE + int(i), ROBOT_ID_BASE + int(j))
                for i, j in model.bars]
        bars = [(i, j) for i, j in bars if i in float_ids and j in float_ids]
        dataset = CalibrationDataset.from_measurements(
            measurements, anchor_ids=anchor_ids, float_ids=float_ids,
            bars=bars, bar_span=rod_length - 2.0 * mount_offset,
            min_anchor_count=min_anchors)
        config = CalibrationConfig(min_anchor_count=min_anchors, seed=seed)
        result = run_calibration(dataset, priors, config)
        internal = internal_offsets(result, dataset)
        write_calibration(out_path, result, internal=internal)
    except TensegError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"anchors fit: {len(result.anchor_ids)} "
               f"({len(priors)} priors, gauge_fixed={result.gauge_fixed})")
    click.echo(f"offsets fit: {len(result.offsets)} pairs "
               f"(+{len(internal)} sensor-sensor)")
    click.echo(f"final loss {result.loss:.6g} after {result.iterations} evaluations")
    click.echo(f"wrote {out_path}")
    if plots:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.semilogy(result.loss_history, lw=1.2)
        ax.set_xlabel("accepted step")
        ax.set_ylabel("total squared residual")
        fig.tight_layout()
        png = os.path.splitext(out_path)[0] + "_loss.png"
        fig.savefig(png, dpi=130)
        plt.close(fig)
        click.echo(f"wrote {png}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--scenario", type=click.Choice(SCENARIOS), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--duration", type=float, default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def rangelog(config_path, scenario, seed, duration, out_path):
    """Emit the raw ranging measurement log for a scenario (no estimator)."""
    try:
        cfg = load_config(config_path, scenario=scenario, seed=seed,
                          duration=duration)
        measurements, anchors = collect_rangelog(cfg)
        write_measurement_log(out_path, measurements)
    except TensegError as exc:
        raise click.ClickException(str(exc))
    accepted = sum(1 for m in measurements if m.accepted)
    click.echo(f"wrote {out_path}: {len(measurements)} measurements "
               f"({accepted} accepted), {len(anchors)} anchors")
    anchors_path = os.path.splitext(out_path)[0] + "_anchors.yaml"
    with open(anchors_path, "w") as fh:
        yaml.safe_dump({int(k): [float(x) for x in v]
                        for k, v in anchors.items()}, fh, sort_keys=True)
    click.echo(f"wrote {anchors_path}")


if __name__ == "__main__":
    sys.exit(main())
