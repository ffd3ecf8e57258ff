"""Scoring for scenario runs: tracking error, ground faces, lag, recovery."""

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricsError
from .structure import cable_triangles


def rms_per_endcap(times, truth, est, settle: float):
    """Post-settle 3-D position RMS per end cap.

    truth and est are (K, n, 3) on the same clock; the settle cutoff is in
    run time (seconds from scenario start).
    """
    times = np.asarray(times, dtype=float)
    mask = times >= settle
    if not np.any(mask):
        raise MetricsError(
            f"no samples after the settle window (last t={times[-1] if times.size else 'n/a'})")
    err = np.linalg.norm(np.asarray(est)[mask] - np.asarray(truth)[mask], axis=2)
    per = np.sqrt(np.mean(err ** 2, axis=0))
    return {k: float(v) for k, v in enumerate(per)}, float(np.sqrt(np.mean(err ** 2)))


def face_series(model, tracks, hysteresis: float = 0.02) -> np.ndarray:
    """Ground-face index over time: lowest triangle with switch hysteresis.

    Faces are the model's closed cable triangles; the detected face flips
    only when a rival triangle sits at least `hysteresis` meters lower than
    the current one, which keeps contact chatter out of the transition list.
    """
    tris = cable_triangles(model)
    if not tris:
        raise MetricsError("model has no closed cable triangles to stand on")
    tracks = np.asarray(tracks, dtype=float)
    tri_idx = np.asarray(tris, dtype=int)          # (F, 3)
    z = tracks[:, :, 2]                            # (K, n)
    score = z[:, tri_idx].mean(axis=2)             # (K, F)
    out = np.empty(len(tracks), dtype=int)
    current = int(np.argmin(score[0]))
    for k in range(len(tracks)):
        best = int(np.argmin(score[k]))
        if best != current and score[k, best] < score[k, current] - hysteresis:
            current = best
        out[k] = current
    return out


def transition_list(times, faces):
    """[(t, old_face, new_face)] whenever the detected face changes."""
    times = np.asarray(times, dtype=float)
    faces = np.asarray(faces, dtype=int)
    out = []
    for k in range(1, len(faces)):
        if faces[k] != faces[k - 1]:
            out.append((float(times[k]), int(faces[k - 1]), int(faces[k])))
    return out


def match_transitions(true_transitions, est_transitions, tol: float = 1.0):
    """Greedy match of detected transitions to true ones within tol seconds.

    A true transition counts as detected when an estimated transition to the
    same face lands within the window; each estimate is consumed once.
    """
    unused = list(est_transitions)
    matched = []
    for t, _, face in true_transitions:
        hit = None
        for cand in unused:
            if cand[2] == face and abs(cand[0] - t) <= tol:
                hit = cand
                break
        if hit is not None:
            unused.remove(hit)
        matched.append((t, face, hit is not None,
                        float(hit[0] - t) if hit else float("nan")))
    all_found = all(ok for _, _, ok, _ in matched)
    return all_found, matched


def estimate_lag(times, truth_signal, est_signal) -> float:
    """Cross-correlation lag in seconds; positive means the estimate trails.

    Signals are mean-detrended before correlating, so slow tracking offsets
    do not drown the phase information. The peak is refined by fitting a
    parabola through its two neighbors, which resolves lags well below the
    sample spacing (the spacing here is a whole fusion period).
    """
    t = np.asarray(times, dtype=float)
    a = np.asarray(est_signal, dtype=float)
    v = np.asarray(truth_signal, dtype=float)
    if a.size != v.size or a.size < 3:
        raise MetricsError("lag needs two aligned signals with 3+ samples")
    dt = float(np.median(np.diff(t)))
    a = a - a.mean()
    v = v - v.mean()
    corr = np.correlate(a, v, mode="full")
    k = int(np.argmax(corr))
    shift = 0.0
    if 0 < k < corr.size - 1:
        y0, y1, y2 = corr[k - 1], corr[k], corr[k + 1]
        denom = y0 - 2.0 * y1 + y2
        if abs(denom) > 1e-300:
            shift = float(np.clip(0.5 * (y0 - y2) / denom, -0.5, 0.5))
    return (k - (v.size - 1) + shift) * dt


def com_error(truth, est) -> np.ndarray:
    """Center-of-mass distance between estimate and truth per step."""
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    return np.linalg.norm(est.mean(axis=1) - truth.mean(axis=1), axis=1)


def recovery_time(times, err, t_event: float, threshold: float,
                  hold: float = 1.0):
    """Seconds from t_event until err stays below threshold for `hold` s.

    Returns None if the series never recovers inside the trace.
    """
    times = np.asarray(times, dtype=float)
    err = np.asarray(err, dtype=float)
    after = times >= t_event
    if not np.any(after):
        raise MetricsError("event time lies beyond the trace")
    t_after = times[after]
    e_after = err[after]
    ok = e_after <= threshold
    start = None
    for k in range(len(t_after)):
        if ok[k]:
            if start is None:
                start = t_after[k]
            if t_after[k] - start >= hold:
                return float(start - t_event)
        else:
            start = None
    return None


@dataclass
class RunMetrics:
    """Everything the acceptance checks and reports read off one run."""

    rms_per_endcap: dict
    rms_overall: float
    settle: float
    mean_cov_trace: float
    max_cov_trace: float
    accept_rate: float
    com_rms: float
    transitions_true: list = field(default_factory=list)
    transitions_est: list = field(default_factory=list)
    transitions_matched: bool = True
    transition_details: list = field(default_factory=list)
    lag_seconds: float | None = None
    driven_rms: float | None = None
    quiet_rms: float | None = None
    recovery_seconds: float | None = None

    def rows(self):
        """Flat (name, value) pairs in a stable order for CSV export."""
        out = [
            ("rms_overall", self.rms_overall),
            ("com_rms", self.com_rms),
            ("settle", self.settle),
            ("mean_cov_trace", self.mean_cov_trace),
            ("max_cov_trace", self.max_cov_trace),
            ("accept_rate", self.accept_rate),
            ("transitions_true", len(self.transitions_true)),
            ("transitions_est", len(self.transitions_est)),
            ("transitions_matched", int(self.transitions_matched)),
        ]
        for k in sorted(self.rms_per_endcap):
            out.append((f"rms_endcap_{k}", self.rms_per_endcap[k]))
        if self.lag_seconds is not None:
            out.append(("lag_seconds", self.lag_seconds))
        if self.driven_rms is not None:
            out.append(("driven_rms", self.driven_rms))
        if self.quiet_rms is not None:
            out.append(("quiet_rms", self.quiet_rms))
        if self.recovery_seconds is not None:
            out.append(("recovery_seconds", self.recovery_seconds))
        return out


def compute_metrics(run, settle: float | None = None,
                    hysteresis: float = 0.02) -> RunMetrics:
    """Score a ScenarioRun: RMS, covariance, faces, and scenario extras."""
    cfg = run.config
    settle = cfg.settle if settle is None else settle
    per, overall = rms_per_endcap(run.times, run.truth_nodes, run.est_nodes, settle)
    post = run.times >= settle
    com = com_error(run.truth_nodes, run.est_nodes)

    faces_true = face_series(run.model, run.truth_nodes, hysteresis)
    faces_est = face_series(run.model, run.est_nodes, hysteresis)
    tr_true = transition_list(run.times, faces_true)
    tr_est = transition_list(run.times, faces_est)
    matched, details = match_transitions(tr_true, tr_est)

    metrics = RunMetrics(
        rms_per_endcap=per,
        rms_overall=overall,
        settle=float(settle),
        mean_cov_trace=float(np.mean(run.cov_traces[post])),
        max_cov_trace=float(np.max(run.cov_traces[post])),
        accept_rate=float(run.accept_rate),
        com_rms=float(np.sqrt(np.mean(com[post] ** 2))),
        transitions_true=tr_true,
        transitions_est=tr_est,
        transitions_matched=matched,
        transition_details=details,
    )

    if run.driven_node is not None:
        metrics.driven_rms = per[run.driven_node]
        metrics.quiet_rms = per[run.quiet_node]
        # Lag on the driven end cap's dominant motion axis.
        sig_t = run.truth_nodes[:, run.driven_node]
        sig_e = run.est_nodes[:, run.driven_node]
        axis = int(np.argmax(np.var(sig_t[post], axis=0)))
        metrics.lag_seconds = estimate_lag(
            run.times[post], sig_t[post, axis], sig_e[post, axis])

    if cfg.spurious_imu_time is not None:
        err = np.linalg.norm(run.est_nodes - run.truth_nodes, axis=2).mean(axis=1)
        before = (run.times >= cfg.spurious_imu_time - 5.0) \
            & (run.times < cfg.spurious_imu_time)
        if np.any(before):
            baseline = float(err[before].mean() + 3.0 * err[before].std() + 1e-3)
            metrics.recovery_seconds = recovery_time(
                run.times, err, cfg.spurious_imu_time, baseline)
    return metrics
