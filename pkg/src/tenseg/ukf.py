"""Unscented state estimation for the full structure state.

The state is every node position followed by every node velocity (6n for n
end caps). Prediction pushes scaled sigma points through the structural
integrator; the update fuses one bundle per cycle containing bar tilt
readings (pitch and azimuth per bar) and corrected distances between ranging
sensors and anchors or other sensors.

The sigma-point core is measurement-agnostic: `predict` and `update` accept
callables mapping a (L, 2L+1) column block of states to propagated states or
predicted measurements, so the same machinery runs on affine toy systems in
tests. Angle rows wrap to (-pi, pi] relative to the central sigma point, and
azimuth rows for near-vertical bars are dropped before the update because
azimuth loses meaning as the bar approaches the vertical.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dynamics import BatchState, Environment, step_batch
from .errors import (
    CovarianceDegenerateError,
    DivergenceError,
    PredictError,
    StreamError,
    ValidationError,
)
from .geometry import multilaterate, rigid_align
from .ranging import bar_partners
from .structure import TensegrityModel

TWO_PI = 2.0 * np.pi


def wrap_angle(x):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x), TWO_PI)


def bar_angles(model: TensegrityModel, positions) -> np.ndarray:
    """Per-bar (pitch, azimuth) of the axis from lower- to higher-index cap.

    pitch = atan2(u_z, |u_xy|) in [-pi/2, pi/2]; azimuth = atan2(u_y, u_x)
    in (-pi, pi]. Matches what a strut-mounted inclinometer pair reports.
    """
    N = np.asarray(positions, dtype=float)
    out = np.empty((len(model.bars), 2))
    for k, (i, j) in enumerate(model.bars):
        u = N[j] - N[i]
        out[k, 0] = np.arctan2(u[2], np.hypot(u[0], u[1]))
        out[k, 1] = np.arctan2(u[1], u[0])
    return out


@dataclass
class UkfParams:
    """Sigma-point spread and noise levels.

    lambda_y is the shared per-predict state-noise variance; pos_noise and
    vel_noise, when set, override it separately for the position and velocity
    blocks (the shared default over-inflates positions, so scenario configs
    usually split it). lambda_theta and lambda_r are the angle and range
    measurement variances.
    """

    alpha: float = 0.0139
    beta: float = 2.0
    kappa: float = 0.0
    lambda_y: float = 0.4
    lambda_theta: float = 0.1
    lambda_r: float = 0.029
    pos_noise: float | None = None
    vel_noise: float | None = None
    jitter: float = 1e-9

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValidationError("alpha must be in (0, 1]")
        if self.kappa < 0 or self.beta < 0:
            raise ValidationError("beta and kappa must be non-negative")
        for name in ("lambda_y", "lambda_theta", "lambda_r"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("pos_noise", "vel_noise"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValidationError(f"{name} must be positive when set")
        if self.jitter < 0:
            raise ValidationError("jitter must be non-negative")

    def state_noise_diag(self, n_nodes: int) -> np.ndarray:
        pos = self.lambda_y if self.pos_noise is None else self.pos_noise
        vel = self.lambda_y if self.vel_noise is None else self.vel_noise
        return np.concatenate([
            np.full(3 * n_nodes, pos), np.full(3 * n_nodes, vel)])


@dataclass
class Belief:
    """Gaussian state belief."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        L = self.mean.shape[0]
        if self.cov.shape != (L, L):
            raise ValidationError("covariance shape does not match mean")

    def copy(self) -> "Belief":
        return Belief(self.mean.copy(), self.cov.copy())

    def conditioned(self, jitter: float) -> "Belief":
        P = 0.5 * (self.cov + self.cov.T) + jitter * np.eye(len(self.mean))
        return Belief(self.mean.copy(), P)


def _safe_cholesky(P: np.ndarray, jitter: float) -> np.ndarray:
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (P + P.T))
        floor = max(jitter, 1e-12)
        P2 = (V * np.maximum(w, floor)) @ V.T
        try:
            return np.linalg.cholesky(0.5 * (P2 + P2.T) + floor * np.eye(len(P)))
        except np.linalg.LinAlgError as exc:
            raise CovarianceDegenerateError(
                "covariance is not positive definite even after flooring") from exc


def sigma_points(belief: Belief, params: UkfParams):
    """Scaled symmetric sigma set: (points (L, 2L+1), mean and cov weights)."""
    b = belief.conditioned(params.jitter)
    L = len(b.mean)
    lam = params.alpha ** 2 * (L + params.kappa) - L
    scale = L + lam
    if scale <= 0:
        raise ValidationError("alpha/kappa give a non-positive sigma scale")
    S = _safe_cholesky(scale * b.cov, params.jitter)
    pts = np.empty((L, 2 * L + 1))
    pts[:, 0] = b.mean
    pts[:, 1:L + 1] = b.mean[:, None] + S
    pts[:, L + 1:] = b.mean[:, None] - S
    wm = np.full(2 * L + 1, 1.0 / (2.0 * scale))
    wc = wm.copy()
    wm[0] = lam / scale
    wc[0] = wm[0] + 1.0 - params.alpha ** 2 + params.beta
    return pts, wm, wc


def unscented_estimate(Y: np.ndarray, wm: np.ndarray, wc: np.ndarray,
                       angle_rows: np.ndarray | None = None):
    """Weighted mean and covariance of transformed sigma points.

    Angle rows are recentered on the first column and wrapped before
    averaging so a cluster straddling +-pi does not average to zero.
    """
    ref = Y[:, :1].copy()
    D = Y - ref
    if angle_rows is not None and np.any(angle_rows):
        D[angle_rows] = wrap_angle(D[angle_rows])
    mean = ref[:, 0] + D @ wm
    dev = D - (D @ wm)[:, None]
    cov = (dev * wc) @ dev.T
    return mean, cov, dev


def predict(belief: Belief, propagate, params: UkfParams,
            noise_diag: np.ndarray | None = None) -> Belief:
    """Unscented time update. `propagate` maps state columns to state columns."""
    pts, wm, wc = sigma_points(belief, params)
    Y = np.asarray(propagate(pts), dtype=float)
    if Y.shape != pts.shape:
        raise PredictError(f"propagation changed shape {pts.shape} -> {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise PredictError("propagation produced non-finite sigma points")
    mean, cov, _ = unscented_estimate(Y, wm, wc)
    if noise_diag is not None:
        cov = cov + np.diag(noise_diag)
    return Belief(mean, cov).conditioned(params.jitter)


@dataclass
class UpdateInfo:
    """Per-update diagnostics for traces and plots."""

    n_used: int
    innovation: np.ndarray
    innovation_cov_trace: float
    skipped: bool = False


def update(belief: Belief, z: np.ndarray, measure, params: UkfParams,
           noise_diag: np.ndarray,
           angle_rows: np.ndarray | None = None):
    """Unscented measurement update; returns (posterior, UpdateInfo).

    `measure` maps state columns (L, s) to predicted measurements (d, s).
    An empty measurement vector returns the prior unchanged.

    Angle rows whose sigma-point deviations exceed pi/2 are excluded from
    the joint update. Deviations that large only happen when the sigma
    cloud straddles a parameterization fold (a bar crossing vertical under
    a wide prior); the unscented summary of such a row is meaningless and
    one poisoned row corrupts the shared gain through the innovation
    covariance.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.size == 0:
        return belief.copy(), UpdateInfo(0, z, 0.0, skipped=True)
    pts, wm, wc = sigma_points(belief, params)
    Z = np.asarray(measure(pts), dtype=float)
    if Z.shape != (z.size, pts.shape[1]):
        raise ValidationError(
            f"measurement model returned {Z.shape}, expected {(z.size, pts.shape[1])}")
    noise_diag = np.asarray(noise_diag, dtype=float)
    zmean, S, dev_z = unscented_estimate(Z, wm, wc, angle_rows=angle_rows)
    if angle_rows is not None and np.any(angle_rows):
        wild = angle_rows & (np.max(np.abs(dev_z), axis=1) > 0.5 * np.pi)
        if np.any(wild):
            keep = ~wild
            if not np.any(keep):
                return belief.copy(), UpdateInfo(0, np.empty(0), 0.0, skipped=True)
            z, Z, noise_diag = z[keep], Z[keep], noise_diag[keep]
            angle_rows = angle_rows[keep]
            zmean, S, dev_z = unscented_estimate(Z, wm, wc, angle_rows=angle_rows)
    S = S + np.diag(noise_diag)
    dev_x = pts - belief.mean[:, None]
    Pxz = (dev_x * wc) @ dev_z.T
    try:
        chol = scipy.linalg.cho_factor(S)
    except scipy.linalg.LinAlgError as exc:
        raise CovarianceDegenerateError("innovation covariance not invertible") from exc
    K = scipy.linalg.cho_solve(chol, Pxz.T).T
    innovation = z - zmean
    if angle_rows is not None and np.any(angle_rows):
        innovation[angle_rows] = wrap_angle(innovation[angle_rows])
    mean = belief.mean + K @ innovation
    cov = belief.cov - K @ S @ K.T
    post = Belief(mean, cov).conditioned(params.jitter)
    return post, UpdateInfo(z.size, innovation, float(np.trace(S)))


# -- tensegrity binding ----------------------------------------------------


@dataclass
class SensorLayout:
    """Who ranges against whom: anchor survey plus end-cap module roster."""

    anchors: dict[int, np.ndarray]
    node_of_module: dict[int, int]
    mount_offset: float = 0.1

    def __post_init__(self):
        self.anchors = {int(k): np.asarray(v, dtype=float)
                        for k, v in self.anchors.items()}
        overlap = set(self.anchors) & set(self.node_of_module)
        if overlap:
            raise ValidationError(f"module ids used for both roles: {sorted(overlap)}")


@dataclass
class MeasurementBundle:
    """One fusion cycle's worth of sensor data.

    angle_entries lists (bar_index, component) with component 0 = pitch and
    1 = azimuth, aligned with `angles`. range_pairs holds module-id pairs
    aligned with `ranges` (corrected distances).
    """

    t: float
    angle_entries: list[tuple[int, int]] = field(default_factory=list)
    angles: np.ndarray = field(default_factory=lambda: np.empty(0))
    range_pairs: list[tuple[int, int]] = field(default_factory=list)
    ranges: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.angles = np.atleast_1d(np.asarray(self.angles, dtype=float))
        self.ranges = np.atleast_1d(np.asarray(self.ranges, dtype=float))
        if len(self.angle_entries) != self.angles.size:
            raise ValidationError("angle_entries and angles disagree in length")
        if len(self.range_pairs) != self.ranges.size:
            raise ValidationError("range_pairs and ranges disagree in length")

    @property
    def size(self) -> int:
        return self.angles.size + self.ranges.size

    def vector(self) -> np.ndarray:
        return np.concatenate([self.angles, self.ranges])


def full_angle_entries(model: TensegrityModel, use_azimuth: bool = True):
    """(bar, component) rows a complete tilt readout would contain."""
    out = []
    for b in range(len(model.bars)):
        out.append((b, 0))
        if use_azimuth:
            out.append((b, 1))
    return out


class TensegrityFilter:
    """Binds the sigma-point core to the structure model and sensor layout."""

    def __init__(self, model: TensegrityModel, layout: SensorLayout,
                 env: Environment, params: UkfParams | None = None,
                 sub_dt: float = 1e-3, gimbal_limit: float = np.deg2rad(85.0)):
        self.model = model
        self.layout = layout
        self.env = env
        self.params = params or UkfParams()
        self.sub_dt = float(sub_dt)
        self.gimbal_limit = float(gimbal_limit)
        self.partners = bar_partners(model)
        self._bars = np.asarray(model.bars, dtype=int)
        self.state_dim = 6 * model.n
        if self.sub_dt <= 0:
            raise ValidationError("sub_dt must be positive")

    # -- state access ------------------------------------------------------

    def _positions(self, pts: np.ndarray) -> np.ndarray:
        """(L, s) state columns -> (n, s, 3) node positions."""
        n = self.model.n
        s = pts.shape[1]
        return pts[:3 * n].T.reshape(s, n, 3).transpose(1, 0, 2)

    def _sensor_positions(self, pos3: np.ndarray) -> np.ndarray:
        """(n, s, 3) node positions -> (n, s, 3) sensor positions."""
        axis = pos3[self.partners] - pos3
        length = np.linalg.norm(axis, axis=2, keepdims=True)
        length = np.maximum(length, 1e-9)
        return pos3 + (self.layout.mount_offset / length) * axis

    # -- model callables ----------------------------------------------------

    def propagate(self, pts: np.ndarray, rest_lengths: np.ndarray,
                  duration: float) -> np.ndarray:
        steps = max(1, int(round(duration / self.sub_dt)))
        dt = duration / steps
        batch = BatchState.from_vectors(pts, self.model.n)
        try:
            for _ in range(steps):
                batch = step_batch(self.model, batch, rest_lengths, dt, self.env)
        except DivergenceError as exc:
            raise PredictError(f"sigma propagation diverged: {exc}") from exc
        return batch.to_vectors()

    def predicted_measurements(self, pts: np.ndarray,
                               bundle: MeasurementBundle) -> np.ndarray:
        pos3 = self._positions(pts)
        s = pts.shape[1]
        rows = np.empty((bundle.size, s))
        if bundle.angles.size:
            lo, hi = self._bars[:, 0], self._bars[:, 1]
            u = pos3[hi] - pos3[lo]
            pitch = np.arctan2(u[:, :, 2], np.hypot(u[:, :, 0], u[:, :, 1]))
            azim = np.arctan2(u[:, :, 1], u[:, :, 0])
            for r, (b, comp) in enumerate(bundle.angle_entries):
                rows[r] = pitch[b] if comp == 0 else azim[b]
        if bundle.ranges.size:
            sens = self._sensor_positions(pos3)

            def locate(mid):
                if mid in self.layout.anchors:
                    return np.broadcast_to(self.layout.anchors[mid][None, :], (s, 3))
                try:
                    return sens[self.layout.node_of_module[mid]]
                except KeyError:
                    raise ValidationError(f"unknown module id {mid} in bundle")

            base = bundle.angles.size
            for r, (mi, mj) in enumerate(bundle.range_pairs):
                diff = locate(mi) - locate(mj)
                rows[base + r] = np.linalg.norm(diff, axis=1)
        return rows

    # -- filter steps --------------------------------------------------------

    def predict(self, belief: Belief, rest_lengths: np.ndarray,
                duration: float) -> Belief:
        noise = self.params.state_noise_diag(self.model.n)
        return predict(
            belief,
            lambda pts: self.propagate(pts, rest_lengths, duration),
            self.params,
            noise_diag=noise,
        )

    def gate_bundle(self, belief: Belief, bundle: MeasurementBundle) -> MeasurementBundle:
        """Drop azimuth rows of bars the prior says are nearly vertical."""
        if not bundle.angles.size:
            return bundle
        prior_angles = bar_angles(
            self.model, self._positions(belief.mean[:, None])[:, 0, :])
        keep = [k for k, (b, comp) in enumerate(bundle.angle_entries)
                if comp == 0 or abs(prior_angles[b, 0]) <= self.gimbal_limit]
        if len(keep) == bundle.angles.size:
            return bundle
        return MeasurementBundle(
            t=bundle.t,
            angle_entries=[bundle.angle_entries[k] for k in keep],
            angles=bundle.angles[keep],
            range_pairs=list(bundle.range_pairs),
            ranges=bundle.ranges.copy(),
        )

    def update(self, belief: Belief, bundle: MeasurementBundle):
        bundle = self.gate_bundle(belief, bundle)
        if bundle.size == 0:
            return belief.copy(), UpdateInfo(0, np.empty(0), 0.0, skipped=True)
        noise = np.concatenate([
            np.full(bundle.angles.size, self.params.lambda_theta),
            np.full(bundle.ranges.size, self.params.lambda_r),
        ])
        angle_rows = np.zeros(bundle.size, dtype=bool)
        angle_rows[:bundle.angles.size] = True
        return update(
            belief, bundle.vector(),
            lambda pts: self.predicted_measurements(pts, bundle),
            self.params, noise, angle_rows=angle_rows,
        )


def measurement_model(filt: TensegrityFilter, state: np.ndarray,
                      bundle: MeasurementBundle) -> np.ndarray:
    """Predicted measurement vector for a single state."""
    state = np.asarray(state, dtype=float)
    return filt.predicted_measurements(state[:, None], bundle)[:, 0]


@dataclass
class FilterTrace:
    """Fixed-rate record of the filter run."""

    times: np.ndarray
    means: np.ndarray
    cov_traces: np.ndarray
    innovation_rms: np.ndarray
    n_measurements: np.ndarray
    updated: np.ndarray

    def node_positions(self, n_nodes: int) -> np.ndarray:
        """(K, n, 3) estimated node tracks."""
        return self.means[:, :3 * n_nodes].reshape(len(self.times), n_nodes, 3)


def run_filter(
    filt: TensegrityFilter,
    bundles: list[MeasurementBundle],
    initial: Belief,
    t0: float,
    control=None,
) -> FilterTrace:
    """Alternate predict-to-bundle-time and update over a bundle stream.

    `control` maps time to the commanded rest-length vector; None plays the
    model's nominal rest lengths. Each propagation interval holds the
    command sampled at its start (the last one the estimator has actually
    seen), so the estimate trails the plant slightly during actuation.
    Updates that hit a degenerate innovation covariance are skipped with a
    warning (prior carried forward) and flagged in the trace.
    """
    if len(initial.mean) != filt.state_dim:
        raise ValidationError("initial belief does not match the state dimension")
    belief = initial.copy()
    t_prev = t0
    times, means, traces, innov, counts, flags = [], [], [], [], [], []
    for bundle in bundles:
        if bundle.t < t_prev - 1e-12:
            raise StreamError(
                f"bundle at t={bundle.t} arrived after t={t_prev}")
        duration = bundle.t - t_prev
        rest = filt.model.rest_length if control is None else control(t_prev)
        if duration > 1e-12:
            belief = filt.predict(belief, rest, duration)
        try:
            belief, info = filt.update(belief, bundle)
        except CovarianceDegenerateError:
            warnings.warn(
                f"update at t={bundle.t:.3f} skipped: degenerate innovation "
                "covariance; carrying the prior forward", RuntimeWarning)
            info = UpdateInfo(0, np.empty(0), 0.0, skipped=True)
        t_prev = bundle.t
        times.append(bundle.t)
        means.append(belief.mean.copy())
        traces.append(float(np.trace(belief.cov)))
        innov.append(float(np.sqrt(np.mean(info.innovation ** 2)))
                     if info.innovation.size else np.nan)
        counts.append(info.n_used)
        flags.append(not info.skipped)
    return FilterTrace(
        times=np.asarray(times),
        means=np.asarray(means) if means else np.empty((0, filt.state_dim)),
        cov_traces=np.asarray(traces),
        innovation_rms=np.asarray(innov),
        n_measurements=np.asarray(counts, dtype=int),
        updated=np.asarray(flags, dtype=bool),
    )


def initial_belief(
    filt: TensegrityFilter,
    bundle: MeasurementBundle,
    nominal_nodes: np.ndarray,
    pos_var: float = 1.0,
    vel_var: float = 1.0,
    min_ranges: int = 4,
) -> Belief:
    """Bootstrap belief: multilaterate enough sensors, rigid-fit the rest.

    Each robot sensor with at least `min_ranges` anchor ranges in the bundle
    gets a point fix; a proper rigid transform then maps the nominal shape
    onto those fixes and seeds the node positions. Velocities start at zero.
    """
    anchors = filt.layout.anchors
    fixes, nodes = [], []
    for mid, node in filt.layout.node_of_module.items():
        sel = [(pair, r) for pair, r in zip(bundle.range_pairs, bundle.ranges)
               if (pair[0] in anchors and pair[1] == mid)
               or (pair[1] in anchors and pair[0] == mid)]
        if len(sel) < min_ranges:
            continue
        apos = np.array([anchors[p[0] if p[0] in anchors else p[1]] for p, _ in sel])
        dists = np.array([r for _, r in sel])
        fixes.append(multilaterate(apos, dists))
        nodes.append(node)
    if len(fixes) < 3:
        raise ValidationError(
            f"only {len(fixes)} sensors have {min_ranges}+ anchor ranges; "
            "cannot anchor the initial pose")
    nominal = np.asarray(nominal_nodes, dtype=float)
    partners = filt.partners
    off = filt.layout.mount_offset
    nominal_sensors = []
    for node in nodes:
        axis = nominal[partners[node]] - nominal[node]
        nominal_sensors.append(nominal[node] + off * axis / np.linalg.norm(axis))
    R, tvec = rigid_align(np.asarray(nominal_sensors), np.asarray(fixes))
    placed = nominal @ R.T + tvec
    mean = np.concatenate([placed.ravel(), np.zeros(placed.size)])
    cov = np.diag(np.concatenate([
        np.full(placed.size, pos_var), np.full(placed.size, vel_var)]))
    return Belief(mean, cov)
