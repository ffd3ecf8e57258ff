"""Sigma-point machinery, measurement models, and the structure filter."""

import numpy as np
import pytest

from tenseg.dynamics import FREE_SPACE, Environment
from tenseg.errors import StreamError, ValidationError
from tenseg.structure import build_superball
from tenseg.ukf import (
    Belief,
    MeasurementBundle,
    SensorLayout,
    TensegrityFilter,
    UkfParams,
    bar_angles,
    full_angle_entries,
    initial_belief,
    measurement_model,
    predict,
    run_filter,
    sigma_points,
    unscented_estimate,
    update,
    wrap_angle,
)


def test_wrap_angle_range():
    xs = np.array([0.0, np.pi, -np.pi, 3 * np.pi, -2.5 * np.pi, 10.0])
    w = wrap_angle(xs)
    assert np.all(w > -np.pi - 1e-12) and np.all(w <= np.pi + 1e-12)
    assert w[0] == 0.0
    assert w[1] == pytest.approx(np.pi)
    np.testing.assert_allclose(np.sin(w), np.sin(xs), atol=1e-12)
    np.testing.assert_allclose(np.cos(w), np.cos(xs), atol=1e-12)


def test_bar_angles_known_orientations():
    model, nodes = build_superball()
    ang = bar_angles(model, nodes)
    # In the canonical pose bars 0-1 run along y, 2-3 along x, 4-5 along z.
    np.testing.assert_allclose(ang[0:2, 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(np.abs(ang[0:2, 1]), np.pi / 2, atol=1e-12)
    np.testing.assert_allclose(ang[2:4, 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(ang[2:4, 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(ang[4:6, 0], np.pi / 2, atol=1e-12)


def test_sigma_points_weights_and_spread():
    rng = np.random.default_rng(31)
    L = 5
    A = rng.normal(size=(L, L))
    belief = Belief(rng.normal(size=L), A @ A.T + np.eye(L))
    params = UkfParams()
    pts, wm, wc = sigma_points(belief, params)
    assert pts.shape == (L, 2 * L + 1)
    assert wm.sum() == pytest.approx(1.0)
    # The weighted sigma mean and covariance reproduce the belief.
    mean, cov, _ = unscented_estimate(pts, wm, wc)
    np.testing.assert_allclose(mean, belief.mean, atol=1e-9)
    np.testing.assert_allclose(cov, belief.cov, atol=1e-7)


def test_unscented_transform_affine_exact():
    """Affine maps: the transform must match closed form to 1e-10."""
    rng = np.random.default_rng(32)
    for trial in range(5):
        L, d = 6, 4
        A = rng.normal(size=(d, L))
        b = rng.normal(size=d)
        S = rng.normal(size=(L, L))
        belief = Belief(rng.normal(size=L), S @ S.T + 0.5 * np.eye(L))
        pts, wm, wc = sigma_points(belief, UkfParams(alpha=1.0, jitter=0.0))
        mean, cov, _ = unscented_estimate(A @ pts + b[:, None], wm, wc)
        np.testing.assert_allclose(mean, A @ belief.mean + b, atol=1e-10)
        np.testing.assert_allclose(cov, A @ belief.cov @ A.T, atol=1e-10)


def test_scalar_linear_gaussian_matches_kalman():
    """1-D linear system: sigma-point filter equals the closed-form KF."""
    rng = np.random.default_rng(33)
    a, q, r = 0.97, 0.05, 0.2
    params = UkfParams(alpha=1.0, lambda_y=q, lambda_r=r, jitter=0.0)
    x_kf, p_kf = 1.0, 2.0
    belief = Belief(np.array([1.0]), np.array([[2.0]]))
    truth = 0.8
    for _ in range(100):
        truth = a * truth + rng.normal(0, np.sqrt(q))
        z = truth + rng.normal(0, np.sqrt(r))
        # Closed form.
        x_kf, p_kf = a * x_kf, a * a * p_kf + q
        k = p_kf / (p_kf + r)
        x_kf, p_kf = x_kf + k * (z - x_kf), (1 - k) * p_kf
        # Sigma-point version with the same models.
        belief = predict(belief, lambda pts: a * pts, params,
                         noise_diag=np.array([q]))
        belief, _ = update(belief, np.array([z]), lambda pts: pts,
                           params, noise_diag=np.array([r]))
        assert belief.mean[0] == pytest.approx(x_kf, abs=1e-8)
        assert belief.cov[0, 0] == pytest.approx(p_kf, abs=1e-8)


def test_update_empty_bundle_returns_prior():
    belief = Belief(np.zeros(2), np.eye(2))
    post, info = update(belief, np.empty(0), lambda pts: pts,
                        UkfParams(), noise_diag=np.empty(0))
    assert info.skipped
    np.testing.assert_array_equal(post.mean, belief.mean)


def test_update_drops_fold_straddling_angle_rows():
    """An angle row whose sigma spread crosses the fold must not move the state."""
    params = UkfParams(alpha=1.0, lambda_theta=0.1, jitter=0.0)
    belief = Belief(np.zeros(1), np.array([[4.0]]))

    def measure(pts):
        # Angle-like row with a fold: |x| has a kink at 0 and the +-2 sigma
        # points land on opposite branches, so deviations exceed pi/2.
        return np.abs(pts) * 2.0

    post, info = update(belief, np.array([0.3]), measure, params,
                        noise_diag=np.array([0.1]),
                        angle_rows=np.array([True]))
    assert info.skipped
    np.testing.assert_array_equal(post.mean, belief.mean)


def build_filter(setting_anchors=None):
    model, nodes = build_superball()
    anchors = setting_anchors or {
        1: np.array([0.0, 0.0, 1.0]),
        2: np.array([9.0, 0.5, 2.0]),
        3: np.array([8.5, 9.0, 0.5]),
        4: np.array([0.5, 9.5, 1.5]),
        5: np.array([4.5, -0.5, 2.2]),
        6: np.array([4.0, 10.0, 0.8]),
    }
    layout = SensorLayout(
        anchors=anchors,
        node_of_module={101 + k: k for k in range(model.n)},
    )
    filt = TensegrityFilter(model, layout, FREE_SPACE,
                            params=UkfParams(pos_noise=1e-6, vel_noise=1e-4))
    return model, nodes, filt


def state_of(nodes, velocities=None):
    v = np.zeros_like(nodes) if velocities is None else velocities
    return np.concatenate([nodes.ravel(), v.ravel()])


def test_predicted_measurements_match_truth():
    model, nodes, filt = build_filter()
    pose = nodes + np.array([4.0, 4.0, 1.5])
    entries = full_angle_entries(model)
    pairs = [(1, 101), (2, 105), (101, 102), (3, 111)]
    bundle = MeasurementBundle(
        t=0.0, angle_entries=entries, angles=np.zeros(len(entries)),
        range_pairs=pairs, ranges=np.zeros(len(pairs)))
    z = measurement_model(filt, state_of(pose), bundle)
    ang = bar_angles(model, pose)
    np.testing.assert_allclose(z[:len(entries)],
                               [ang[b, c] for b, c in entries], atol=1e-12)
    # Range rows use the mounted sensor points, not the raw end caps.
    from tenseg.ranging import sensor_position

    sens = {101 + k: sensor_position(model, pose, k, filt.layout.mount_offset)
            for k in range(model.n)}
    expected = []
    for i, j in pairs:
        pi = filt.layout.anchors[i] if i in filt.layout.anchors else sens[i]
        pj = sens[j]
        expected.append(np.linalg.norm(pi - pj))
    np.testing.assert_allclose(z[len(entries):], expected, atol=1e-12)


def test_gate_bundle_drops_azimuth_near_vertical():
    model, nodes, filt = build_filter()
    pose = nodes + np.array([4.0, 4.0, 1.5])
    belief = Belief(state_of(pose), np.eye(6 * model.n) * 1e-4)
    entries = full_angle_entries(model)
    bundle = MeasurementBundle(
        t=0.0, angle_entries=entries, angles=np.zeros(len(entries)))
    gated = filt.gate_bundle(belief, bundle)
    # Bars 4 and 5 stand vertical in the canonical pose: their azimuth rows
    # (component 1) must be gone, every pitch row must survive.
    kept = set(gated.angle_entries)
    assert (4, 1) not in kept and (5, 1) not in kept
    for b in range(6):
        assert (b, 0) in kept


def test_filter_converges_from_offset_prior():
    """Static pose, exact ranges and angles: the estimate should contract."""
    model, nodes, filt = build_filter()
    pose = nodes + np.array([4.0, 4.0, 1.5])
    truth = state_of(pose)
    entries = full_angle_entries(model)
    ang = bar_angles(model, pose)
    pairs = [(a, 101 + k) for a in filt.layout.anchors for k in range(model.n)]
    bundle0 = MeasurementBundle(
        t=0.0,
        angle_entries=entries,
        angles=np.array([ang[b, c] for b, c in entries]),
        range_pairs=pairs,
        ranges=measurement_model(
            filt, truth, MeasurementBundle(t=0.0, range_pairs=pairs,
                                           ranges=np.zeros(len(pairs)))),
    )
    start = truth.copy()
    rng = np.random.default_rng(34)
    start[:3 * model.n] += rng.normal(0.0, 0.1, 3 * model.n)
    belief = Belief(start, np.diag(np.full(6 * model.n, 0.25)))
    for _ in range(8):
        belief, info = filt.update(belief, bundle0)
        assert not info.skipped
    err = np.abs(belief.mean[:3 * model.n] - truth[:3 * model.n]).max()
    assert err < 0.02


def test_run_filter_rejects_unordered_bundles():
    model, nodes, filt = build_filter()
    pose = nodes + np.array([4.0, 4.0, 1.5])
    belief = Belief(state_of(pose), np.eye(6 * model.n) * 0.01)
    bundles = [MeasurementBundle(t=1.0), MeasurementBundle(t=0.5)]
    with pytest.raises(StreamError):
        run_filter(filt, bundles, belief, t0=0.0)


def test_initial_belief_places_structure():
    model, nodes, filt = build_filter()
    pose = nodes + np.array([4.0, 4.0, 1.5])
    pairs = [(a, 101 + k) for a in filt.layout.anchors
             for k in range(model.n)]
    probe = MeasurementBundle(t=0.0, range_pairs=pairs,
                              ranges=np.zeros(len(pairs)))
    ranges = measurement_model(filt, state_of(pose), probe)
    bundle = MeasurementBundle(t=0.0, range_pairs=pairs, ranges=ranges)
    belief = initial_belief(filt, bundle, nodes, pos_var=0.5, vel_var=0.5)
    placed = belief.mean[:3 * model.n].reshape(model.n, 3)
    assert np.abs(placed - pose).max() < 1e-6
    np.testing.assert_array_equal(belief.mean[3 * model.n:], 0.0)


def test_initial_belief_needs_enough_fixes():
    model, nodes, filt = build_filter()
    bundle = MeasurementBundle(t=0.0, range_pairs=[(1, 101)],
                               ranges=np.array([3.0]))
    with pytest.raises(ValidationError):
        initial_belief(filt, bundle, nodes)


def test_bundle_shape_validation():
    with pytest.raises(ValidationError):
        MeasurementBundle(t=0.0, angle_entries=[(0, 0)], angles=np.zeros(2))
    with pytest.raises(ValidationError):
        MeasurementBundle(t=0.0, range_pairs=[(1, 2)], ranges=np.zeros(0))


def test_ukf_params_validation():
    with pytest.raises(ValidationError):
        UkfParams(alpha=0.0)
    with pytest.raises(ValidationError):
        UkfParams(lambda_r=-1.0)
    with pytest.raises(ValidationError):
        UkfParams(pos_noise=0.0)
