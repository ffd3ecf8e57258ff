"""Force laws, contact, integrator behavior, and batch propagation."""

import numpy as np
import pytest

from tenseg.dynamics import (
    FREE_SPACE,
    BatchState,
    Environment,
    GroundModel,
    StateVector,
    apply_commands,
    force_densities,
    ground_forces,
    member_nodal_forces,
    settle,
    step,
    step_batch,
)
from tenseg.errors import ValidationError
from tenseg.structure import build_superball, member_geometry


def test_slack_cable_carries_no_force():
    model, nodes = build_superball()
    geo = member_geometry(model, nodes)
    # Pretend every cable has a rest length longer than its current length.
    rest = model.rest_length.copy()
    rest[model.is_cable] = geo.L[model.is_cable] * 1.5
    q = force_densities(model, geo.L, geo.Ldot, rest)
    assert np.all(q[model.is_cable] == 0.0)
    # Bars in the same situation push (negative density).
    assert np.all(q[model.is_bar] < 0.0)


def test_damping_dissipates_through_sign():
    """A lengthening member must pull harder than its static tension."""
    model, nodes = build_superball()
    geo = member_geometry(model, nodes)
    k = int(model.actuated_indices[0])
    Ldot = np.zeros(model.m)
    q0 = force_densities(model, geo.L, Ldot, model.rest_length)[k]
    Ldot[k] = 0.5
    q1 = force_densities(model, geo.L, Ldot, model.rest_length)[k]
    assert q1 > q0


def test_member_forces_balance():
    """Internal forces sum to zero over the nodes, always."""
    model, nodes = build_superball()
    rng = np.random.default_rng(5)
    pos = nodes + rng.normal(0.0, 0.05, nodes.shape)
    vel = rng.normal(0.0, 0.2, nodes.shape)
    geo = member_geometry(model, pos, vel)
    q = force_densities(model, geo.L, geo.Ldot, model.rest_length)
    F = member_nodal_forces(model, q, geo.U)
    np.testing.assert_allclose(F.sum(axis=0), np.zeros(3), atol=1e-10)


def test_ground_forces_inactive_above_plane():
    g = GroundModel()
    pos = np.array([[0.0, 0.0, 0.5]])
    vel = np.zeros((1, 3))
    F = ground_forces(pos, vel, g)
    np.testing.assert_array_equal(F, np.zeros((1, 3)))


def test_ground_normal_force_clamped_nonnegative():
    g = GroundModel(stiffness=1e4, damping=100.0)
    pos = np.array([[0.0, 0.0, -0.001]])
    # Rapid upward escape: damping would make the normal force negative.
    vel = np.array([[0.0, 0.0, 5.0]])
    F = ground_forces(pos, vel, g)
    assert F[0, 2] == 0.0


def test_ground_friction_opposes_slip_and_caps():
    g = GroundModel(mu=0.5, stiffness=1e4, damping=0.0, v_eps=0.05)
    pos = np.array([[0.0, 0.0, -0.01]])
    vel = np.array([[2.0, 0.0, 0.0]])
    F = ground_forces(pos, vel, g)
    f_n = 1e4 * 0.01
    assert F[0, 0] == pytest.approx(-0.5 * f_n)
    assert F[0, 1] == 0.0
    # Below v_eps the tangential force ramps linearly instead.
    vel2 = np.array([[0.01, 0.0, 0.0]])
    F2 = ground_forces(pos, vel2, g)
    assert abs(F2[0, 0]) < 0.5 * f_n
    assert F2[0, 0] == pytest.approx(-0.5 * f_n * 0.01 / 0.05)


def test_step_rejects_bad_dt():
    model, nodes = build_superball()
    state = StateVector(nodes, np.zeros_like(nodes))
    with pytest.raises(ValidationError):
        step(model, state, None, 0.0, FREE_SPACE)


def test_energy_conservation_free_space():
    """Undamped, gravity-free, no contact: total energy drifts < 0.1%."""
    model, nodes = build_superball(bar_damping=0.0, cable_damping=0.0)
    rng = np.random.default_rng(11)
    pos = nodes + rng.normal(0.0, 0.01, nodes.shape)
    vel = rng.normal(0.0, 0.05, nodes.shape)
    state = StateVector(pos, vel)

    def energy(s):
        geo = member_geometry(model, s.positions)
        stretch = geo.L - model.rest_length
        taut = model.is_bar | (stretch > 0)
        pe = 0.5 * np.sum(model.stiffness[taut] * stretch[taut] ** 2)
        ke = 0.5 * np.sum(model.masses[:, None] * s.velocities ** 2)
        return pe + ke

    e0 = energy(state)
    for _ in range(10_000):
        state = step(model, state, None, 1e-3, FREE_SPACE)
    drift = abs(energy(state) - e0) / e0
    assert drift < 1e-3


def test_momentum_conservation_free_space():
    model, nodes = build_superball(bar_damping=0.0, cable_damping=0.0)
    rng = np.random.default_rng(12)
    vel = rng.normal(0.0, 0.05, nodes.shape) + np.array([0.1, 0.05, 0.02])
    state = StateVector(nodes.copy(), vel)
    p0 = (model.masses[:, None] * state.velocities).sum(axis=0)
    for _ in range(10_000):
        state = step(model, state, None, 1e-3, FREE_SPACE)
    p1 = (model.masses[:, None] * state.velocities).sum(axis=0)
    assert np.linalg.norm(p1 - p0) / np.linalg.norm(p0) < 1e-9


def test_batch_matches_single_stepping():
    """Propagating 25 states in one batch equals 25 single runs."""
    model, nodes = build_superball()
    env = Environment()
    rng = np.random.default_rng(3)
    states = []
    for _ in range(25):
        pos = nodes + rng.normal(0.0, 0.05, nodes.shape)
        pos[:, 2] += rng.uniform(-0.05, 0.6)
        vel = rng.normal(0.0, 0.3, nodes.shape)
        states.append(StateVector(pos, vel))
    batch = BatchState.from_states(states)
    for _ in range(40):
        batch = step_batch(model, batch, None, 1e-3, env)
        states = [step(model, s, None, 1e-3, env) for s in states]
    for i, s in enumerate(states):
        b = batch.block(i)
        np.testing.assert_allclose(b.positions, s.positions, atol=1e-12, rtol=0.0)
        np.testing.assert_allclose(b.velocities, s.velocities, atol=1e-12, rtol=0.0)


def test_batch_vector_roundtrip():
    model, nodes = build_superball()
    rng = np.random.default_rng(9)
    Y = rng.normal(size=(6 * model.n, 7))
    batch = BatchState.from_vectors(Y, model.n)
    np.testing.assert_array_equal(batch.to_vectors(), Y)
    one = batch.block(3)
    np.testing.assert_array_equal(one.as_vector(), Y[:, 3])


def test_apply_commands_rate_limit():
    model, _ = build_superball()
    k = int(model.actuated_indices[0])
    rest = model.rest_length.copy()
    target = rest[k] * 0.5
    out = apply_commands(model, rest, {k: target}, dt=0.01, max_spool_rate=0.15)
    assert out[k] == pytest.approx(rest[k] - 0.15 * 0.01)
    # Repeated application converges onto the target, never past it.
    for _ in range(3000):
        out = apply_commands(model, out, {k: target}, dt=0.01)
    assert out[k] == pytest.approx(target)


def test_apply_commands_rejects_unactuated():
    model, _ = build_superball()
    with pytest.raises(ValidationError):
        apply_commands(model, model.rest_length, {0: 1.0}, dt=0.01)


def test_settle_comes_to_rest_on_ground():
    model, nodes = build_superball()
    start = nodes.copy()
    start[:, 2] += 0.6 - start[:, 2].min()
    env = Environment()
    state = settle(model, StateVector(start, np.zeros_like(start)), env,
                   dt=1e-3, duration=4.0)
    speed = np.linalg.norm(state.velocities, axis=1).max()
    assert speed < 1e-3
    assert state.positions[:, 2].min() > -0.01
