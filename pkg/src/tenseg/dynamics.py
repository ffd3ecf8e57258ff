"""Spring-mass tensegrity dynamics.

Members act as Hooke springs with viscous damping expressed as force
densities (force per unit length):

    q_k = K_k (1 - L0_k / L_k) - (c_k / L_k) Ldot_k

Cables are unilateral: whenever the total cable tension
K_k (L_k - L0_k) - c_k Ldot_k would go negative the member is slack and
q_k = 0, so damping can never push a cable into compression. Nodal forces
assemble through the connectivity matrix; with the tension-positive sign
convention used here the assembled force pulls member endpoints together,

    F_m = -C^T diag(q) C N,

and nodal accelerations are M^{-1} (F_m + F_g) minus gravity (+z up).
Integration is fixed-step RK4. Batches of states propagate as column-wise
concatenations of N matrices so a whole sigma-point set advances in a
handful of matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, DivergenceError, ValidationError
from .structure import TensegrityModel

GRAVITY = 9.81


@dataclass
class StateVector:
    """Nodal positions and velocities; flattens to y in R^{6n}."""

    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if self.positions.shape != self.velocities.shape or self.positions.shape[1:] != (3,):
            raise ValidationError("state arrays must both have shape (n, 3)")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def as_vector(self) -> np.ndarray:
        """Stack positions then velocities, row-major: [x0 y0 z0 x1 ... vz_n]."""
        return np.concatenate([self.positions.ravel(), self.velocities.ravel()])

    @classmethod
    def from_vector(cls, y, n: int) -> "StateVector":
        y = np.asarray(y, dtype=float)
        if y.shape != (6 * n,):
            raise ValidationError(f"state vector has shape {y.shape}, expected ({6 * n},)")
        return cls(y[: 3 * n].reshape(n, 3).copy(), y[3 * n :].reshape(n, 3).copy())

    def copy(self) -> "StateVector":
        return StateVector(self.positions.copy(), self.velocities.copy())


@dataclass
class BatchState:
    """l states packed column-wise: positions and velocities are (n, 3l)."""

    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if self.positions.shape != self.velocities.shape:
            raise ValidationError("batch position/velocity shapes differ")
        if self.positions.ndim != 2 or self.positions.shape[1] % 3 != 0:
            raise ValidationError("batch column count must be a multiple of 3")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def size(self) -> int:
        return self.positions.shape[1] // 3

    def block(self, i: int) -> StateVector:
        sl = slice(3 * i, 3 * i + 3)
        return StateVector(self.positions[:, sl].copy(), self.velocities[:, sl].copy())

    @classmethod
    def from_states(cls, states) -> "BatchState":
        pos = np.hstack([s.positions for s in states])
        vel = np.hstack([s.velocities for s in states])
        return cls(pos, vel)

    @classmethod
    def from_vectors(cls, Y, n: int) -> "BatchState":
        """Columns of Y (6n, l) are stacked state vectors."""
        Y = np.asarray(Y, dtype=float)
        l = Y.shape[1]
        pos = Y[: 3 * n].T.reshape(l, n, 3).transpose(1, 0, 2).reshape(n, 3 * l)
        vel = Y[3 * n :].T.reshape(l, n, 3).transpose(1, 0, 2).reshape(n, 3 * l)
        return cls(pos.copy(), vel.copy())

    def to_vectors(self) -> np.ndarray:
        """(6n, l) matrix whose columns are state vectors."""
        n, l = self.n, self.size
        pos = self.positions.reshape(n, l, 3).transpose(1, 0, 2).reshape(l, 3 * n).T
        vel = self.velocities.reshape(n, l, 3).transpose(1, 0, 2).reshape(l, 3 * n).T
        return np.vstack([pos, vel])


@dataclass
class GroundModel:
    """Penalty-based flat ground with regularized Coulomb friction.

    Normal force on a penetrating node: k (z0 - z) - c zdot, clamped at
    zero. Tangential force opposes sliding, capped at mu times the normal
    force, and ramps linearly for slip speeds below v_eps so the force
    field stays continuous.
    """

    height: float = 0.0
    mu: float = 0.6
    stiffness: float = 2.0e4
    damping: float = 100.0
    # The friction ramp acts as a viscous element with coefficient
    # mu*f_n/v_eps near zero slip. Keep v_eps large enough that explicit
    # RK4 stays stable for every integrator step size used on contact-rich
    # states (sigma-point batches included); 0.05 m/s holds up to ~2 ms.
    v_eps: float = 0.05

    def __post_init__(self):
        if self.mu < 0 or self.stiffness <= 0 or self.damping < 0 or self.v_eps <= 0:
            raise ValidationError("invalid ground parameters")


@dataclass
class Environment:
    """World the structure lives in: gravity plus an optional ground plane."""

    gravity: float = GRAVITY
    ground: GroundModel | None = field(default_factory=GroundModel)


FREE_SPACE = Environment(gravity=0.0, ground=None)


def _per_member(arr, L):
    # Broadcast an (m,) member constant against L of shape (m,) or (m, l).
    return arr if L.ndim == 1 else arr[:, None]


def force_densities(model: TensegrityModel, L, Ldot, rest_lengths) -> np.ndarray:
    """Member force densities q (N/m), tension positive, slack cables at zero.

    L and Ldot may be (m,) or batched (m, l); rest_lengths is always (m,).
    """
    L = np.asarray(L, dtype=float)
    Ldot = np.asarray(Ldot, dtype=float)
    L0 = np.asarray(rest_lengths, dtype=float)
    if np.any(L <= 0):
        raise DegenerateGeometryError("member length must be positive")
    if np.any(L0 <= 0):
        raise ValidationError("rest lengths must be positive")
    K = _per_member(model.stiffness, L)
    c = _per_member(model.damping, L)
    # Tension-positive q with force -C^T diag(q) C N: a lengthening member
    # (Ldot > 0) must pull harder for the damper to dissipate.
    q = K * (1.0 - _per_member(L0, L) / L) + c * Ldot / L
    cable = _per_member(model.is_cable, L)
    return np.where(cable & (q < 0.0), 0.0, q)


def member_nodal_forces(model: TensegrityModel, q, U) -> np.ndarray:
    """Assemble nodal forces from force densities: -C^T diag(q) U.

    With tension-positive q the force on each endpoint points toward the
    member's other end (a taut cable pulls its nodes together).
    """
    q = np.asarray(q, dtype=float)
    U = np.asarray(U, dtype=float)
    if U.ndim == 2 and q.ndim == 1:
        return -model.C.T @ (q[:, None] * U)
    # Batched: U is (m, l, 3), q is (m, l).
    m, l, _ = U.shape
    return -(model.C.T @ (q[:, :, None] * U).reshape(m, 3 * l)).reshape(model.n, l, 3)


def ground_forces(positions, velocities, ground: GroundModel | None) -> np.ndarray:
    """Contact forces per node; zero for nodes at or above the ground plane.

    Accepts (n, 3) or batched (n, l, 3) arrays.
    """
    pos = np.asarray(positions, dtype=float)
    vel = np.asarray(velocities, dtype=float)
    F = np.zeros_like(pos)
    if ground is None:
        return F
    z = pos[..., 2]
    below = z < ground.height
    if not np.any(below):
        return F
    f_n = ground.stiffness * (ground.height - z) - ground.damping * vel[..., 2]
    f_n = np.where(below, np.maximum(f_n, 0.0), 0.0)
    vx, vy = vel[..., 0], vel[..., 1]
    slip = np.hypot(vx, vy)
    # mu * f_n / max(slip, v_eps): full Coulomb cap above v_eps, linear below.
    scale = ground.mu * f_n / np.maximum(slip, ground.v_eps)
    F[..., 0] = -scale * vx
    F[..., 1] = -scale * vy
    F[..., 2] = f_n
    return F


def accelerations(model: TensegrityModel, F_m, F_g, gravity: float = GRAVITY) -> np.ndarray:
    """Row-wise (F_m + F_g) / mass minus the gravity vector (0, 0, gravity)."""
    F = np.asarray(F_m, dtype=float) + np.asarray(F_g, dtype=float)
    if F.ndim == 2:
        acc = F / model.masses[:, None]
    else:
        acc = F / model.masses[:, None, None]
    acc[..., 2] -= gravity
    return acc


def _derivatives(model, pos3, vel3, rest_lengths, env):
    """Batched acceleration evaluation on (n, l, 3) position/velocity arrays."""
    lo, hi = model.pairs[:, 0], model.pairs[:, 1]
    U = pos3[lo] - pos3[hi]
    V = vel3[lo] - vel3[hi]
    L = np.sqrt(np.einsum("mlk,mlk->ml", U, U))
    Ldot = np.einsum("mlk,mlk->ml", U, V) / L
    K = model.stiffness[:, None]
    c = model.damping[:, None]
    q = K * (1.0 - rest_lengths[:, None] / L) + c * Ldot / L
    q = np.where(model.is_cable[:, None] & (q < 0.0), 0.0, q)
    m, l, _ = U.shape
    F = -(model.C.T @ (q[:, :, None] * U).reshape(m, 3 * l)).reshape(model.n, l, 3)
    F += ground_forces(pos3, vel3, env.ground)
    acc = F / model.masses[:, None, None]
    acc[..., 2] -= env.gravity
    return acc


def step_batch(
    model: TensegrityModel,
    batch: BatchState,
    rest_lengths,
    dt: float,
    env: Environment,
) -> BatchState:
    """One fixed-step RK4 step for every column block of the batch.

    All blocks share the same member rest lengths (the control input).
    Raises DivergenceError naming the first non-finite block.
    """
    if dt <= 0:
        raise ValidationError("dt must be positive")
    rest = model.rest_length if rest_lengths is None else np.asarray(rest_lengths, dtype=float)
    n, l = batch.n, batch.size
    p = batch.positions.reshape(n, l, 3)
    v = batch.velocities.reshape(n, l, 3)

    k1v = _derivatives(model, p, v, rest, env)
    p2 = p + (0.5 * dt) * v
    v2 = v + (0.5 * dt) * k1v
    k2v = _derivatives(model, p2, v2, rest, env)
    p3 = p + (0.5 * dt) * v2
    v3 = v + (0.5 * dt) * k2v
    k3v = _derivatives(model, p3, v3, rest, env)
    p4 = p + dt * v3
    v4 = v + dt * k3v
    k4v = _derivatives(model, p4, v4, rest, env)

    new_p = p + (dt / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
    new_v = v + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)

    finite = np.isfinite(new_p).all(axis=(0, 2)) & np.isfinite(new_v).all(axis=(0, 2))
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise DivergenceError(f"non-finite state in batch block {bad}; reduce dt")
    return BatchState(new_p.reshape(n, 3 * l), new_v.reshape(n, 3 * l))


def step(
    model: TensegrityModel,
    state: StateVector,
    rest_lengths,
    dt: float,
    env: Environment,
) -> StateVector:
    """Advance a single state by one RK4 step (batch of size one)."""
    batch = BatchState(state.positions.copy(), state.velocities.copy())
    return step_batch(model, batch, rest_lengths, dt, env).block(0)


def apply_commands(
    model: TensegrityModel,
    rest_lengths,
    commands: dict[int, float] | None,
    dt: float,
    max_spool_rate: float = 0.15,
) -> np.ndarray:
    """Move actuated rest lengths toward commanded targets, rate limited.

    ``commands`` maps member index to target rest length (m). Only actuated
    members may be commanded; targets must be positive. Uncommanded and
    non-actuated members keep their current rest length.
    """
    rest = np.asarray(rest_lengths, dtype=float).copy()
    if not commands:
        return rest
    budget = max_spool_rate * dt
    for idx, target in commands.items():
        if not model.actuated[idx]:
            raise ValidationError(f"member {idx} is not actuated")
        if target <= 0:
            raise ValidationError(f"commanded rest length must be positive, got {target}")
        delta = np.clip(target - rest[idx], -budget, budget)
        rest[idx] += delta
    return rest


def settle(
    model: TensegrityModel,
    state: StateVector,
    env: Environment,
    dt: float = 1e-3,
    duration: float = 5.0,
    rest_lengths=None,
) -> StateVector:
    """Integrate with no actuation changes until transients die down."""
    current = state
    for _ in range(int(round(duration / dt))):
        current = step(model, current, rest_lengths, dt, env)
    return current
