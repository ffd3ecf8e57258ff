"""Tensegrity topology and geometric kinematics.

A structure is described by an incidence ("connectivity") matrix C of shape
(m, n): row k carries +1 at the member's lower node index and -1 at the
higher one, so the member vector matrix is U = C @ N for nodal positions N
(n, 3). Member lengths, relative velocities, and length rates all derive
from U and V = C @ dN/dt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import DegenerateGeometryError, ValidationError

BAR = "bar"
CABLE = "cable"

# Endpoints closer than this are treated as coincident (degenerate).
LENGTH_EPS = 1e-9


@dataclass
class TensegrityModel:
    """Immutable-by-convention description of a tensegrity structure.

    Attributes
    ----------
    pairs : (m, 2) int array
        Member endpoints, ordered (lower, higher) node index.
    kinds : list of str
        "bar" or "cable" per member.
    stiffness, damping, rest_length : (m,) float arrays
        Hooke constant K_k (N/m), viscous constant c_k (N s/m), and
        unstretched length L0_k (m).
    actuated : (m,) bool array
        True for cables whose rest length may be commanded.
    masses : (n,) float array
        Point mass at each node (kg).
    """

    pairs: np.ndarray
    kinds: list[str]
    stiffness: np.ndarray
    damping: np.ndarray
    rest_length: np.ndarray
    actuated: np.ndarray
    masses: np.ndarray
    C: np.ndarray = field(init=False)
    is_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=int)
        self.stiffness = np.asarray(self.stiffness, dtype=float)
        self.damping = np.asarray(self.damping, dtype=float)
        self.rest_length = np.asarray(self.rest_length, dtype=float)
        self.actuated = np.asarray(self.actuated, dtype=bool)
        self.masses = np.asarray(self.masses, dtype=float)
        self.is_bar = np.array([k == BAR for k in self.kinds])
        self.C = connectivity_matrix(self.pairs, self.n)
        problems = validate_model(self)
        if problems:
            raise ValidationError("; ".join(problems))

    @property
    def n(self) -> int:
        return len(self.masses)

    @property
    def m(self) -> int:
        return len(self.pairs)

    @property
    def is_cable(self) -> np.ndarray:
        return ~self.is_bar

    @property
    def bars(self) -> np.ndarray:
        """(n_bars, 2) endpoint pairs of the bar members, in member order."""
        return self.pairs[self.is_bar]

    @property
    def actuated_indices(self) -> np.ndarray:
        return np.flatnonzero(self.actuated)


@dataclass
class MemberGeometry:
    """Per-member kinematics: vectors U, relative velocities V, lengths, rates."""

    U: np.ndarray
    V: np.ndarray
    L: np.ndarray
    Ldot: np.ndarray


def connectivity_matrix(pairs, n: int) -> np.ndarray:
    """Dense incidence matrix: +1 at the lower endpoint, -1 at the higher."""
    pairs = np.asarray(pairs, dtype=int)
    C = np.zeros((len(pairs), n))
    rows = np.arange(len(pairs))
    C[rows, pairs[:, 0]] = 1.0
    C[rows, pairs[:, 1]] = -1.0
    return C


def validate_model(model: TensegrityModel) -> list[str]:
    """Return a list of invariant violations; empty means the model is valid."""
    problems = []
    m, n = model.m, model.n
    if model.C.shape != (m, n):
        problems.append(f"C has shape {model.C.shape}, expected {(m, n)}")
    for k in range(m):
        row = model.C[k]
        if np.sum(row == 1.0) != 1 or np.sum(row == -1.0) != 1 or np.sum(row != 0.0) != 2:
            problems.append(f"C row {k} is not a (+1, -1) incidence row")
    if np.any((model.pairs < 0) | (model.pairs >= n)):
        problems.append("member endpoint index out of range")
    if np.any(model.pairs[:, 0] == model.pairs[:, 1]):
        problems.append("member connects a node to itself")
    for k, kind in enumerate(model.kinds):
        if kind not in (BAR, CABLE):
            problems.append(f"member {k} has unknown kind {kind!r}")
    if np.any(model.stiffness <= 0):
        problems.append("non-positive stiffness")
    if np.any(model.damping < 0):
        problems.append("negative damping")
    if np.any(model.rest_length <= 0):
        problems.append("non-positive rest length")
    if np.any(model.masses <= 0):
        problems.append("non-positive node mass")
    bar_mask = model.is_bar
    if np.any(model.actuated & bar_mask):
        problems.append("bars must not be actuated")
    if np.count_nonzero(model.actuated) > np.count_nonzero(~bar_mask):
        problems.append("more actuated members than cables")
    return problems


def member_geometry(model: TensegrityModel, positions, velocities=None) -> MemberGeometry:
    """Member vectors U = C N, velocities V = C dN/dt, lengths, length rates.

    ``velocities=None`` is treated as a static configuration (V = 0).
    Raises DegenerateGeometryError when any member has coincident endpoints.
    """
    N = np.asarray(positions, dtype=float)
    lo, hi = model.pairs[:, 0], model.pairs[:, 1]
    U = N[lo] - N[hi]
    L = np.linalg.norm(U, axis=1)
    if np.any(L < LENGTH_EPS):
        bad = int(np.argmin(L))
        raise DegenerateGeometryError(
            f"member {bad} has coincident endpoints (length {L[bad]:.3e})")
    if velocities is None:
        V = np.zeros_like(U)
        Ldot = np.zeros(model.m)
    else:
        Vn = np.asarray(velocities, dtype=float)
        V = Vn[lo] - Vn[hi]
        Ldot = np.einsum("kd,kd->k", U, V) / L
    return MemberGeometry(U=U, V=V, L=L, Ldot=Ldot)


def _superball_nodes(rod_length: float) -> np.ndarray:
    """Canonical six-strut configuration, bars along the three axes.

    The node set is the classic expanded-octahedron layout: three orthogonal
    pairs of parallel struts whose self-stress equilibrium occurs at a strut
    separation of half the strut length.
    """
    s = rod_length / 2.0
    half = 0.5
    raw = [
        (0.0, -1.0, +half), (0.0, +1.0, +half),   # bar 0, along y, upper
        (0.0, -1.0, -half), (0.0, +1.0, -half),   # bar 1, along y, lower
        (-1.0, -half, 0.0), (+1.0, -half, 0.0),   # bar 2, along x
        (-1.0, +half, 0.0), (+1.0, +half, 0.0),   # bar 3, along x
        (-half, 0.0, -1.0), (-half, 0.0, +1.0),   # bar 4, along z
        (+half, 0.0, -1.0), (+half, 0.0, +1.0),   # bar 5, along z
    ]
    return s * np.array(raw)


def build_superball(
    rod_length: float = 1.5,
    *,
    bar_stiffness: float = 3000.0,
    cable_stiffness: float = 400.0,
    bar_damping: float = 40.0,
    cable_damping: float = 10.0,
    node_mass: float = 0.5,
    cable_prestrain: float = 0.08,
) -> tuple[TensegrityModel, np.ndarray]:
    """Six-strut tensegrity analog: 6 bars, 24 cables, 12 of them actuated.

    Returns the model together with its initial node positions (n=12 rows).
    Cable rest lengths are shortened by ``cable_prestrain`` so the network is
    pretensioned; bar rest lengths are stretched by the matching factor so the
    returned configuration is a zero-gravity self-stress equilibrium.

    The 12 actuated cables are chosen deterministically so that both end caps
    of bar 0 carry no actuated cable (one spooling motor cannot serve every
    cable; the local-deformation experiment needs a motor-free end cap).
    """
    params = {
        "rod_length": rod_length,
        "bar_stiffness": bar_stiffness,
        "cable_stiffness": cable_stiffness,
        "node_mass": node_mass,
    }
    for name, value in params.items():
        if value <= 0:
            raise ValidationError(f"{name} must be positive, got {value}")
    if bar_damping < 0 or cable_damping < 0:
        raise ValidationError("damping must be non-negative")
    if not 0 <= cable_prestrain < 0.5:
        raise ValidationError("cable_prestrain must be in [0, 0.5)")

    nodes = _superball_nodes(rod_length)
    bar_pairs = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11)]

    # Cables are exactly the node pairs at the expanded-octahedron cable
    # distance sqrt(1.5) * rod_length / 2; recover them from geometry.
    cable_len = np.sqrt(1.5) * rod_length / 2.0
    cable_pairs = []
    for i in range(12):
        for j in range(i + 1, 12):
            if (i, j) in bar_pairs:
                continue
            d = np.linalg.norm(nodes[i] - nodes[j])
            if abs(d - cable_len) < 1e-9 * rod_length:
                cable_pairs.append((i, j))
    assert len(cable_pairs) == 24

    # Leave bar 0's end caps (nodes 0 and 1) motor-free, actuate the first 12
    # of the remaining cables in sorted pair order.
    eligible = [p for p in cable_pairs if 0 not in p and 1 not in p]
    actuated_set = set(eligible[:12])

    pairs = list(bar_pairs) + cable_pairs
    kinds = [BAR] * 6 + [CABLE] * 24
    stiffness = np.array([bar_stiffness] * 6 + [cable_stiffness] * 24)
    damping = np.array([bar_damping] * 6 + [cable_damping] * 24)
    # Self-stress balance: cable force density K_c * p is matched by a bar
    # force density -1.5 * K_c * p, hence a slightly stretched bar rest length.
    bar_rest = rod_length * (1.0 + 1.5 * cable_stiffness * cable_prestrain / bar_stiffness)
    cable_rest = cable_len * (1.0 - cable_prestrain)
    rest_length = np.array([bar_rest] * 6 + [cable_rest] * 24)
    actuated = np.array([False] * 6 + [p in actuated_set for p in cable_pairs])
    masses = np.full(12, node_mass)

    model = TensegrityModel(
        pairs=np.array(pairs),
        kinds=kinds,
        stiffness=stiffness,
        damping=damping,
        rest_length=rest_length,
        actuated=actuated,
        masses=masses,
    )
    return model, nodes


def cable_triangles(model: TensegrityModel) -> list[tuple[int, int, int]]:
    """All 3-cliques of the cable graph (the faces a six-strut can rest on)."""
    adj = [set() for _ in range(model.n)]
    for (i, j), kind in zip(model.pairs, model.kinds):
        if kind == CABLE:
            adj[i].add(j)
            adj[j].add(i)
    faces = []
    for i in range(model.n):
        for j in sorted(adj[i]):
            if j <= i:
                continue
            for k in sorted(adj[i] & adj[j]):
                if k > j:
                    faces.append((i, j, k))
    return faces


def load_model(path) -> tuple[TensegrityModel, np.ndarray | None]:
    """Load a model definition from a YAML file.

    Schema::

        masses: [0.5, 0.5, ...]          # one per node
        members:
          - {i: 0, j: 1, kind: bar, stiffness: 3000.0, damping: 40.0,
             rest_length: 1.5, actuated: false}
        positions:                        # optional initial node positions
          - [0.0, 0.0, 1.0]

    Member endpoints are reordered to (lower, higher) internally.
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict) or "members" not in raw or "masses" not in raw:
        raise ValidationError(f"{path}: model file needs 'members' and 'masses'")
    masses = np.asarray(raw["masses"], dtype=float)
    pairs, kinds, K, c, L0, act = [], [], [], [], [], []
    for idx, spec in enumerate(raw["members"]):
        try:
            i, j = int(spec["i"]), int(spec["j"])
            pairs.append((min(i, j), max(i, j)))
            kinds.append(str(spec["kind"]))
            K.append(float(spec["stiffness"]))
            c.append(float(spec.get("damping", 0.0)))
            L0.append(float(spec["rest_length"]))
            act.append(bool(spec.get("actuated", False)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: bad member entry {idx}: {exc}") from exc
    model = TensegrityModel(
        pairs=np.array(pairs), kinds=kinds, stiffness=np.array(K),
        damping=np.array(c), rest_length=np.array(L0),
        actuated=np.array(act), masses=masses,
    )
    positions = None
    if "positions" in raw and raw["positions"] is not None:
        positions = np.asarray(raw["positions"], dtype=float)
        if positions.shape != (model.n, 3):
            raise ValidationError(
                f"{path}: positions shape {positions.shape} != {(model.n, 3)}")
    return model, positions
