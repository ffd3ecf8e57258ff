"""Two-way ranging simulation over drifting local clocks.

Modules exchange poll/response/final packets; each side stamps emission and
reception with its own unsynchronized clock. The double-sided estimate

    a = t_SF - t_SP          (initiator clock)
    b = t_RF - t_RP          (responder clock)
    c = t_RF - t_SR
    d = t_SF - t_RR
    TOF ~= (c - d * b / a) / 2

cancels clock offsets exactly and first-order skew, which is why it needs
no synchronization. Antenna delays appear as a per-pair additive bias on
the time of flight; calibration expresses them as distance offsets.

Broadcast mode packs one poll, one response, and one final per module into
ID-indexed time slots, so a round of n modules costs exactly 3n packets and
every ordered pair that ends at a robot module yields a measurement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateGeometryError,
    MalformedExchangeError,
    MissingExchangeError,
    ScheduleError,
    ValidationError,
)
from .structure import TensegrityModel

SPEED_OF_LIGHT = 299792458.0
# Timestamp granularity of a DW1000-class UWB transceiver (config default).
DEFAULT_QUANTUM = 15.65e-12

ANCHOR = "anchor"
ROBOT = "robot"


@dataclass(frozen=True)
class ClockModel:
    """Affine local clock: reading = quantize(offset + (1 + skew) * t)."""

    offset: float = 0.0
    skew: float = 0.0
    quantization: float = 0.0

    def __post_init__(self):
        if self.quantization < 0:
            raise ValidationError("quantization must be non-negative")
        if abs(self.skew) >= 1e-3:
            raise ValidationError(f"skew {self.skew} out of range (|skew| < 1e-3)")


def local_timestamp(clock: ClockModel, true_time: float) -> float:
    """Module-local reading of an event at the given true time."""
    t = clock.offset + (1.0 + clock.skew) * true_time
    if clock.quantization > 0:
        t = round(t / clock.quantization) * clock.quantization
    return t


@dataclass
class TimestampSet:
    """Six stamps of one double-sided exchange between initiator i and responder j."""

    i: int
    j: int
    t_sp: float
    t_rp: float
    t_sr: float
    t_rr: float
    t_sf: float
    t_rf: float

    def __post_init__(self):
        if not (self.t_sp < self.t_sf):
            raise MalformedExchangeError("initiator stamps out of order (t_SP >= t_SF)")
        if not (self.t_rp < self.t_sr < self.t_rf):
            raise MalformedExchangeError("responder stamps out of order")


@dataclass
class NoiseModel:
    """Sensor imperfections for the ranging simulation.

    sigma_t is Gaussian noise on every timestamp (seconds); the default is
    tuned so corrected ranges come out with a standard deviation near
    sqrt(0.029) m under the default protocol timing. NLOS packets pick up a
    positive Exponential(nlos_bias_mean) path bias and a degraded power
    score, which the gate rejects below gate_threshold.
    """

    sigma_t: float = 5.9e-10
    p_loss: float = 0.0
    p_nlos: float = 0.0
    nlos_bias_mean: float = 0.5
    los_power: float = 1.0
    nlos_power: float = 0.3
    power_sigma: float = 0.05
    gate_threshold: float = 0.65

    def __post_init__(self):
        if not (0 <= self.p_loss <= 1 and 0 <= self.p_nlos <= 1):
            raise ValidationError("probabilities must be in [0, 1]")
        if self.sigma_t < 0 or self.nlos_bias_mean < 0:
            raise ValidationError("noise magnitudes must be non-negative")


QUIET = NoiseModel(sigma_t=0.0)


@dataclass
class RangingMeasurement:
    """One distance estimate, kept raw and corrected, with gating verdict."""

    t: float
    i: int
    j: int
    raw: float
    corrected: float
    accepted: bool
    direction: str
    power_score: float = 1.0


class OffsetTable:
    """Symmetric per-pair distance offsets o_{i,j} (meters), diagonal absent."""

    def __init__(self, entries: dict | None = None):
        self._table: dict[tuple[int, int], float] = {}
        if entries:
            for (i, j), value in entries.items():
                self[i, j] = value

    @staticmethod
    def _key(i: int, j: int) -> tuple[int, int]:
        if i == j:
            raise ValidationError("offset table has no diagonal entries")
        return (i, j) if i < j else (j, i)

    def __setitem__(self, pair, value: float):
        self._table[self._key(*pair)] = float(value)

    def __getitem__(self, pair) -> float:
        return self._table[self._key(*pair)]

    def __contains__(self, pair) -> bool:
        return self._key(*pair) in self._table

    def __len__(self) -> int:
        return len(self._table)

    def get(self, i: int, j: int, default: float = 0.0) -> float:
        return self._table.get(self._key(i, j), default)

    def items(self):
        return sorted(self._table.items())

    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.items()])

    def mean(self) -> float:
        if not self._table:
            raise ValidationError("offset table is empty")
        return float(np.mean(list(self._table.values())))

    def constant_like(self, value: float | None = None) -> "OffsetTable":
        """Same pairs, one shared offset (defaults to the table mean)."""
        value = self.mean() if value is None else value
        out = OffsetTable()
        for pair, _ in self.items():
            out[pair] = value
        return out

    def to_dict(self) -> dict[str, float]:
        return {f"{i}-{j}": v for (i, j), v in self.items()}

    @classmethod
    def from_dict(cls, data: dict[str, float]) -> "OffsetTable":
        out = cls()
        for key, value in data.items():
            i, j = key.split("-")
            out[int(i), int(j)] = value
        return out


@dataclass(frozen=True)
class ProtocolTiming:
    """Reply delays for a standalone pairwise exchange (seconds)."""

    response_delay: float = 5e-4
    final_delay: float = 5e-4

    def __post_init__(self):
        if self.response_delay <= 0 or self.final_delay <= 0:
            raise ValidationError("protocol delays must be positive")


def _stamp(clock: ClockModel, true_time: float, sigma: float, rng) -> float:
    if sigma > 0:
        true_time = true_time + rng.normal(0.0, sigma)
    return local_timestamp(clock, true_time)


def _stamp_exchange(i, j, t_poll, t_resp, t_final, distance, clock_i, clock_j,
                    tof_bias, noise, rng) -> TimestampSet:
    """Stamp all six events given true emission times of the three packets.

    The per-pair antenna bias delays every reception stamp, which biases the
    double-sided time of flight by the same amount.
    """
    tof = distance / SPEED_OF_LIGHT
    s = noise.sigma_t
    return TimestampSet(
        i=i, j=j,
        t_sp=_stamp(clock_i, t_poll, s, rng),
        t_rp=_stamp(clock_j, t_poll + tof + tof_bias, s, rng),
        t_sr=_stamp(clock_j, t_resp, s, rng),
        t_rr=_stamp(clock_i, t_resp + tof + tof_bias, s, rng),
        t_sf=_stamp(clock_i, t_final, s, rng),
        t_rf=_stamp(clock_j, t_final + tof + tof_bias, s, rng),
    )


def twr_exchange(
    true_distance: float,
    clock_i: ClockModel,
    clock_j: ClockModel,
    timing: ProtocolTiming = ProtocolTiming(),
    *,
    i: int = 0,
    j: int = 1,
    tof_bias: float = 0.0,
    start_time: float = 0.0,
    noise: NoiseModel = QUIET,
    rng: np.random.Generator | None = None,
) -> TimestampSet:
    """Simulate one pairwise double-sided exchange and return its stamps."""
    if true_distance < 0:
        raise ValidationError("distance must be non-negative")
    if rng is None:
        rng = np.random.default_rng(0)
    if noise.p_loss > 0 and rng.random() < noise.p_loss:
        raise MissingExchangeError(f"exchange {i}->{j} lost")
    tof = true_distance / SPEED_OF_LIGHT
    t_poll = start_time
    t_resp = t_poll + tof + timing.response_delay
    t_final = t_resp + tof + timing.final_delay
    return _stamp_exchange(i, j, t_poll, t_resp, t_final, true_distance,
                           clock_i, clock_j, tof_bias, noise, rng)


def tof_estimate(ts: TimestampSet) -> float:
    """Double-sided time-of-flight estimate (uncorrected, seconds)."""
    a = ts.t_sf - ts.t_sp
    if a <= 0:
        raise MalformedExchangeError("initiator round interval a must be positive")
    b = ts.t_rf - ts.t_rp
    c = ts.t_rf - ts.t_sr
    d = ts.t_sf - ts.t_rr
    return 0.5 * (c - d * b / a)


def single_sided_tof(ts: TimestampSet) -> float:
    """Single-sided estimate (c - d) / 2; skew-sensitive, for comparison only."""
    return 0.5 * ((ts.t_rf - ts.t_sr) - (ts.t_sf - ts.t_rr))


def distance_estimate(
    ts: TimestampSet,
    offsets: OffsetTable | None = None,
    *,
    t: float = 0.0,
    power_score: float = 1.0,
) -> RangingMeasurement:
    """Convert an exchange to a distance measurement, subtracting the offset."""
    raw = SPEED_OF_LIGHT * tof_estimate(ts)
    o = offsets.get(ts.i, ts.j) if offsets is not None else 0.0
    return RangingMeasurement(
        t=t, i=ts.i, j=ts.j, raw=raw, corrected=raw - o,
        accepted=raw > 0, direction=f"{ts.i}->{ts.j}", power_score=power_score,
    )


def nlos_gate(measurement: RangingMeasurement, noise: NoiseModel) -> bool:
    """Accept a packet only if its simulated power score clears the threshold."""
    return measurement.power_score >= noise.gate_threshold and measurement.raw > 0


@dataclass
class ModuleSpec:
    """A ranging participant: dense integer ID, role, and its local clock."""

    id: int
    kind: str
    clock: ClockModel

    def __post_init__(self):
        if self.kind not in (ANCHOR, ROBOT):
            raise ValidationError(f"unknown module kind {self.kind!r}")


@dataclass
class BroadcastRound:
    measurements: list[RangingMeasurement]
    packet_count: int
    duration: float


def broadcast_round(
    modules: list[ModuleSpec],
    positions: dict[int, np.ndarray],
    slot_spacing: float = 1e-3,
    *,
    true_offsets: OffsetTable | None = None,
    corrections: OffsetTable | None = None,
    noise: NoiseModel = QUIET,
    rng: np.random.Generator | None = None,
    start_time: float = 0.0,
) -> BroadcastRound:
    """One broadcast ranging round over ID-indexed slots.

    Every module emits poll, response, and final packets in slots
    ID * slot_spacing, (n + ID) * slot_spacing, and (2n + ID) * slot_spacing.
    Each ordered pair whose responder is a robot module produces one
    measurement (anchors hear everything but cannot publish), so robot-robot
    pairs yield two measurements per round and anchor-robot pairs one.
    """
    if slot_spacing <= 0:
        raise ValidationError("slot_spacing must be positive")
    ids = [m.id for m in modules]
    if len(set(ids)) != len(ids):
        raise ScheduleError("duplicate module IDs collide in the slot schedule")
    if rng is None:
        rng = np.random.default_rng(0)
    n_mod = len(modules)
    by_id = {m.id: m for m in modules}
    slot = {mid: rank for rank, mid in enumerate(sorted(ids))}

    def poll_time(mid):
        return start_time + slot[mid] * slot_spacing

    def resp_time(mid):
        return start_time + (n_mod + slot[mid]) * slot_spacing

    def final_time(mid):
        return start_time + (2 * n_mod + slot[mid]) * slot_spacing

    measurements = []
    for j_id in sorted(ids):
        if by_id[j_id].kind != ROBOT:
            continue
        for i_id in sorted(ids):
            if i_id == j_id:
                continue
            true_dist = float(np.linalg.norm(
                np.asarray(positions[i_id]) - np.asarray(positions[j_id])))
            if noise.p_loss > 0 and rng.random() < noise.p_loss:
                continue
            effective = true_dist
            if noise.p_nlos > 0 and rng.random() < noise.p_nlos:
                effective = true_dist + rng.exponential(noise.nlos_bias_mean)
                power = rng.normal(noise.nlos_power, noise.power_sigma)
            else:
                power = rng.normal(noise.los_power, noise.power_sigma)
            bias = (true_offsets.get(i_id, j_id) if true_offsets else 0.0) / SPEED_OF_LIGHT
            ts = _stamp_exchange(
                i_id, j_id, poll_time(i_id), resp_time(j_id), final_time(i_id),
                effective, by_id[i_id].clock, by_id[j_id].clock, bias, noise, rng)
            meas = distance_estimate(ts, corrections, t=start_time, power_score=power)
            meas.accepted = nlos_gate(meas, noise)
            measurements.append(meas)

    # The round ends when the last final packet reaches its farthest listener.
    pos = {mid: np.asarray(positions[mid]) for mid in ids}
    last = max(ids, key=lambda mid: slot[mid])
    farthest = max(np.linalg.norm(pos[last] - pos[o]) for o in ids if o != last)
    duration = (3 * n_mod - 1) * slot_spacing + farthest / SPEED_OF_LIGHT
    return BroadcastRound(
        measurements=measurements,
        packet_count=3 * n_mod,
        duration=duration,
    )


def bar_partners(model: TensegrityModel) -> np.ndarray:
    """For each node, the index of the other end cap of its bar (-1 if none)."""
    partner = np.full(model.n, -1, dtype=int)
    for i, j in model.bars:
        partner[i] = j
        partner[j] = i
    return partner


def sensor_position(model: TensegrityModel, positions, node: int,
                    mount_offset: float = 0.1) -> np.ndarray:
    """Ranging-sensor location: the end cap displaced along its bar axis.

    The UWB module sits mount_offset meters inboard from the strut end, so
    the sensed point is node + mount_offset * (other_end - node) / |axis|.
    """
    partner = bar_partners(model)[node]
    if partner < 0:
        raise DegenerateGeometryError(f"node {node} does not belong to a bar")
    N = np.asarray(positions, dtype=float)
    axis = N[partner] - N[node]
    length = np.linalg.norm(axis)
    if length < 1e-9:
        raise DegenerateGeometryError(f"bar at node {node} has zero length")
    return N[node] + (mount_offset / length) * axis


def write_measurement_log(path, measurements) -> None:
    """JSON-lines log, one record per measurement; calibration input format."""
    with open(path, "w") as fh:
        for m in measurements:
            fh.write(json.dumps({
                "t": m.t, "i": m.i, "j": m.j, "raw": m.raw,
                "corrected": m.corrected, "accepted": m.accepted,
                "direction": m.direction,
            }) + "\n")


def read_measurement_log(path) -> list[RangingMeasurement]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(RangingMeasurement(
                t=rec["t"], i=rec["i"], j=rec["j"], raw=rec["raw"],
                corrected=rec["corrected"], accepted=rec["accepted"],
                direction=rec["direction"],
            ))
    return out


def recorrect(measurements, offsets: OffsetTable) -> list[RangingMeasurement]:
    """Re-derive corrected distances from raws with a different offset table."""
    return [replace(m, corrected=m.raw - offsets.get(m.i, m.j)) for m in measurements]
