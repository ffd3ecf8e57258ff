"""Clock models, two-way ranging math, broadcast rounds, and gating."""

import numpy as np
import pytest

from tenseg.errors import (
    MalformedExchangeError,
    ScheduleError,
    ValidationError,
)
from tenseg.ranging import (
    ANCHOR,
    QUIET,
    ROBOT,
    SPEED_OF_LIGHT,
    ClockModel,
    ModuleSpec,
    NoiseModel,
    OffsetTable,
    ProtocolTiming,
    RangingMeasurement,
    broadcast_round,
    distance_estimate,
    local_timestamp,
    nlos_gate,
    read_measurement_log,
    recorrect,
    single_sided_tof,
    tof_estimate,
    twr_exchange,
    write_measurement_log,
)


def test_local_timestamp_affine_and_quantized():
    clock = ClockModel(offset=2.0, skew=1e-5)
    assert local_timestamp(clock, 10.0) == pytest.approx(2.0 + 10.0 * (1 + 1e-5))
    q = ClockModel(quantization=1e-9)
    t = local_timestamp(q, 3.14159e-6)
    assert t == pytest.approx(round(3.14159e-6 / 1e-9) * 1e-9)


def test_clock_rejects_huge_skew():
    with pytest.raises(ValidationError):
        ClockModel(skew=2e-3)


def test_double_sided_cancels_offsets_exactly():
    """Pure offsets (no skew, no noise) leave zero ranging error."""
    ci = ClockModel(offset=123.456)
    cj = ClockModel(offset=-77.1)
    ts = twr_exchange(12.0, ci, cj)
    d = SPEED_OF_LIGHT * tof_estimate(ts)
    assert d == pytest.approx(12.0, abs=1e-9)


def test_double_sided_vs_single_sided_under_skew():
    """±50 ppm skews: double-sided stays under 2 cm, single-sided is meters."""
    rng = np.random.default_rng(101)
    errs_ds, errs_ss = [], []
    for _ in range(300):
        dist = rng.uniform(1.0, 30.0)
        ci = ClockModel(offset=rng.uniform(0, 1e-3), skew=rng.uniform(-50e-6, 50e-6))
        cj = ClockModel(offset=rng.uniform(0, 1e-3), skew=rng.uniform(-50e-6, 50e-6))
        ts = twr_exchange(dist, ci, cj)
        errs_ds.append(abs(SPEED_OF_LIGHT * tof_estimate(ts) - dist))
        errs_ss.append(abs(SPEED_OF_LIGHT * single_sided_tof(ts) - dist))
    assert max(errs_ds) < 0.02
    assert np.mean(errs_ss) > 10 * np.mean(errs_ds)


def test_antenna_bias_appears_in_raw_distance():
    ci, cj = ClockModel(), ClockModel()
    bias_m = 0.37
    ts = twr_exchange(5.0, ci, cj, tof_bias=bias_m / SPEED_OF_LIGHT)
    raw = SPEED_OF_LIGHT * tof_estimate(ts)
    assert raw == pytest.approx(5.0 + bias_m, abs=1e-9)
    table = OffsetTable({(0, 1): bias_m})
    meas = distance_estimate(ts, table)
    assert meas.corrected == pytest.approx(5.0, abs=1e-9)


def test_timestampset_order_validation():
    with pytest.raises(MalformedExchangeError):
        # Final before poll on the initiator clock.
        from tenseg.ranging import TimestampSet

        TimestampSet(i=0, j=1, t_sp=1.0, t_rp=1.1, t_sr=1.2,
                     t_rr=1.3, t_sf=0.9, t_rf=1.4)


def test_offset_table_symmetry_and_roundtrip():
    table = OffsetTable()
    table[3, 1] = 0.25
    assert table[1, 3] == 0.25
    assert (3, 1) in table and (1, 3) in table
    with pytest.raises(ValidationError):
        table[2, 2] = 0.1
    again = OffsetTable.from_dict(table.to_dict())
    assert again[1, 3] == 0.25
    const = table.constant_like()
    assert const[1, 3] == pytest.approx(table.mean())


def make_fleet(n_anchor, n_robot, rng, skew_ppm=30.0):
    mods, pos = [], {}
    for k in range(n_anchor):
        mods.append(ModuleSpec(1 + k, ANCHOR, ClockModel(
            skew=rng.uniform(-skew_ppm, skew_ppm) * 1e-6,
            offset=rng.uniform(0, 1e-3))))
        pos[1 + k] = rng.uniform(0, 8, size=3)
    for k in range(n_robot):
        mods.append(ModuleSpec(101 + k, ROBOT, ClockModel(
            skew=rng.uniform(-skew_ppm, skew_ppm) * 1e-6,
            offset=rng.uniform(0, 1e-3))))
        pos[101 + k] = rng.uniform(3, 5, size=3)
    return mods, pos


@pytest.mark.parametrize("n_anchor,n_robot", [(1, 1), (4, 2), (8, 12), (13, 12)])
def test_broadcast_round_packet_budget(n_anchor, n_robot):
    rng = np.random.default_rng(7)
    mods, pos = make_fleet(n_anchor, n_robot, rng)
    rnd = broadcast_round(mods, pos, rng=rng)
    n = n_anchor + n_robot
    assert rnd.packet_count == 3 * n
    # Every ordered pair ending at a robot yields one measurement.
    assert len(rnd.measurements) == n_robot * (n - 1)


def test_broadcast_round_duration_20_modules():
    rng = np.random.default_rng(8)
    mods, pos = make_fleet(8, 12, rng)
    rnd = broadcast_round(mods, pos, slot_spacing=1e-3, rng=rng)
    assert rnd.duration <= 0.060


def test_broadcast_round_rejects_duplicate_ids():
    rng = np.random.default_rng(9)
    mods, pos = make_fleet(2, 1, rng)
    mods[0] = ModuleSpec(mods[1].id, ANCHOR, mods[0].clock)
    with pytest.raises(ScheduleError):
        broadcast_round(mods, pos, rng=rng)


def test_broadcast_round_accuracy_quiet():
    rng = np.random.default_rng(10)
    mods, pos = make_fleet(4, 3, rng)
    rnd = broadcast_round(mods, pos, noise=QUIET, rng=rng)
    for m in rnd.measurements:
        true = np.linalg.norm(pos[m.i] - pos[m.j])
        assert m.raw == pytest.approx(true, abs=0.02)


def test_broadcast_respects_offsets_and_corrections():
    rng = np.random.default_rng(11)
    mods, pos = make_fleet(3, 2, rng)
    table = OffsetTable()
    ids = sorted(pos)
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            table[ids[a], ids[b]] = 0.3
    rnd = broadcast_round(mods, pos, true_offsets=table, corrections=table,
                          noise=QUIET, rng=rng)
    for m in rnd.measurements:
        true = np.linalg.norm(pos[m.i] - pos[m.j])
        assert m.raw - true == pytest.approx(0.3, abs=0.02)
        assert m.corrected == pytest.approx(true, abs=0.02)


def test_nlos_gate_rejects_weak_power():
    noise = NoiseModel(gate_threshold=0.65)
    good = RangingMeasurement(0, 1, 101, 5.0, 5.0, True, "1->101", power_score=0.9)
    bad = RangingMeasurement(0, 1, 101, 5.6, 5.6, True, "1->101", power_score=0.3)
    assert nlos_gate(good, noise)
    assert not nlos_gate(bad, noise)


def test_nlos_rejection_rate_near_half():
    """p_nlos=0.5 plus the power gate rejects about half the packets."""
    rng = np.random.default_rng(12)
    mods, pos = make_fleet(8, 12, rng)
    noise = NoiseModel(p_nlos=0.5)
    total, accepted = 0, 0
    for k in range(30):
        rnd = broadcast_round(mods, pos, noise=noise, rng=rng,
                              start_time=0.1 * k)
        total += len(rnd.measurements)
        accepted += sum(m.accepted for m in rnd.measurements)
    rate = accepted / total
    assert 0.4 < rate < 0.6


def test_measurement_log_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    mods, pos = make_fleet(3, 2, rng)
    rnd = broadcast_round(mods, pos, rng=rng)
    path = tmp_path / "log.jsonl"
    write_measurement_log(path, rnd.measurements)
    back = read_measurement_log(path)
    assert len(back) == len(rnd.measurements)
    for a, b in zip(rnd.measurements, back):
        assert (a.t, a.i, a.j, a.raw, a.corrected, a.accepted) == \
            (b.t, b.i, b.j, b.raw, b.corrected, b.accepted)


def test_recorrect_swaps_offset_table():
    m = RangingMeasurement(0, 1, 101, 5.5, 5.5, True, "1->101")
    out = recorrect([m], OffsetTable({(1, 101): 0.5}))
    assert out[0].corrected == pytest.approx(5.0)
    assert out[0].raw == 5.5


def test_protocol_timing_validation():
    with pytest.raises(ValidationError):
        ProtocolTiming(response_delay=0.0)
