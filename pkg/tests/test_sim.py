import random
from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from seaflow.sim.frames import FrameError, decode_frame, encode_frame, get_varint, put_varint, unzigzag, zigzag
from seaflow.sim.model import (
    CLEAN,
    AggregationPolicy,
    ChannelModel,
    EnergyCosts,
    FaultEvent,
    NodeDead,
    NodeRole,
    NodeState,
    OutRecord,
    SensorSpec,
    SignalModel,
    TransmitStatus,
    entity_rng,
    joules_to_nj,
)
from seaflow.sim.world import local_process, sample, transmit

from support import lifetime_run

# -- frames ------------------------------------------------------------------


@given(st.integers(0, 2 ** 63 - 1))
def test_varint_roundtrip(n):
    buf = bytearray()
    put_varint(buf, n)
    assert get_varint(bytes(buf), 0) == (n, len(buf))


@given(st.integers(-2 ** 40, 2 ** 40))
def test_zigzag_roundtrip(n):
    assert zigzag(n) >= 0 and unzigzag(zigzag(n)) == n


records = st.builds(
    lambda i, t, v, agg: OutRecord(f"s{i}", t, v / 1000, (v - agg) / 1000 if agg else None,
                                   (v + agg) / 1000 if agg else None, 3 if agg else 1),
    st.integers(0, 2), st.integers(0, 10 ** 10), st.integers(-10 ** 6, 10 ** 6), st.integers(0, 500))


@given(st.lists(records, max_size=10))
def test_frame_roundtrip(recs):
    names = ["s0", "s1", "s2"]
    frame = encode_frame(recs, {n: i for i, n in enumerate(names)})
    assert decode_frame(frame, names) == recs


def test_frame_errors():
    frame = encode_frame([OutRecord("a", 1, 1.0)], {"a": 0})
    with pytest.raises(FrameError):
        decode_frame(frame[:-1], ["a"])
    with pytest.raises(FrameError):
        decode_frame(frame, [])
    with pytest.raises(FrameError):
        get_varint(b"\x80", 0)


# -- model -------------------------------------------------------------------


def test_joules_are_integer_nanojoules():
    assert joules_to_nj("0.05") == 50_000_000
    assert joules_to_nj(Decimal("1e-9")) == 1


def test_energy_costs_require_tx_above_cpu():
    with pytest.raises(ValueError):
        EnergyCosts(tx_per_byte_nj=1, cpu_per_record_nj=2)


def test_debit_never_goes_negative_and_records_death():
    node = NodeState("n", NodeRole.SENSING, 100)
    assert node.debit("tx", 60, 1.0)
    assert not node.debit("tx", 60, 2.0)
    assert node.battery_nj == 0 and node.died_at == 2.0
    assert node.initial_nj - node.battery_nj == node.debited_nj == 100


@pytest.mark.parametrize("kwargs", [
    dict(kind="UAC", bandwidth_bps=20_000),
    dict(kind="Serial", bandwidth_bps=9600, frame_loss_prob=0.1),
    dict(kind="UAC", bandwidth_bps=1000, cost_per_kb="1"),
    dict(kind="OTA", bandwidth_bps=0),
    dict(kind="OTA", bandwidth_bps=1, duty_cycle=((5, 5),)),
])
def test_channel_validation(kwargs):
    with pytest.raises(ValueError):
        ChannelModel(**kwargs)


def test_duty_cycle_windows_wrap_midnight():
    ch = ChannelModel.of("OTA", duty_cycle=[(82_800, 3_600)])
    assert ch.in_window(83_000) and ch.in_window(100) and not ch.in_window(4_000)
    assert ch.next_window(4_000) == 82_800
    assert ch.next_window(86_400 + 4_000) == 86_400 + 82_800


def test_aggregation_policy_windows():
    assert AggregationPolicy("MeanOverWindow", 360).samples_per_window(60) == 6
    with pytest.raises(ValueError):
        AggregationPolicy("MeanOverWindow", 90).samples_per_window(60)
    with pytest.raises(ValueError):
        AggregationPolicy("MeanOverWindow", 0)
    assert AggregationPolicy("EventOnly").record_interval(60) is None


def test_fault_event_validation():
    with pytest.raises(ValueError):
        FaultEvent("Spike", 10, 10)
    with pytest.raises(ValueError):
        SensorSpec("s", "t", "u", 60, (0, 1), fault_plan=(FaultEvent("LinkDown", 0, 1),))


# -- per-operation models ------------------------------------------------------


SPEC = SensorSpec("s", "temperature", "degC", 60, (-2.0, 35.0),
                  SignalModel(base=10.0, amplitude=1.0, noise_std=0.1),
                  (FaultEvent("Spike", 600, 660, 5.0), FaultEvent("Stuck", 1200, 1800),
                   FaultEvent("OutOfRange", 2400, 2460, 3.0)))


def test_sample_applies_faults_with_ground_truth():
    rng = entity_rng(1, "s")
    readings = {t: sample(SPEC, t, rng) for t in range(0, 3000, 60)}
    assert readings[0].true_flag == CLEAN
    assert readings[600].true_flag == "Spike" and readings[600].value > 13
    stuck = {readings[t].value for t in range(1200, 1800, 60)}
    assert stuck == {SPEC.signal.clean(1200)}
    assert readings[2400].value == 38.0 and readings[2400].true_flag == "OutOfRange"


def test_entity_streams_are_independent():
    a1 = [entity_rng(7, "sample", "a").random() for _ in range(3)]
    entity_rng(7, "sample", "b").random()
    assert a1 == [entity_rng(7, "sample", "a").random() for _ in range(3)]
    r = entity_rng(7, "sample", "a")
    assert [r.random() for _ in range(3)] != [entity_rng(8, "sample", "a").random() for _ in range(3)]


def test_local_process_modes():
    node = NodeState("n", NodeRole.SENSING, joules_to_nj(1))
    readings = [sample(SPEC, t, random.Random(0)) for t in (60, 120, 180)]
    assert len(local_process(node, readings, AggregationPolicy())) == 3
    (mean,) = local_process(node, readings, AggregationPolicy("MeanOverWindow", 180))
    assert mean.count == 3 and mean.vmin <= mean.value <= mean.vmax
    prev = {}
    first = local_process(node, readings, AggregationPolicy("EventOnly", event_threshold=100), prev)
    assert len(first) == 1
    assert node.ledger["cpu"] == 9 * node.costs.cpu_per_record_nj


def test_transmit_debits_and_defers():
    node = NodeState("n", NodeRole.SENSING, joules_to_nj(100))
    ota = ChannelModel.of("OTA", duty_cycle=[(0, 3600)])
    result = transmit(node, ota, b"x" * 1024, 10.0, random.Random(0))
    assert result.status is TransmitStatus.DELIVERED and result.at > 10.0
    assert node.ota_cost == Decimal("0.05")
    assert node.ledger["tx"] == 1024 * node.costs.tx_per_byte_nj
    deferred = transmit(node, ota, b"x", 4000.0, random.Random(0))
    assert deferred.status is TransmitStatus.DEFERRED and deferred.at == 86_400
    assert node.ledger["tx"] == 1024 * node.costs.tx_per_byte_nj


def test_transmit_on_empty_battery_raises():
    node = NodeState("n", NodeRole.SENSING, 10)
    with pytest.raises(NodeDead):
        transmit(node, ChannelModel.of("Serial"), b"x" * 100, 0.0, random.Random(0))
    assert node.battery_nj == 0


# -- world -----------------------------------------------------------------------


def test_world_energy_ledger_balances_and_is_deterministic():
    a = lifetime_run(AggregationPolicy(), battery_j=5)
    b = lifetime_run(AggregationPolicy(), battery_j=5)
    na, nb = a.nodes["n1"], b.nodes["n1"]
    assert na.died_at == nb.died_at is not None
    assert na.ledger == nb.ledger
    assert na.initial_nj - na.battery_nj == na.debited_nj
    assert set(na.ledger) >= {"sample", "cpu", "tx"}
    assert a.conservation_gap("org8") == 0
