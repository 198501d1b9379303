"""Builders shared by the test modules."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass

from hypothesis import strategies as st

from seaflow.broker.client import Client
from seaflow.broker.core import Broker, BrokerConfig
from seaflow.broker.packets import Packet, PacketKind, QoSLevel
from seaflow.broker.transport import InMemoryNetwork, LinkProfile
from seaflow.engine import EventQueue
from seaflow.ingestion.formats import SourceFormat
from seaflow.model import Location, Observation, QCReport
from seaflow.sim.model import (
    CLEAN,
    AggregationPolicy,
    ChannelModel,
    EnergyCosts,
    FaultEvent,
    FaultKind,
    NodeRole,
    NodeState,
    SensorSpec,
    SignalModel,
    entity_rng,
    joules_to_nj,
)
from seaflow.sim.world import GatewayInfo, World, sample

EPOCH_MS = 1_704_067_200_000  # 2024-01-01T00:00:00Z


def make_obs(value: float | None = 10.0, t_ms: int = EPOCH_MS, sensor: str = "s1",
             parameter: str = "temperature", org: str = "org7", platform: str = "p1",
             location: Location = Location(60.0, 10.0, 1.0), **kw) -> Observation:
    return Observation(f"{org}:{sensor}:{t_ms}", org, platform, sensor, parameter, "degC", value,
                       t_ms, kw.pop("ingested_at", t_ms), location, kw.pop("qc", QCReport()), **kw)


# -- MQTT -----------------------------------------------------------------------------

topic_level = st.text(alphabet="abcxyz019_-", min_size=1, max_size=6)
topics = st.lists(topic_level, min_size=1, max_size=4).map("/".join)
filters = st.lists(st.one_of(topic_level, st.just("+")), min_size=1, max_size=4).map("/".join) | \
    st.lists(topic_level, max_size=3).map(lambda parts: "/".join(parts + ["#"]))
packet_ids = st.integers(1, 0xFFFF)
text = st.text(max_size=20)


@st.composite
def packets(draw) -> Packet:
    kind = draw(st.sampled_from(list(PacketKind)))
    if kind is PacketKind.CONNECT:
        username = draw(st.none() | text)
        password = draw(st.none() | text) if username is not None else None
        return Packet(kind, client_id=draw(text), username=username, password=password,
                      keepalive=draw(st.integers(0, 0xFFFF)), clean_session=draw(st.booleans()))
    if kind is PacketKind.CONNACK:
        return Packet(kind, return_code=draw(st.integers(0, 5)), session_present=draw(st.booleans()))
    if kind is PacketKind.PUBLISH:
        qos = draw(st.sampled_from(list(QoSLevel)))
        pid = draw(packet_ids) if qos else 0
        dup = draw(st.booleans()) if qos else False
        return Packet(kind, packet_id=pid, topic=draw(topics), payload=draw(st.binary(max_size=64)),
                      qos=qos, dup=dup)
    if kind is PacketKind.SUBSCRIBE:
        subs = draw(st.lists(st.tuples(filters, st.sampled_from(list(QoSLevel))),
                             min_size=1, max_size=4))
        return Packet(kind, packet_id=draw(packet_ids), subscriptions=tuple(subs))
    if kind is PacketKind.SUBACK:
        codes = draw(st.lists(st.sampled_from([0, 1, 2, 0x80]), min_size=1, max_size=4))
        return Packet(kind, packet_id=draw(packet_ids), return_codes=tuple(codes))
    if kind is PacketKind.DISCONNECT:
        return Packet(kind)
    return Packet(kind, packet_id=draw(packet_ids))


def qos_run(qos: int, up: LinkProfile, down: LinkProfile, n: int = 10_000,
            seed: int = 11) -> tuple[Counter, InMemoryNetwork]:
    """One publisher, one subscriber, ``n`` publishes; returns payload → delivery count."""
    net = InMemoryNetwork(seed=seed)
    net.add_broker("b", Broker(BrokerConfig("b", retransmit_timeout_ms=1000, max_retries=64)))
    got: Counter = Counter()
    net.add_client(Client("pub", retransmit_timeout_s=1.0, max_retries=64), "b", up, up)
    net.add_client(Client("sub", retransmit_timeout_s=1.0, max_retries=64), "b", down, down,
                   on_message=lambda m: got.update([m.payload]))
    net.connect("pub")
    net.connect("sub")
    net.subscribe("sub", [("t/#", qos)])
    net.run_until_quiet(0.5)
    for i in range(n):
        net.publish("pub", "t/x", str(i).encode(), qos)
    net.run_until_quiet(0.5)
    return got, net


# -- QC fixtures ----------------------------------------------------------------------

QC_FAULT_KINDS = ("Spike", "Stuck", "OutOfRange")


def qc_fixture(seed: int, n_sensors: int = 10, n: int = 1000, dt: float = 600.0,
               slot: int = 80, stuck_len: int = 60) -> list[tuple[SensorSpec, list]]:
    """Labelled streams: one fault episode (or none) per ``slot`` readings."""
    rng = random.Random(f"{seed}:plan")
    out = []
    for i in range(n_sensors):
        faults = []
        for k in range(2, n // slot):
            kind = rng.choice(["none", "none", "Spike", "Stuck", "OutOfRange"])
            t0 = k * slot * dt
            sign = rng.choice([-1, 1])
            if kind == "Spike":
                faults.append(FaultEvent(FaultKind.SPIKE, t0, t0 + dt, sign * rng.uniform(2, 8)))
            elif kind == "Stuck":
                faults.append(FaultEvent(FaultKind.STUCK, t0, t0 + stuck_len * dt))
            elif kind == "OutOfRange":
                faults.append(FaultEvent(FaultKind.OUT_OF_RANGE, t0, t0 + 3 * dt,
                                         sign * rng.uniform(1, 10)))
        spec = SensorSpec(f"s{i}", "temperature", "degC", dt, (-2.0, 35.0),
                          SignalModel(base=10 + i, amplitude=1.0, noise_std=0.1, phase=float(i)),
                          tuple(faults))
        srng = entity_rng(seed, "sample", spec.sensor_id)
        out.append((spec, [sample(spec, k * dt, srng) for k in range(n)]))
    return out


@dataclass
class Confusion:
    detected: Counter
    missed: Counter
    false_pos: int = 0
    true_neg: int = 0

    def recall(self, kind: str | None = None) -> float:
        kinds = [kind] if kind else list(set(self.detected) | set(self.missed))
        hit = sum(self.detected[k] for k in kinds)
        return hit / (hit + sum(self.missed[k] for k in kinds))

    @property
    def fpr(self) -> float:
        return self.false_pos / (self.false_pos + self.true_neg)

    @property
    def readings(self) -> int:
        return sum(self.detected.values()) + sum(self.missed.values()) + self.false_pos + self.true_neg


def score_qc(streams, cfg) -> Confusion:
    from seaflow.model import AttributeFlag as G
    from seaflow.qc import StreamState, run_qc

    conf = Confusion(Counter(), Counter())
    for spec, readings in streams:
        state = StreamState((spec.sensor_id, spec.parameter), spec.sampling_interval_s,
                            *spec.valid_range, cfg.window)
        for r in readings:
            ms = EPOCH_MS + int(r.t * 1000)
            obs = make_obs(round(r.value, 3), ms, sensor=spec.sensor_id)
            out, _ = run_qc(obs, state, ms, cfg)
            flagged = out.qc.accuracy in (G.PROBABLY_BAD, G.BAD)
            if r.true_flag == CLEAN:
                conf.false_pos += flagged
                conf.true_neg += not flagged
            elif flagged:
                conf.detected[r.true_flag] += 1
            else:
                conf.missed[r.true_flag] += 1
    return conf


# -- energy ---------------------------------------------------------------------------


def lifetime_run(policy: AggregationPolicy, battery_j: float = 20.0, seed: int = 3,
                 interval_s: float = 60.0) -> World:
    """One sensing node on a lossless acoustic link, run until its battery is empty."""
    world = World(seed, EventQueue(), EPOCH_MS, sample_until=10 * 86_400)
    world.add_gateway(NodeState("gw", NodeRole.GATEWAY, joules_to_nj(1e6)),
                      ChannelModel.of("OTA"), GatewayInfo("org8", SourceFormat.XML_V1))
    node = NodeState("n1", NodeRole.SENSING, joules_to_nj(battery_j), EnergyCosts())
    world.add_node(node, ChannelModel.of("UAC", frame_loss_prob=0.0), "gw")
    spec = SensorSpec("t1", "temperature", "degC", interval_s, (-2.0, 35.0),
                      SignalModel(base=8.0, amplitude=0.5, noise_std=0.05))
    world.add_sensor("n1", spec, "mesh", Location(63.44, 10.4, 20.0), policy)
    world.step(10 * 86_400)
    return world
