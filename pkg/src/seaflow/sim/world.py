"""Discrete-event UWSN world.

Sensing nodes sample, process locally and send frames over their uplink
(acoustic or serial) to a gateway. Gateways decode frames and bridge each
record to the cloud, either over a costed OTA link or through a
co-located edge adapter. Everything runs on one :class:`EventQueue`, and
every random draw comes from a per-entity stream, so a run is a pure
function of (configuration, seed).
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from seaflow.engine import EventQueue
from seaflow.ingestion.formats import SourceFormat, encode_payload, style_fields
from seaflow.model import Location, epoch_ms_to_iso
from seaflow.sim.frames import decode_frame, encode_frame
from seaflow.sim.model import (
    CLEAN,
    AggregationMode,
    AggregationPolicy,
    ChannelKind,
    ChannelModel,
    FaultEvent,
    FaultKind,
    NodeDead,
    NodeRole,
    NodeState,
    OutRecord,
    RawReading,
    SensorSpec,
    TransmitResult,
    TransmitStatus,
    entity_rng,
)

LOW_BATTERY_FRACTION = 0.1
MAX_RECORDS_PER_FRAME = 64


# -- the per-operation models ------------------------------------------------------


def sample(sensor: SensorSpec, t: float, rng) -> RawReading:
    """Clean signal plus noise, then the active faults in plan order."""
    clean = sensor.signal.clean(t)
    value = clean + (rng.gauss(0.0, sensor.signal.noise_std) if sensor.signal.noise_std else 0.0)
    flag = CLEAN
    lo, hi = sensor.valid_range
    for fault in sensor.fault_plan:
        if not fault.active(t):
            continue
        if fault.kind is FaultKind.SPIKE:
            value += fault.magnitude
        elif fault.kind is FaultKind.STUCK:
            # frozen at the noise-free reading of the fault onset
            value = sensor.signal.clean(fault.start)
        elif fault.kind is FaultKind.DRIFT:
            value += fault.magnitude * (t - fault.start) / (fault.end - fault.start)
        elif fault.kind is FaultKind.OUT_OF_RANGE:
            if fault.magnitude > 0:
                value = hi + fault.magnitude
            elif fault.magnitude < 0:
                value = lo + fault.magnitude
            else:
                value = hi + (hi - lo)
        flag = fault.kind.value
    return RawReading(sensor.sensor_id, t, value, flag)


def local_process(node: NodeState, readings: Sequence[RawReading], policy: AggregationPolicy,
                  prev: dict[str, float] | None = None) -> list[OutRecord]:
    """Turn one policy window of readings into outgoing records."""
    for r in readings:
        if not node.debit("cpu", node.costs.cpu_per_record_nj, r.t):
            raise NodeDead(node.node_id)
    if not readings:
        return []
    if policy.mode is AggregationMode.RAW:
        return [OutRecord(r.sensor_id, int(round(r.t * 1000)), r.value) for r in readings]
    if policy.mode is AggregationMode.MEAN_OVER_WINDOW:
        values = [r.value for r in readings]
        last = readings[-1]
        return [OutRecord(last.sensor_id, int(round(last.t * 1000)), statistics.fmean(values),
                          min(values), max(values), len(values))]
    prev = {} if prev is None else prev
    out = []
    for r in readings:
        before = prev.get(r.sensor_id)
        if before is None or abs(r.value - before) > policy.event_threshold:
            out.append(OutRecord(r.sensor_id, int(round(r.t * 1000)), r.value))
        prev[r.sensor_id] = r.value
    return out


def transmit(node: NodeState, channel: ChannelModel, frame: bytes, t: float, rng) -> TransmitResult:
    """Send one frame. Raises :class:`NodeDead` if the battery runs out doing so."""
    if not node.alive:
        raise NodeDead(node.node_id)
    if not channel.in_window(t):
        return TransmitResult(TransmitStatus.DEFERRED, channel.next_window(t))
    if not node.debit("tx", node.costs.tx_per_byte_nj * len(frame), t):
        raise NodeDead(node.node_id)
    node.bytes_sent += len(frame)
    if channel.kind is ChannelKind.OTA:
        node.ota_cost += channel.cost_per_kb * len(frame) / 1024
    # three draws per frame, always, so the stream never depends on outcomes
    u_loss, u_ber, u_jitter = rng.random(), rng.random(), rng.random()
    if u_loss < channel.frame_loss_prob:
        return TransmitResult(TransmitStatus.LOST)
    if channel.bit_error_rate and u_ber < 1 - (1 - channel.bit_error_rate) ** (8 * len(frame)):
        return TransmitResult(TransmitStatus.LOST)
    at = t + channel.base_latency_s + len(frame) * 8 / channel.bandwidth_bps + channel.jitter_s * u_jitter
    return TransmitResult(TransmitStatus.DELIVERED, at)


# -- world -------------------------------------------------------------------------


@dataclass(frozen=True)
class SensorInfo:
    spec: SensorSpec
    node_id: str
    org_id: str
    platform_id: str
    location: Location
    policy: AggregationPolicy


@dataclass(frozen=True)
class GatewayInfo:
    org_id: str
    wire_format: SourceFormat
    qos: int = 1
    trace: str = "ota"  # "ota" or "edge"

    def __post_init__(self):
        object.__setattr__(self, "wire_format", SourceFormat(self.wire_format))
        if self.trace not in ("ota", "edge"):
            raise ValueError(f"gateway trace must be 'ota' or 'edge', got {self.trace!r}")


@dataclass(frozen=True)
class CloudDelivery:
    org_id: str
    topic: str
    payload: bytes
    qos: int
    source_format: SourceFormat
    at: float
    via: str
    gateway_id: str
    records: int = 1


@dataclass(frozen=True)
class SimEvent:
    t: float
    kind: str
    entity: str
    data: tuple = ()

    def to_dict(self) -> dict:
        return {"t": self.t, "kind": self.kind, "entity": self.entity, **dict(self.data)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass
class OrgLedger:
    """Reading-level accounting for one organization."""

    samples: int = 0
    delivered: int = 0
    lost: int = 0
    suppressed: int = 0
    in_flight: int = 0
    frames_sent: int = 0
    frames_lost: int = 0


@dataclass
class _Pending:
    readings: list[RawReading] = field(default_factory=list)


class World:
    def __init__(self, seed: int = 0, queue: EventQueue | None = None, epoch_ms: int = 0,
                 sample_until: float = math.inf):
        self.seed = seed
        self.queue = EventQueue() if queue is None else queue
        self.epoch_ms = epoch_ms
        self.sample_until = sample_until
        self.nodes: dict[str, NodeState] = {}
        self.uplinks: dict[str, ChannelModel] = {}
        self.gateway_of: dict[str, str] = {}
        self.gateways: dict[str, GatewayInfo] = {}
        self.node_org: dict[str, str] = {}
        self.sensors: dict[str, SensorInfo] = {}
        self.faults: list[FaultEvent] = []
        self.ledgers: dict[str, OrgLedger] = {}
        self.events: list[SimEvent] = []
        self.on_cloud: Callable[[CloudDelivery], None] | None = None
        self.on_low_battery: Callable[[str, float], None] | None = None
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        self._pending: dict[str, _Pending] = {}
        self._event_prev: dict[str, dict[str, float]] = {}
        self._sample_rngs: dict[str, object] = {}
        self._link_rngs: dict[str, object] = {}
        self._flush_at: dict[str, float] = {}
        self._low_flagged: set[str] = set()
        self._started = False

    # -- building ----------------------------------------------------------------

    def add_gateway(self, node: NodeState, uplink: ChannelModel, info: GatewayInfo) -> NodeState:
        if node.role is not NodeRole.GATEWAY:
            raise ValueError(f"{node.node_id} is not a gateway")
        self._add_node(node, uplink, info.org_id)
        self.gateways[node.node_id] = info
        return node

    def add_node(self, node: NodeState, uplink: ChannelModel, gateway_id: str) -> NodeState:
        if gateway_id not in self.gateways:
            raise KeyError(f"unknown gateway {gateway_id!r}")
        self._add_node(node, uplink, self.gateways[gateway_id].org_id)
        self.gateway_of[node.node_id] = gateway_id
        return node

    def _add_node(self, node: NodeState, uplink: ChannelModel, org_id: str) -> None:
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node {node.node_id!r}")
        self.nodes[node.node_id] = node
        self.uplinks[node.node_id] = uplink
        self.node_org[node.node_id] = org_id
        self.ledgers.setdefault(org_id, OrgLedger())
        self._link_rngs[node.node_id] = entity_rng(self.seed, "link", node.node_id)
        self._event_prev[node.node_id] = {}

    def add_sensor(self, node_id: str, spec: SensorSpec, platform_id: str, location: Location,
                   policy: AggregationPolicy = AggregationPolicy()) -> SensorInfo:
        if node_id not in self.nodes or node_id not in self.gateway_of:
            raise KeyError(f"unknown sensing node {node_id!r}")
        if spec.sensor_id in self.sensors:
            raise ValueError(f"duplicate sensor {spec.sensor_id!r}")
        policy.samples_per_window(spec.sampling_interval_s)
        info = SensorInfo(spec, node_id, self.node_org[node_id], platform_id, location, policy)
        self.sensors[spec.sensor_id] = info
        self._index[spec.sensor_id] = len(self._names)
        self._names.append(spec.sensor_id)
        self._pending[spec.sensor_id] = _Pending()
        self._sample_rngs[spec.sensor_id] = entity_rng(self.seed, "sample", spec.sensor_id)
        return info

    def add_fault(self, fault: FaultEvent) -> None:
        if fault.on_sensor:
            info = self.sensors.get(fault.target)
            if info is None:
                raise KeyError(f"fault target {fault.target!r} is not a sensor")
            spec = info.spec
            new_spec = SensorSpec(spec.sensor_id, spec.parameter, spec.unit, spec.sampling_interval_s,
                                  spec.valid_range, spec.signal, spec.fault_plan + (fault,))
            self.sensors[fault.target] = SensorInfo(new_spec, info.node_id, info.org_id,
                                                    info.platform_id, info.location, info.policy)
        elif fault.target not in self.nodes:
            raise KeyError(f"fault target {fault.target!r} is not a node")
        self.faults.append(fault)

    # -- running -----------------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        t0 = self.queue.now
        for sensor_id in self._names:
            if t0 < self.sample_until:
                self.queue.schedule(t0, self._sample, sensor_id)
        for fault in self.faults:
            if fault.end <= t0:
                continue
            self.queue.schedule(max(fault.start, t0), self._fault_edge, fault, True)
            self.queue.schedule(fault.end, self._fault_edge, fault, False)

    def step(self, until: float) -> list[SimEvent]:
        if until < self.queue.now:
            raise ValueError(f"until={until} precedes now={self.queue.now}")
        self.start()
        mark = len(self.events)
        self.queue.run(until)
        return self.events[mark:]

    def _log(self, t: float, kind: str, entity: str, **data) -> None:
        self.events.append(SimEvent(t, kind, entity, tuple(sorted(data.items()))))

    def write_event_log(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for event in self.events:
                fh.write(event.to_json() + "\n")

    def ledger_for_node(self, node_id: str) -> OrgLedger:
        return self.ledgers[self.node_org[node_id]]

    # sampling -------------------------------------------------------------------

    def _sample(self, sensor_id: str) -> None:
        t = self.queue.now
        info = self.sensors[sensor_id]
        node = self.nodes[info.node_id]
        nxt = t + info.spec.sampling_interval_s
        if nxt < self.sample_until and node.battery_nj > 0:
            self.queue.schedule(nxt, self._sample, sensor_id)
        if not node.alive:
            return
        if not node.debit("sample", node.costs.sample_nj, t):
            self._log(t, "node_dead", node.node_id, cause="battery")
            return
        reading = sample(info.spec, t, self._sample_rngs[sensor_id])
        ledger = self.ledger_for_node(node.node_id)
        ledger.samples += 1
        self._log(t, "sample", sensor_id, value=reading.value, flag=reading.true_flag)
        self._check_battery(node, t)
        pending = self._pending[sensor_id].readings
        pending.append(reading)
        if len(pending) < info.policy.samples_per_window(info.spec.sampling_interval_s):
            return
        readings = list(pending)
        pending.clear()
        try:
            records = local_process(node, readings, info.policy, self._event_prev[node.node_id])
        except NodeDead:
            ledger.lost += len(readings)
            self._log(t, "node_dead", node.node_id, cause="battery")
            return
        ledger.suppressed += len(readings) - sum(r.count for r in records)
        self._enqueue(node, records, t)

    def _check_battery(self, node: NodeState, t: float) -> None:
        if node.node_id in self._low_flagged or node.initial_nj == 0:
            return
        if node.battery_nj < LOW_BATTERY_FRACTION * node.initial_nj:
            self._low_flagged.add(node.node_id)
            self._log(t, "low_battery", node.node_id, battery_j=node.battery_j)
            if self.on_low_battery is not None:
                self.on_low_battery(node.node_id, t)

    # buffering and sending --------------------------------------------------------

    def _enqueue(self, node: NodeState, records: Iterable[OutRecord], t: float) -> None:
        node.buffer.extend(records)
        self._flush(node, t)
        ledger = self.ledger_for_node(node.node_id)
        while len(node.buffer) > node.buffer_capacity:
            dropped = node.buffer.pop()
            ledger.lost += dropped.count
            self._log(t, "buffer_drop", node.node_id, sensor=dropped.sensor_id, t_ms=dropped.t_ms)

    def _flush(self, node: NodeState, t: float) -> None:
        if not node.buffer or node.link_down or not node.alive:
            return
        channel = self.uplinks[node.node_id]
        if not channel.in_window(t):
            at = channel.next_window(t)
            if self._flush_at.get(node.node_id) != at:
                self._flush_at[node.node_id] = at
                self._log(t, "deferred", node.node_id, until=at)
                self.queue.schedule(at, self._flush_event, node.node_id)
            return
        if node.role is NodeRole.GATEWAY:
            self._bridge(node, t)
        else:
            self._send_frames(node, channel, t)

    def _flush_event(self, node_id: str) -> None:
        self._flush_at.pop(node_id, None)
        self._flush(self.nodes[node_id], self.queue.now)

    def _send_frames(self, node: NodeState, channel: ChannelModel, t: float) -> None:
        ledger = self.ledger_for_node(node.node_id)
        while node.buffer:
            batch = [node.buffer.popleft() for _ in range(min(MAX_RECORDS_PER_FRAME, len(node.buffer)))]
            count = sum(r.count for r in batch)
            frame = encode_frame(batch, self._index)
            try:
                result = transmit(node, channel, frame, t, self._link_rngs[node.node_id])
            except NodeDead:
                ledger.lost += count + sum(r.count for r in node.buffer)
                node.buffer.clear()
                self._log(t, "node_dead", node.node_id, cause="battery")
                return
            ledger.frames_sent += 1
            if result.status is TransmitStatus.LOST:
                ledger.frames_lost += 1
                ledger.lost += count
                self._log(t, "frame_lost", node.node_id, bytes=len(frame), records=len(batch))
            else:
                ledger.in_flight += count
                self._log(t, "frame_tx", node.node_id, bytes=len(frame), records=len(batch),
                          arrival=result.at)
                self.queue.schedule(result.at, self._frame_arrive, node.node_id, frame, count)

    def _frame_arrive(self, sender_id: str, frame: bytes, count: int) -> None:
        t = self.queue.now
        ledger = self.ledger_for_node(sender_id)
        ledger.in_flight -= count
        sender = self.nodes[sender_id]
        gateway = self.nodes[self.gateway_of[sender_id]]
        if sender.link_down or sender.fault_dead or not gateway.alive:
            ledger.lost += count
            ledger.frames_lost += 1
            self._log(t, "frame_dropped", gateway.node_id, sender=sender_id)
            return
        if not gateway.debit("rx", gateway.costs.rx_per_byte_nj * len(frame), t):
            ledger.lost += count
            self._log(t, "node_dead", gateway.node_id, cause="battery")
            return
        records = decode_frame(frame, self._names)
        self._log(t, "frame_rx", gateway.node_id, sender=sender_id, records=len(records))
        self._enqueue(gateway, records, t)

    # gateway ---------------------------------------------------------------------

    def gateway_bridge(self, gateway_id: str, records: Sequence[OutRecord]) -> list[tuple[str, bytes, int]]:
        """Serialize records in the org's wire format, one publish per record."""
        gateway = self.nodes[gateway_id]
        info = self.gateways[gateway_id]
        if not gateway.alive:
            for r in records:
                if len(gateway.buffer) < gateway.buffer_capacity:
                    gateway.buffer.append(r)
            return []
        out = []
        for r in sorted(records, key=lambda r: (r.t_ms, r.sensor_id)):
            sensor = self.sensors[r.sensor_id]
            canonical = {
                "platform_id": sensor.platform_id,
                "sensor_id": r.sensor_id,
                "parameter": sensor.spec.parameter,
                "unit": sensor.spec.unit,
                "measured_at": epoch_ms_to_iso(self.epoch_ms + r.t_ms),
                "value": f"{r.value:.3f}",
                "location.lat": sensor.location.lat,
                "location.lon": sensor.location.lon,
                "location.depth_m": sensor.location.depth_m,
            }
            payload = encode_payload([style_fields(info.wire_format, canonical)], info.wire_format)
            out.append((f"ingest/{info.org_id}/{sensor.platform_id}", payload, info.qos))
        return out

    def _bridge(self, gateway: NodeState, t: float) -> None:
        info = self.gateways[gateway.node_id]
        ledger = self.ledgers[info.org_id]
        records = sorted(gateway.buffer, key=lambda r: (r.t_ms, r.sensor_id))
        gateway.buffer.clear()
        publishes = self.gateway_bridge(gateway.node_id, records)
        channel = self.uplinks[gateway.node_id]
        rng = self._link_rngs[gateway.node_id]
        for record, (topic, payload, qos) in zip(records, publishes):
            if info.trace == "edge":
                self._log(t, "publish", gateway.node_id, topic=topic, via="edge")
                self._deliver(CloudDelivery(info.org_id, topic, payload, qos, info.wire_format, t,
                                            "edge", gateway.node_id, record.count))
                continue
            try:
                result = transmit(gateway, channel, payload, t, rng)
            except NodeDead:
                ledger.lost += record.count
                self._log(t, "node_dead", gateway.node_id, cause="battery")
                continue
            ledger.frames_sent += 1
            if result.status is TransmitStatus.LOST:
                ledger.frames_lost += 1
                ledger.lost += record.count
                self._log(t, "frame_lost", gateway.node_id, bytes=len(payload), records=1)
                continue
            ledger.in_flight += record.count
            self._log(t, "publish", gateway.node_id, topic=topic, via="ota", arrival=result.at)
            self.queue.schedule(result.at, self._deliver,
                                CloudDelivery(info.org_id, topic, payload, qos, info.wire_format,
                                              result.at, "ota", gateway.node_id, record.count), True)

    def _deliver(self, delivery: CloudDelivery, in_flight: bool = False) -> None:
        ledger = self.ledgers[delivery.org_id]
        if in_flight:
            ledger.in_flight -= delivery.records
        ledger.delivered += delivery.records
        if self.on_cloud is not None:
            self.on_cloud(delivery)

    # faults ------------------------------------------------------------------------

    def _fault_edge(self, fault: FaultEvent, starting: bool) -> None:
        t = self.queue.now
        self._log(t, "fault_start" if starting else "fault_end", fault.target, fault=fault.kind.value)
        node = self.nodes.get(fault.target)
        if node is None:
            return
        if fault.kind is FaultKind.NODE_DEAD:
            node.fault_dead = starting
        elif fault.kind is FaultKind.LINK_DOWN:
            node.link_down = starting
        if not starting:
            self._flush(node, t)

    # accounting ----------------------------------------------------------------------

    def buffered(self, org_id: str) -> int:
        total = 0
        for node_id, node in self.nodes.items():
            if self.node_org[node_id] == org_id:
                total += sum(r.count for r in node.buffer)
        for sensor_id, pending in self._pending.items():
            if self.sensors[sensor_id].org_id == org_id:
                total += len(pending.readings)
        return total

    def conservation_gap(self, org_id: str) -> int:
        """samples minus every place a reading can be; zero when accounting is lossless."""
        ledger = self.ledgers[org_id]
        return ledger.samples - (ledger.delivered + ledger.lost + ledger.suppressed
                                 + ledger.in_flight + self.buffered(org_id))

    def record_interval(self, sensor_id: str) -> float | None:
        info = self.sensors[sensor_id]
        return info.policy.record_interval(info.spec.sampling_interval_s)
