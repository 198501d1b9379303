"""Scenario configuration, the deterministic end-to-end run, and run reports.

A run wires sim → ingestion → transform → QC → triage → core broker →
data space on one virtual clock. Given the same configuration and seed,
two runs produce byte-identical reports.
"""

from __future__ import annotations

import json
import math
import os
import secrets
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from seaflow.access import (
    SECRET_ENV,
    Action,
    Grant,
    IdentityProvider,
    Principal,
    PrincipalStore,
    Role,
)
from seaflow.broker.core import Broker, BrokerConfig, NotAuthorized
from seaflow.broker.client import Client
from seaflow.broker.session import Message
from seaflow.broker.transport import InMemoryNetwork, LinkProfile
from seaflow.dataspace import DataSpace, RawArchive
from seaflow.engine import EventQueue
from seaflow.ingestion.formats import SourceFormat, UnparseablePayload, parse_payload
from seaflow.ingestion.traces import DataPusher, EdgeAdapter, FetchSource, SourceUnavailable, fetch_poll, publish_records
from seaflow.model import DataCategory, Location, Observation, iso_to_epoch_ms
from seaflow.monitoring import MetricKind, Registry, SloRule, evaluate_slos
from seaflow.pipeline import Pipeline
from seaflow.qc import Alarm, AlarmKind, QcConfig, QcStage, SensorProfile
from seaflow.sim.model import (
    AggregationPolicy,
    ChannelKind,
    ChannelModel,
    ConfigError,
    EnergyCosts,
    FaultEvent,
    NodeRole,
    NodeState,
    SensorSpec,
    SignalModel,
    joules_to_nj,
)
from seaflow.sim.world import CloudDelivery, GatewayInfo, World
from seaflow.transform import MappingRegistry, style_mapping
from seaflow.triage import TriagePolicy

TRACES = ("Pusher", "Fetcher", "Edge")
FORMAT_ALIASES = {"JsonV1": SourceFormat.JSON_V1, "XmlV1": SourceFormat.XML_V1,
                  "json_v1": SourceFormat.JSON_V1, "xml_v1": SourceFormat.XML_V1}
DEFAULT_START = "2024-01-01T00:00:00Z"
PIPELINE_ID = "pipeline"


# -- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    uplink: str
    battery_j: float
    buffer_capacity: int
    costs: EnergyCosts
    location: Location
    aggregation: AggregationPolicy = AggregationPolicy()
    sensors: tuple[SensorSpec, ...] = ()


@dataclass(frozen=True)
class PlatformConfig:
    platform_id: str
    cadence_s: float
    gateway: NodeConfig
    nodes: tuple[NodeConfig, ...]


@dataclass(frozen=True)
class OrgConfig:
    org_id: str
    traces: tuple[str, ...]
    wire_format: SourceFormat
    qos: int
    channels: dict[str, ChannelModel]
    platforms: tuple[PlatformConfig, ...]
    poll_interval_s: float = 600.0


@dataclass(frozen=True)
class ConsumerConfig:
    principal_id: str
    org_id: str
    roles: frozenset[Role]
    categories: frozenset[DataCategory]
    topic_filters: tuple[str, ...] = ()
    subscriptions: tuple[str, ...] = ()
    qos: int = 1


@dataclass(frozen=True)
class LinkPair:
    up: LinkProfile = LinkProfile()
    down: LinkProfile = LinkProfile()


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    duration_s: float
    start_ms: int
    organizations: tuple[OrgConfig, ...]
    faults: tuple[FaultEvent, ...] = ()
    qc: QcConfig = QcConfig()
    triage: TriagePolicy = TriagePolicy(DataCategory.OPEN_ACCESS)
    consumers: tuple[ConsumerConfig, ...] = ()
    slo: tuple[SloRule, ...] = ()
    ingest_link: LinkPair = LinkPair()
    core_link: LinkPair = LinkPair()
    broker: BrokerConfig = BrokerConfig("broker")
    core_qos: int = 1
    drain_s: float = 3600.0
    tick_s: float = 5.0
    qc_sweep_s: float = 300.0
    exposition_interval_s: float = 3600.0
    source: str = ""

    def sensor_ids(self) -> set[str]:
        return {s.sensor_id for o in self.organizations for p in o.platforms
                for n in p.nodes for s in n.sensors}

    def node_ids(self) -> set[str]:
        out = set()
        for o in self.organizations:
            for p in o.platforms:
                out.add(p.gateway.node_id)
                out.update(n.node_id for n in p.nodes)
        return out


class _Reader:
    """Pulls typed fields out of a JSON document, raising ConfigError with the field path."""

    def __init__(self, path: str):
        self.path = path

    def fail(self, where: str, reason: str) -> ConfigError:
        return ConfigError(self.path, where, reason)

    def get(self, data: dict, key: str, where: str, kind: type | tuple = object, default: Any = ...) -> Any:
        if not isinstance(data, dict):
            raise self.fail(where, "expected an object")
        if key not in data:
            if default is ...:
                raise self.fail(f"{where}.{key}" if where else key, "required")
            return default
        value = data[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is not object and not isinstance(value, kind):
            raise self.fail(f"{where}.{key}" if where else key, f"expected {getattr(kind, '__name__', kind)}")
        return value

    def build(self, where: str, fn: Callable[[], Any]) -> Any:
        try:
            return fn()
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise self.fail(where, str(exc)) from None


def _join(where: str, key: str) -> str:
    return f"{where}.{key}" if where else key


def _location(r: _Reader, data: Any, where: str) -> Location:
    return r.build(where, lambda: Location(float(data["lat"]), float(data["lon"]),
                                           float(data.get("depth_m", 0.0))))


def _node(r: _Reader, data: dict, where: str, channels: dict, platform_loc: Location | None,
          gateway: bool) -> NodeConfig:
    node_id = r.get(data, "node_id", where, str)
    uplink = r.get(data, "uplink", where, str)
    if uplink not in channels:
        raise r.fail(_join(where, "uplink"), f"unknown channel {uplink!r}")
    loc_data = r.get(data, "location", where, dict, None)
    location = _location(r, loc_data, _join(where, "location")) if loc_data else platform_loc
    if location is None:
        raise r.fail(_join(where, "location"), "required")
    costs = r.build(_join(where, "energy"), lambda: EnergyCosts.from_dict(data.get("energy")))
    battery = r.get(data, "battery_j", where, float, 1e6 if gateway else 1e5)
    if battery < 0:
        raise r.fail(_join(where, "battery_j"), "must be >= 0")
    capacity = r.get(data, "buffer_capacity", where, int, 256)
    if capacity < 0:
        raise r.fail(_join(where, "buffer_capacity"), "must be >= 0")
    sensors = []
    if not gateway:
        for i, s in enumerate(r.get(data, "sensors", where, list)):
            sw = f"{where}.sensors[{i}]"
            sensors.append(r.build(sw, lambda s=s, sw=sw: SensorSpec(
                sensor_id=r.get(s, "sensor_id", sw, str),
                parameter=r.get(s, "parameter", sw, str),
                unit=r.get(s, "unit", sw, str),
                sampling_interval_s=r.get(s, "sampling_interval_s", sw, float),
                valid_range=tuple(float(v) for v in r.get(s, "valid_range", sw, list)),
                signal=SignalModel.from_dict(s.get("signal")),
            )))
    aggregation = r.build(_join(where, "aggregation"),
                          lambda: AggregationPolicy.from_dict(data.get("aggregation")))
    return NodeConfig(node_id, uplink, battery, capacity, costs, location, aggregation, tuple(sensors))


def _org(r: _Reader, data: dict, where: str) -> OrgConfig:
    org_id = r.get(data, "org_id", where, str)
    traces = r.get(data, "ingestion_trace", where, (str, list), "Pusher")
    traces = (traces,) if isinstance(traces, str) else tuple(traces)
    for t in traces:
        if t not in TRACES:
            raise r.fail(_join(where, "ingestion_trace"), f"unknown trace {t!r}")
    if "Edge" in traces and len(traces) > 1:
        raise r.fail(_join(where, "ingestion_trace"), "Edge bypasses the carrier link; use it alone")
    fmt_name = r.get(data, "wire_format", where, str)
    if fmt_name not in FORMAT_ALIASES:
        raise r.fail(_join(where, "wire_format"), f"unknown format {fmt_name!r}")
    qos = r.get(data, "qos", where, int, 1)
    if qos not in (0, 1, 2):
        raise r.fail(_join(where, "qos"), "must be 0, 1 or 2")
    channels = {}
    for name, ch in r.get(data, "channels", where, dict).items():
        channels[name] = r.build(f"{where}.channels.{name}", lambda ch=ch: ChannelModel.from_dict(ch))
    platforms = []
    for i, p in enumerate(r.get(data, "platforms", where, list)):
        pw = f"{where}.platforms[{i}]"
        cadence = r.get(p, "cadence_s", pw, float)
        if cadence <= 0:
            raise r.fail(_join(pw, "cadence_s"), "must be > 0")
        loc_data = r.get(p, "location", pw, dict, None)
        ploc = _location(r, loc_data, _join(pw, "location")) if loc_data else None
        gw = _node(r, r.get(p, "gateway", pw, dict), f"{pw}.gateway", channels, ploc, True)
        if channels[gw.uplink].kind is not ChannelKind.OTA and "Edge" not in traces:
            raise r.fail(f"{pw}.gateway.uplink", "gateway uplink must be an OTA channel")
        nodes = tuple(_node(r, n, f"{pw}.nodes[{j}]", channels, ploc, False)
                      for j, n in enumerate(r.get(p, "nodes", pw, list)))
        for j, n in enumerate(nodes):
            for k, s in enumerate(n.sensors):
                if s.sampling_interval_s > cadence:
                    raise r.fail(f"{pw}.nodes[{j}].sensors[{k}].sampling_interval_s",
                                 f"exceeds platform cadence {cadence:g}")
                r.build(f"{pw}.nodes[{j}].aggregation",
                        lambda n=n, s=s: n.aggregation.samples_per_window(s.sampling_interval_s))
        platforms.append(PlatformConfig(r.get(p, "platform_id", pw, str), cadence, gw, nodes))
    poll = r.get(data, "poll_interval_s", where, float, 600.0)
    if poll <= 0:
        raise r.fail(_join(where, "poll_interval_s"), "must be > 0")
    return OrgConfig(org_id, traces, FORMAT_ALIASES[fmt_name], qos, channels, tuple(platforms), poll)


def _consumer(r: _Reader, data: dict, where: str) -> ConsumerConfig:
    roles = r.build(_join(where, "roles"),
                    lambda: frozenset(Role(x) for x in data.get("roles", ["consumer"])))
    cats = r.build(_join(where, "categories"),
                   lambda: frozenset(DataCategory(c) for c in data.get("categories", [])))
    return ConsumerConfig(
        principal_id=r.get(data, "principal_id", where, str),
        org_id=r.get(data, "org_id", where, str, "external"),
        roles=roles,
        categories=cats,
        topic_filters=tuple(r.get(data, "topic_filters", where, list, [])),
        subscriptions=tuple(r.get(data, "subscriptions", where, list, [])),
        qos=r.get(data, "qos", where, int, 1),
    )


def _links(r: _Reader, data: dict | None, where: str) -> LinkPair:
    if not data:
        return LinkPair()
    return r.build(where, lambda: LinkPair(LinkProfile.from_dict(data.get("up")),
                                           LinkProfile.from_dict(data.get("down"))))


def parse_scenario(data: dict, path: str = "<scenario>") -> ScenarioConfig:
    r = _Reader(path)
    if not isinstance(data, dict):
        raise r.fail("", "expected a JSON object")
    seed = r.get(data, "seed", "", int)
    if seed < 0 or seed >= 2 ** 64:
        raise r.fail("seed", "must be an unsigned 64-bit integer")
    duration = r.get(data, "duration_s", "", float)
    if duration < 0:
        raise r.fail("duration_s", "must be >= 0")
    start_ms = r.build("start", lambda: iso_to_epoch_ms(data.get("start", DEFAULT_START)))
    orgs = tuple(_org(r, o, f"organizations[{i}]")
                 for i, o in enumerate(r.get(data, "organizations", "", list)))
    cfg = ScenarioConfig(
        name=r.get(data, "name", "", str, Path(path).stem),
        seed=seed,
        duration_s=duration,
        start_ms=start_ms,
        organizations=orgs,
        faults=tuple(r.build(f"faults[{i}]", lambda f=f: FaultEvent.from_dict(f))
                     for i, f in enumerate(r.get(data, "faults", "", list, []))),
        qc=r.build("qc", lambda: QcConfig.from_dict(data.get("qc"))),
        triage=r.build("triage", lambda: TriagePolicy.from_dict(
            data.get("triage", {"default": DataCategory.OPEN_ACCESS.value}))),
        consumers=tuple(_consumer(r, c, f"consumers[{i}]")
                        for i, c in enumerate(r.get(data, "consumers", "", list, []))),
        slo=tuple(r.build(f"slo[{i}]", lambda s=s: SloRule.from_dict(s))
                  for i, s in enumerate(r.get(data, "slo", "", list, []))),
        ingest_link=_links(r, r.get(data, "transport", "", dict, {}).get("ingest"), "transport.ingest"),
        core_link=_links(r, r.get(data, "transport", "", dict, {}).get("core"), "transport.core"),
        broker=r.build("broker", lambda: BrokerConfig.from_dict({"name": "broker", **data.get("broker", {})})),
        core_qos=r.get(data, "core_qos", "", int, 1),
        drain_s=r.get(data, "drain_s", "", float, 3600.0),
        tick_s=r.get(data, "tick_s", "", float, 5.0),
        qc_sweep_s=r.get(data, "qc_sweep_s", "", float, 300.0),
        exposition_interval_s=r.get(data, "exposition_interval_s", "", float, 3600.0),
        source=path,
    )
    _check_refs(r, cfg)
    return cfg


def _check_refs(r: _Reader, cfg: ScenarioConfig) -> None:
    org_ids = [o.org_id for o in cfg.organizations]
    if len(set(org_ids)) != len(org_ids):
        raise r.fail("organizations", "duplicate org_id")
    seen_nodes: set[str] = set()
    seen_sensors: set[str] = set()
    for o in cfg.organizations:
        for p in o.platforms:
            for n in (p.gateway,) + p.nodes:
                if n.node_id in seen_nodes:
                    raise r.fail("organizations", f"duplicate node_id {n.node_id!r}")
                seen_nodes.add(n.node_id)
                for s in n.sensors:
                    if s.sensor_id in seen_sensors:
                        raise r.fail("organizations", f"duplicate sensor_id {s.sensor_id!r}")
                    seen_sensors.add(s.sensor_id)
    for i, f in enumerate(cfg.faults):
        pool = seen_sensors if f.on_sensor else seen_nodes
        if f.target not in pool:
            kind = "sensor" if f.on_sensor else "node"
            raise r.fail(f"faults[{i}].target", f"unknown {kind} {f.target!r}")
    for i, c in enumerate(cfg.consumers):
        if c.qos not in (0, 1, 2):
            raise r.fail(f"consumers[{i}].qos", "must be 0, 1 or 2")
        if c.principal_id == PIPELINE_ID or c.principal_id.startswith("producer-"):
            raise r.fail(f"consumers[{i}].principal_id", "reserved principal id")
    for name in ("drain_s", "tick_s", "qc_sweep_s", "exposition_interval_s"):
        if getattr(cfg, name) <= 0 and name != "drain_s":
            raise r.fail(name, "must be > 0")
    if cfg.core_qos not in (0, 1, 2):
        raise r.fail("core_qos", "must be 0, 1 or 2")


def bundled_scenarios() -> list[str]:
    root = resources.files("seaflow") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def resolve_path(path: str | Path) -> Path:
    """A filesystem path, or the name of a bundled scenario (``org7`` or ``org7.json``)."""
    p = Path(path)
    if p.exists():
        return p
    name = p.name if p.suffix == ".json" else p.name + ".json"
    candidate = resources.files("seaflow") / "scenarios" / name
    if candidate.is_file():
        return Path(str(candidate))
    return p


def load_scenario(path: str | Path) -> ScenarioConfig:
    p = resolve_path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(str(path), "file", f"cannot read: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(p), f"line {exc.lineno}", exc.msg) from None
    return parse_scenario(data, str(p))


# -- report ----------------------------------------------------------------------------


class ReportFormat(str, Enum):
    TEXT = "Text"
    JSON = "Json"


@dataclass
class OrgReport:
    samples: int = 0
    frames_sent: int = 0
    frames_lost: int = 0
    delivered_to_cloud: int = 0
    readings_lost: int = 0
    suppressed: int = 0
    buffered: int = 0
    push_rejected: int = 0
    records_ingested: int = 0
    transform_errors: int = 0
    dedup_drops: int = 0
    observations_stored: int = 0
    missing_synthesized: int = 0
    quarantined: int = 0
    conservation_gap: int = 0
    alarms: dict[str, int] = field(default_factory=dict)

    @property
    def balanced(self) -> bool:
        return (self.observations_stored + self.transform_errors + self.dedup_drops
                == self.records_ingested)


@dataclass
class NodeEnergy:
    initial_nj: int
    final_nj: int
    debited_nj: int
    alive: bool
    died_at: float | None = None

    @property
    def balanced(self) -> bool:
        return self.initial_nj - self.final_nj == self.debited_nj


@dataclass
class RunReport:
    scenario: str
    seed: int
    duration_s: float
    orgs: dict[str, OrgReport] = field(default_factory=dict)
    energy: dict[str, NodeEnergy] = field(default_factory=dict)
    ota_cost: dict[str, str] = field(default_factory=dict)
    platform_alarms: dict[str, int] = field(default_factory=dict)
    slo_breaches: list[str] = field(default_factory=list)
    metrics: str = ""
    event_log: str | None = None

    def total(self, name: str) -> int:
        return sum(getattr(o, name) for o in self.orgs.values())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(
            scenario=data["scenario"],
            seed=data["seed"],
            duration_s=data["duration_s"],
            orgs={k: OrgReport(**v) for k, v in data.get("orgs", {}).items()},
            energy={k: NodeEnergy(**v) for k, v in data.get("energy", {}).items()},
            ota_cost=dict(data.get("ota_cost", {})),
            platform_alarms=dict(data.get("platform_alarms", {})),
            slo_breaches=list(data.get("slo_breaches", [])),
            metrics=data.get("metrics", ""),
            event_log=data.get("event_log"),
        )


def report(run: RunReport, fmt: ReportFormat | str = ReportFormat.TEXT) -> bytes:
    fmt = ReportFormat(fmt)
    if fmt is ReportFormat.JSON:
        return (json.dumps(run.to_dict(), sort_keys=True, indent=2) + "\n").encode()
    lines = [f"scenario {run.scenario} seed={run.seed} duration_s={run.duration_s:g}"]
    for org_id in sorted(run.orgs):
        o = run.orgs[org_id]
        alarms = ",".join(f"{k}:{v}" for k, v in sorted(o.alarms.items())) or "none"
        lines.append(
            f"{org_id} samples={o.samples} frames_sent={o.frames_sent} frames_lost={o.frames_lost} "
            f"ingested={o.records_ingested} stored={o.observations_stored} "
            f"missing={o.missing_synthesized} quarantined={o.quarantined} "
            f"transform_errors={o.transform_errors} dedup_drops={o.dedup_drops} alarms={alarms}")
    total_cost = sum((Decimal(c) for c in run.ota_cost.values()), Decimal(0))
    lines.append(f"total stored={run.total('observations_stored')} "
                 f"missing={run.total('missing_synthesized')} ota_cost={total_cost} "
                 f"slo_breaches={len(run.slo_breaches)}")
    for breach in run.slo_breaches:
        lines.append(f"breach {breach}")
    return ("\n".join(lines) + "\n").encode()


# -- running ----------------------------------------------------------------------------


@dataclass
class ConsumerEndpoint:
    config: ConsumerConfig
    client_id: str
    token: str
    received: list[Observation] = field(default_factory=list)
    topics: Counter = field(default_factory=Counter)


class ScenarioRun:
    """Everything one run builds; ``execute`` drives it and fills ``report``."""

    def __init__(self, cfg: ScenarioConfig, event_log: str | Path | None = None,
                 journal: str | Path | None = None, raw_archive: str | Path | None = None,
                 speedup: float = math.inf, secret: bytes | None = None):
        self.cfg = cfg
        self.event_log = str(event_log) if event_log else None
        self.speedup = speedup
        self.queue = EventQueue()
        self.metrics = Registry(clock=lambda: self.queue.now)
        secret = secret or os.environ.get(SECRET_ENV, "").encode() or secrets.token_bytes(32)
        self.store_principals = PrincipalStore()
        self.idp = IdentityProvider(self.store_principals, secret, self.clock_ms)
        self.registry = MappingRegistry()
        self.store = DataSpace(journal)
        self.archive = RawArchive(raw_archive)
        self.world = World(cfg.seed, self.queue, cfg.start_ms, sample_until=cfg.duration_s)
        self.net = InMemoryNetwork(self.queue, cfg.seed)
        self.expositions: list[str] = []
        self.consumers: dict[str, ConsumerEndpoint] = {}
        self.push_rejected: Counter = Counter()
        self.fetch_sources: dict[str, FetchSource] = {}
        self.fetch_store: dict[str, list[dict]] = {}
        self._cost_reported: dict[str, Decimal] = {}
        self._sim_reported: dict[tuple[str, str], int] = {}
        self._orgs: dict[str, _OrgRuntime] = {}
        self._build()

    def clock_ms(self) -> int:
        return self.cfg.start_ms + int(round(self.queue.now * 1000))

    # -- wiring ---------------------------------------------------------------------

    def _ttl_s(self) -> float:
        return self.cfg.duration_s + 2 * self.cfg.drain_s + 86_400

    def _client(self, cid: str, token: str, broker: str, links: LinkPair,
                on_message: Callable[[Message], None] | None = None) -> None:
        b = self.cfg.broker
        client = Client(cid, cid, token, b.retransmit_timeout_ms / 1000, b.max_retries, b.max_inflight)
        self.net.add_client(client, broker, links.up, links.down, on_message)
        self.net.connect(cid)

    def _build(self) -> None:
        cfg = self.cfg
        ps = self.store_principals
        ps.add(Principal(PIPELINE_ID, "platform", frozenset({Role.OPERATOR})))
        pipeline_token = self.idp.issue(PIPELINE_ID, [
            Grant.topics(Action.SUBSCRIBE, "ingest/#"),
            Grant.topics(Action.PUBLISH, "data/#"),
            Grant.topics(Action.PUBLISH, "quarantine/#"),
            Grant.topics(Action.PUBLISH, "alarms/#"),
        ], self._ttl_s()).encode()
        bc = cfg.broker
        for name in ("ingest", "core"):
            self.net.add_broker(name, Broker(
                BrokerConfig(name, bc.retransmit_timeout_ms, bc.max_retries, bc.max_inflight),
                self.idp.broker_authenticate, self.idp.broker_authorize))
        self.net.on_alarm = self._broker_alarm

        profiles = []
        for org in cfg.organizations:
            for p in org.platforms:
                for n in p.nodes:
                    for s in n.sensors:
                        profiles.append(SensorProfile(
                            s.sensor_id, s.parameter,
                            n.aggregation.record_interval(s.sampling_interval_s),
                            s.valid_range[0], s.valid_range[1]))
        self.qc = QcStage(cfg.qc, profiles)
        self.pipeline = Pipeline(self.registry, self.qc, cfg.triage, self.store, self.metrics,
                                 lambda topic, payload, qos: self.net.publish(
                                     "pipeline-out", topic, payload, qos),
                                 self.clock_ms, cfg.core_qos)
        self._client("pipeline-in", pipeline_token, "ingest", cfg.ingest_link,
                     lambda m: self.pipeline.handle_raw(m.payload))
        self.net.subscribe("pipeline-in", [("ingest/#", 2)])
        self._client("pipeline-out", pipeline_token, "core", cfg.core_link)

        for org in cfg.organizations:
            self._build_org(org)
        for fault in cfg.faults:
            self.world.add_fault(fault)
        self.world.on_cloud = self._on_cloud
        self.world.on_low_battery = self._low_battery

        for c in cfg.consumers:
            ps.add(Principal(c.principal_id, c.org_id, c.roles))
            grants = []
            if c.categories:
                grants.append(Grant.for_categories(Action.SUBSCRIBE, c.categories))
                grants.append(Grant.for_categories(Action.QUERY_PULL, c.categories))
            grants.extend(Grant.topics(Action.SUBSCRIBE, f) for f in c.topic_filters)
            token = self.idp.issue(c.principal_id, grants, self._ttl_s()).encode()
            cid = f"consumer-{c.principal_id}"
            endpoint = ConsumerEndpoint(c, cid, token)
            self.consumers[c.principal_id] = endpoint
            self._client(cid, token, "core", cfg.core_link,
                         lambda m, e=endpoint: self._consume(e, m))
            if c.subscriptions:
                self.net.subscribe(cid, [(f, c.qos) for f in c.subscriptions])

        describe_sim(self.metrics)
        for org in cfg.organizations:
            self.pipeline.register_org(org.org_id)
            for name in ("samples_total", "frames_sent_total", "frames_lost_total"):
                self.metrics.ensure(name, MetricKind.COUNTER, {"org": org.org_id})
        for name in ("ingest", "core"):
            self.metrics.gauge_set("broker_inflight", {"broker": name}, 0)
        self._update_gauges()

    def _build_org(self, org: OrgConfig) -> None:
        ps = self.store_principals
        pid = f"producer-{org.org_id}"
        ps.add(Principal(pid, org.org_id, frozenset({Role.PRODUCER})))
        token = self.idp.issue(pid, [Grant.topics(Action.INGEST, f"ingest/{org.org_id}/#"),
                                     Grant.topics(Action.PUBLISH, f"ingest/{org.org_id}/#")],
                               self._ttl_s()).encode()
        self.registry.register(style_mapping(org.org_id, org.wire_format))
        cid = f"ingest-{org.org_id}"
        self._client(cid, token, "ingest", self.cfg.ingest_link)
        publish = lambda topic, payload, qos, cid=cid: self.net.publish(cid, topic, payload, qos)
        org_state = _OrgRuntime(org, token,
                                DataPusher(self.idp, self.registry, publish, org.qos), publish)
        trace = "edge" if "Edge" in org.traces else "ota"
        for p in org.platforms:
            gw = p.gateway
            gw_state = NodeState(gw.node_id, NodeRole.GATEWAY, joules_to_nj(gw.battery_j), gw.costs,
                                 gw.buffer_capacity)
            self.world.add_gateway(gw_state, org.channels[gw.uplink],
                                   GatewayInfo(org.org_id, org.wire_format, org.qos, trace))
            if trace == "edge":
                org_state.edges[gw.node_id] = EdgeAdapter(
                    org.org_id, org.wire_format, self.registry, publish, org.qos,
                    gateway_alive=lambda g=gw_state: g.alive)
            for n in p.nodes:
                node = NodeState(n.node_id, NodeRole.SENSING, joules_to_nj(n.battery_j), n.costs,
                                 n.buffer_capacity)
                self.world.add_node(node, org.channels[n.uplink], gw.node_id)
                for s in n.sensors:
                    self.world.add_sensor(n.node_id, s, p.platform_id, n.location, n.aggregation)
        if "Fetcher" in org.traces:
            rows = self.fetch_store.setdefault(org.org_id, [])
            source = FetchSource(f"{org.org_id}-platform", org.org_id, f"memory://{org.org_id}",
                                 org.wire_format, org.poll_interval_s, reader=lambda rows=rows: list(rows))
            self.fetch_sources[org.org_id] = source
            t = org.poll_interval_s
            while t <= self.cfg.duration_s + self.cfg.drain_s:
                self.queue.schedule(t, self._poll, org.org_id)
                t += org.poll_interval_s
        self._orgs[org.org_id] = org_state

    # -- callbacks -------------------------------------------------------------------

    def _on_cloud(self, delivery: CloudDelivery) -> None:
        org = self._orgs[delivery.org_id]
        now = self.clock_ms()
        self.archive.write(delivery.org_id, delivery.source_format.value, now, delivery.payload)
        if delivery.via == "edge":
            edge = org.edges[delivery.gateway_id]
            fields = [r.fields for r in parse_payload(delivery.payload, delivery.source_format,
                                                      delivery.org_id, now)]
            edge.edge_integrate(fields, now)
            return
        if "Fetcher" in org.config.traces:
            for r in parse_payload(delivery.payload, delivery.source_format, delivery.org_id, now):
                self.fetch_store[delivery.org_id].append(dict(r.fields))
        if "Pusher" in org.config.traces:
            try:
                receipt = org.pusher.push_ingest(org.token, delivery.payload,
                                                 delivery.source_format, delivery.org_id)
            except (NotAuthorized, UnparseablePayload):
                self.push_rejected[delivery.org_id] += delivery.records
                return
            self.push_rejected[delivery.org_id] += len(receipt.rejected)

    def _poll(self, org_id: str) -> None:
        source = self.fetch_sources[org_id]
        org = self._orgs[org_id]
        try:
            records = fetch_poll(source, self.queue.now, self.registry, self.clock_ms())
        except SourceUnavailable:
            return
        publish_records(records, self.registry, org.publish, org.config.qos)

    def _consume(self, endpoint: ConsumerEndpoint, message: Message) -> None:
        endpoint.topics[message.topic] += 1
        if message.topic.startswith(("data/", "quarantine/")):
            endpoint.received.append(Observation.from_json(message.payload))

    def _low_battery(self, node_id: str, t: float) -> None:
        org = self.world.node_org[node_id]
        self.pipeline.raise_alarm(Alarm(AlarmKind.LOW_BATTERY, (node_id, "battery"),
                                        self.clock_ms(), "battery below 10%", org))

    def _broker_alarm(self, broker: str, event) -> None:
        self.pipeline.raise_alarm(Alarm(AlarmKind(event.kind), (event.client_id, broker),
                                        self.clock_ms(), event.detail, ""))

    # -- metrics -----------------------------------------------------------------------

    def _update_gauges(self) -> None:
        m = self.metrics
        for name, broker in self.net.brokers.items():
            m.gauge_set("broker_inflight", {"broker": name}, broker.inflight_count())
        for node_id in sorted(self.world.nodes):
            node = self.world.nodes[node_id]
            m.gauge_set("node_battery_j", {"node": node_id}, node.battery_j)
            if node.role is NodeRole.GATEWAY:
                before = self._cost_reported.get(node_id, Decimal(0))
                delta = node.ota_cost - before
                m.counter_inc("ota_cost_total", {"gateway": node_id}, float(delta))
                self._cost_reported[node_id] = node.ota_cost
        for org_id in sorted(self.world.ledgers):
            ledger = self.world.ledgers[org_id]
            for name, value in (("samples_total", ledger.samples),
                                ("frames_sent_total", ledger.frames_sent),
                                ("frames_lost_total", ledger.frames_lost)):
                before = self._sim_reported.get((name, org_id), 0)
                m.counter_inc(name, {"org": org_id}, value - before)
                self._sim_reported[(name, org_id)] = value

    def snapshot(self) -> str:
        self._update_gauges()
        text = self.metrics.render()
        self.expositions.append(text)
        return text

    # -- driving -------------------------------------------------------------------------

    def _advance(self, until: float) -> None:
        while self.queue.now < until:
            target = min(self.queue.now + self.cfg.tick_s, until)
            started = time.monotonic()
            span = target - self.queue.now
            self.world.step(target)
            self.net.tick()
            if math.isfinite(self.speedup) and self.speedup > 0:
                remaining = span / self.speedup - (time.monotonic() - started)
                if remaining > 0:
                    time.sleep(remaining)

    def _drain(self, limit: float) -> None:
        while self.queue.now < limit and (len(self.queue) or self.net.inflight()):
            self._advance(min(limit, self.queue.now + self.cfg.tick_s))

    def execute(self) -> RunReport:
        cfg = self.cfg
        t = cfg.qc_sweep_s
        while t <= cfg.duration_s:
            self.queue.schedule(t, self.pipeline.sweep)
            t += cfg.qc_sweep_s
        t = cfg.exposition_interval_s
        while t <= cfg.duration_s:
            self.queue.schedule(t, self.snapshot)
            t += cfg.exposition_interval_s
        self.world.start()
        self._advance(cfg.duration_s)
        self._drain(cfg.duration_s + cfg.drain_s)
        if self.event_log:
            self.world.write_event_log(self.event_log)
        self.report = self._report()
        return self.report

    def _report(self) -> RunReport:
        cfg = self.cfg
        final = self.snapshot()
        breaches = [str(b) for b in evaluate_slos(self.metrics, cfg.slo, self.queue.now)]
        orgs = {}
        for org in cfg.organizations:
            ledger = self.world.ledgers.get(org.org_id)
            counts = self.pipeline.counts[org.org_id]
            orgs[org.org_id] = OrgReport(
                samples=ledger.samples if ledger else 0,
                frames_sent=ledger.frames_sent if ledger else 0,
                frames_lost=ledger.frames_lost if ledger else 0,
                delivered_to_cloud=ledger.delivered if ledger else 0,
                readings_lost=ledger.lost if ledger else 0,
                suppressed=ledger.suppressed if ledger else 0,
                buffered=self.world.buffered(org.org_id) if ledger else 0,
                push_rejected=self.push_rejected[org.org_id],
                records_ingested=counts.records_ingested,
                transform_errors=counts.transform_errors,
                dedup_drops=counts.dedup_drops,
                observations_stored=counts.observations_stored,
                missing_synthesized=counts.missing_synthesized,
                quarantined=counts.quarantined,
                conservation_gap=self.world.conservation_gap(org.org_id) if ledger else 0,
                alarms=dict(sorted(counts.alarms.items())),
            )
        energy = {
            node_id: NodeEnergy(n.initial_nj, n.battery_nj, n.debited_nj, n.alive, n.died_at)
            for node_id, n in sorted(self.world.nodes.items())
        }
        cost = {node_id: str(n.ota_cost.quantize(Decimal("0.000001")))
                for node_id, n in sorted(self.world.nodes.items()) if n.role is NodeRole.GATEWAY}
        return RunReport(cfg.name, cfg.seed, cfg.duration_s, orgs, energy, cost,
                         dict(sorted(self.pipeline.counts["platform"].alarms.items()))
                         if "platform" in self.pipeline.counts else {},
                         breaches, final, self.event_log)


@dataclass
class _OrgRuntime:
    config: OrgConfig
    token: str
    pusher: DataPusher
    publish: Callable[[str, bytes, int], None]
    edges: dict[str, EdgeAdapter] = field(default_factory=dict)


def describe_sim(reg: Registry) -> None:
    reg.describe("samples_total", MetricKind.COUNTER, "Sensor readings taken")
    reg.describe("frames_sent_total", MetricKind.COUNTER, "Frames put on UWSN and carrier links")
    reg.describe("frames_lost_total", MetricKind.COUNTER, "Frames lost on UWSN and carrier links")


def apply_overrides(cfg: ScenarioConfig, overrides: dict | None) -> ScenarioConfig:
    if not overrides:
        return cfg
    known = {"seed", "duration_s", "drain_s", "tick_s"}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(cfg.source, ",".join(sorted(unknown)), "unknown override")
    updates = {k: v for k, v in overrides.items() if v is not None}
    if "seed" in updates:
        updates["seed"] = int(updates["seed"])
    if "duration_s" in updates:
        updates["duration_s"] = float(updates["duration_s"])
    return replace(cfg, **updates)


def execute(cfg: ScenarioConfig, overrides: dict | None = None, **options: Any) -> ScenarioRun:
    run_ = ScenarioRun(apply_overrides(cfg, overrides), **options)
    run_.execute()
    return run_


def run(cfg: ScenarioConfig, overrides: dict | None = None, **options: Any) -> RunReport:
    return execute(cfg, overrides, **options).report
