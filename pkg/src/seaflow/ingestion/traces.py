"""The three ingestion traces: Data Pusher, Data Fetcher and Edge Integration.

Every trace ends the same way: one ``RawRecord`` (as JSON) published to the
ingestion broker on ``ingest/<org_id>/<platform_id>``. The traces are not
exclusive; overlapping deliveries are removed by the transform stage's
deduplicator.
"""

from __future__ import annotations

import json
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from seaflow.access import Action, Identity, IdentityProvider, InvalidToken, UnknownPrincipal, authorize
from seaflow.broker.core import NotAuthorized
from seaflow.ingestion.formats import RawRecord, SourceFormat, UnparseablePayload, parse_payload
from seaflow.transform import ConversionError, MappingError, MappingRegistry, to_canonical

PublishFn = Callable[[str, bytes, int], None]

BACKOFF_BASE_S = 2.0
BACKOFF_CAP_S = 300.0


def ingest_topic(org_id: str, platform_id: str) -> str:
    return f"ingest/{org_id}/{platform_id}"


@dataclass(frozen=True)
class RecordError:
    index: int
    field: str
    reason: str

    def __str__(self) -> str:
        return f"record {self.index}: {self.field}: {self.reason}"


@dataclass(frozen=True)
class IngestReceipt:
    accepted: int
    rejected: tuple[RecordError, ...] = ()


class DataPusher:
    """Producer-push endpoint: authenticate, parse, validate, republish."""

    def __init__(self, idp: IdentityProvider, registry: MappingRegistry, publish: PublishFn,
                 qos: int = 1):
        self.idp = idp
        self.registry = registry
        self.publish = publish
        self.qos = qos

    def push_ingest(self, token: str, payload: bytes, fmt: SourceFormat | str,
                    org_id: str) -> IngestReceipt:
        try:
            identity = self.idp.authenticate(token)
        except (InvalidToken, UnknownPrincipal) as exc:
            raise NotAuthorized(str(exc)) from exc
        if identity.principal.org_id != org_id:
            raise NotAuthorized(f"{identity.principal.principal_id} belongs to "
                                f"{identity.principal.org_id}, not {org_id}")
        if not authorize(identity, Action.INGEST, f"ingest/{org_id}/#"):
            raise NotAuthorized(f"no ingest grant for {org_id}")
        now = self.idp.clock()
        records = parse_payload(payload, SourceFormat(fmt), org_id, now)
        return publish_records(records, self.registry, self.publish, self.qos, identity)


def publish_records(records: Iterable[RawRecord], registry: MappingRegistry,
                    publish: PublishFn, qos: int,
                    identity: Identity | None = None) -> IngestReceipt:
    """Validate each record on its own and publish the good ones."""
    accepted = 0
    rejected: list[RecordError] = []
    for i, record in enumerate(records):
        try:
            obs = to_canonical(record, registry)
        except ConversionError as exc:
            rejected.append(RecordError(i, exc.field, exc.reason))
            continue
        except MappingError as exc:
            rejected.append(RecordError(i, "mapping", str(exc)))
            continue
        topic = ingest_topic(record.org_id, obs.platform_id)
        if identity is not None and not authorize(identity, Action.INGEST, topic):
            rejected.append(RecordError(i, "platform_id", f"not authorized for {topic}"))
            continue
        publish(topic, record.to_json(), qos)
        accepted += 1
    return IngestReceipt(accepted, tuple(rejected))


# -- Data Fetcher ----------------------------------------------------------------


class SourceUnavailable(Exception):
    pass


Reader = Callable[[], list[Mapping[str, Any]]]


def file_reader(path: str | Path) -> Reader:
    """Read a JSON-lines file of flat field objects."""

    def read() -> list[Mapping[str, Any]]:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise SourceUnavailable(f"{path}: {exc}") from exc
        return [json.loads(line) for line in lines if line.strip()]

    return read


def http_reader(url: str, timeout_s: float = 10.0) -> Reader:
    """GET a ``{"records": [...]}`` document."""

    def read() -> list[Mapping[str, Any]]:
        try:
            with urllib.request.urlopen(url, timeout=timeout_s) as resp:
                return json.loads(resp.read())["records"]
        except (urllib.error.URLError, OSError, ValueError, KeyError) as exc:
            raise SourceUnavailable(f"{url}: {exc}") from exc

    return read


@dataclass
class FetchSource:
    source_id: str
    org_id: str
    endpoint: str
    source_format: SourceFormat
    poll_interval_s: float
    reader: Reader | None = None
    initial_cursor: int = -1
    # per-sensor resume token: the newest measured_at already emitted
    cursor: dict[str, int] = field(default_factory=dict)
    last_poll: float | None = None
    failures: int = 0
    next_poll_at: float = 0.0

    def __post_init__(self):
        if self.poll_interval_s <= 0:
            raise ValueError("poll_interval_s must be > 0")
        self.source_format = SourceFormat(self.source_format)
        if self.reader is None:
            if self.endpoint.startswith(("http://", "https://")):
                self.reader = http_reader(self.endpoint)
            else:
                self.reader = file_reader(self.endpoint)

    @property
    def high_water(self) -> int:
        return max(self.cursor.values(), default=self.initial_cursor)

    def due(self, now: float) -> bool:
        return now >= self.next_poll_at


def backoff_delay(failures: int, base_s: float = BACKOFF_BASE_S, cap_s: float = BACKOFF_CAP_S) -> float:
    return min(cap_s, base_s * 2 ** max(0, failures - 1))


def fetch_poll(source: FetchSource, now: float, registry: MappingRegistry,
               received_at: int | None = None) -> list[RawRecord]:
    """Return records newer than the cursor and advance it.

    ``now`` is the poll clock in seconds; ``received_at`` (epoch ms) stamps
    the returned records and defaults to ``now`` in milliseconds. Records the
    mapping cannot type are skipped here and left to the transform stage.
    """
    if not source.due(now):
        return []
    try:
        rows = source.reader()
    except SourceUnavailable:
        source.failures += 1
        source.next_poll_at = now + backoff_delay(source.failures)
        raise
    source.failures = 0
    source.last_poll = now
    source.next_poll_at = now + source.poll_interval_s
    stamp = int(now * 1000) if received_at is None else received_at
    fresh: list[tuple[int, str, RawRecord]] = []
    for row in rows:
        record = RawRecord(source.org_id, source.source_format,
                           {str(k): str(v) for k, v in row.items()}, stamp)
        try:
            obs = to_canonical(record, registry)
        except (ConversionError, MappingError):
            continue
        if obs.measured_at > source.cursor.get(obs.sensor_id, source.initial_cursor):
            fresh.append((obs.measured_at, obs.sensor_id, record))
    fresh.sort(key=lambda item: (item[0], item[1]))
    out = []
    seen: set[tuple[str, int]] = set()
    for measured_at, sensor_id, record in fresh:
        if (sensor_id, measured_at) in seen:
            continue
        seen.add((sensor_id, measured_at))
        out.append(record)
        if measured_at > source.cursor.get(sensor_id, source.initial_cursor):
            source.cursor[sensor_id] = measured_at
    return out


# -- Edge Integration ------------------------------------------------------------


class EdgeAdapter:
    """Converts gateway-local records at the edge; no carrier link, so no OTA cost."""

    def __init__(self, org_id: str, source_format: SourceFormat, registry: MappingRegistry,
                 publish: PublishFn, qos: int = 1, gateway_alive: Callable[[], bool] = lambda: True):
        self.org_id = org_id
        self.source_format = SourceFormat(source_format)
        self.registry = registry
        self.publish = publish
        self.qos = qos
        self.gateway_alive = gateway_alive

    def edge_integrate(self, local_records: Iterable[Mapping[str, Any]],
                       received_at: int) -> list[RawRecord]:
        if not self.gateway_alive():
            return []
        records = [RawRecord(self.org_id, self.source_format,
                             {str(k): str(v) for k, v in fields.items()}, received_at)
                   for fields in local_records]
        emitted = []
        for record in records:
            receipt = publish_records([record], self.registry, self.publish, self.qos)
            if receipt.accepted:
                emitted.append(record)
        return emitted


def edge_integrate(adapter: EdgeAdapter, local_records: Iterable[Mapping[str, Any]],
                   received_at: int) -> list[RawRecord]:
    return adapter.edge_integrate(local_records, received_at)
