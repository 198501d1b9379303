"""Service mode: MQTT over TCP, an HTTP push/metrics/query endpoint, wall clock.

One asyncio loop owns both brokers, the pipeline and the data space. TCP
connections feed packets into that loop; the HTTP server runs on its own
thread and hands every request to the loop as a job, so broker and store
state is only ever touched from one place. Internal components (the
pipeline's two broker connections and the push gateway) are loopback
clients whose packets are passed through ``call_soon``.
"""

from __future__ import annotations

import asyncio
import concurrent.futures
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qs, urlsplit

from seaflow.access import (
    AccessError,
    Action,
    Grant,
    IdentityProvider,
    InvalidToken,
    Principal,
    Role,
    UnknownPrincipal,
)
from seaflow.broker.client import Client
from seaflow.broker.core import AlarmEvent, Broker, BrokerConfig, Close, NotAuthorized, Send
from seaflow.broker.packets import MalformedPacket, Packet, PacketKind, encode_packet, split_frames
from seaflow.broker.session import Message, ProtocolViolation
from seaflow.dataspace import DataSpace, Selector
from seaflow.ingestion.formats import SourceFormat, UnparseablePayload
from seaflow.ingestion.traces import DataPusher
from seaflow.model import DataCategory, iso_to_epoch_ms
from seaflow.monitoring import Registry
from seaflow.pipeline import Pipeline
from seaflow.qc import Alarm, AlarmKind, QcConfig, QcStage, SensorProfile
from seaflow.transform import MappingNotFound, MappingRegistry, style_mapping
from seaflow.triage import TriagePolicy

log = logging.getLogger(__name__)

SERVICE_PRINCIPAL = "seaflow-service"
EXPOSITION_TYPE = "text/plain; version=0.0.4; charset=utf-8"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    mqtt_port: int = 1883
    http_port: int = 8080
    broker: BrokerConfig = field(default_factory=BrokerConfig)
    qc: QcConfig = field(default_factory=QcConfig)
    triage: TriagePolicy = field(default_factory=lambda: TriagePolicy(DataCategory.OPEN_ACCESS))
    org_formats: dict[str, SourceFormat] = field(default_factory=dict)
    profiles: tuple[SensorProfile, ...] = ()
    tick_s: float = 1.0
    qc_sweep_s: float = 60.0
    token_ttl_s: float = 365 * 86_400


class _Loopback:
    """An in-process client attached to one broker."""

    def __init__(self, service: "Service", broker: str, client: Client,
                 on_message: Callable[[Message], None] | None = None):
        self.service = service
        self.broker = broker
        self.client = client
        self.on_message = on_message

    def send(self, packets: list[Packet]) -> None:
        for p in packets:
            self.service.loop.call_soon(self.service.deliver, self.broker, self.client.client_id, p)

    def receive(self, packet: Packet) -> None:
        try:
            replies, messages = self.client.handle_packet(packet, time.monotonic())
        except ProtocolViolation as exc:
            log.error("loopback %s: %s", self.client.client_id, exc)
            return
        self.send(replies)
        for m in messages:
            if self.on_message is not None:
                self.on_message(m)

    def close(self, reason: str) -> None:
        log.error("broker closed loopback %s: %s", self.client.client_id, reason)


class _TcpConnection:
    def __init__(self, broker: str, writer: asyncio.StreamWriter):
        self.broker = broker
        self.writer = writer

    def receive(self, packet: Packet) -> None:
        self.writer.write(encode_packet(packet))

    def close(self, reason: str) -> None:
        log.info("closing %s: %s", self.writer.get_extra_info("peername"), reason)
        self.writer.close()


class Service:
    def __init__(self, idp: IdentityProvider, store: DataSpace, cfg: ServiceConfig | None = None,
                 metrics: Registry | None = None):
        self.cfg = cfg or ServiceConfig()
        self.idp = idp
        self.store = store
        self.metrics = metrics or Registry(clock=time.time)
        self.registry = MappingRegistry()
        for org_id, fmt in sorted(self.cfg.org_formats.items()):
            self.registry.register(style_mapping(org_id, fmt))
        bc = self.cfg.broker
        self.brokers = {name: Broker(BrokerConfig(name, bc.retransmit_timeout_ms, bc.max_retries,
                                                  bc.max_inflight),
                                     idp.broker_authenticate, idp.broker_authorize)
                        for name in ("ingest", "core")}
        self.connections: dict[tuple[str, str], Any] = {}
        self.loop: asyncio.AbstractEventLoop | None = None
        self._servers: list[Any] = []
        self._http: ThreadingHTTPServer | None = None
        self._tasks: list[asyncio.Task] = []

    # -- loop-owned state ----------------------------------------------------------

    def deliver(self, broker: str, client_id: str, packet: Packet) -> None:
        self._apply(broker, self.brokers[broker].handle_packet(client_id, packet, time.monotonic()))

    def _apply(self, broker: str, actions: list) -> None:
        for action in actions:
            if isinstance(action, Send):
                conn = self.connections.get((broker, action.client_id))
                if conn is not None:
                    conn.receive(action.packet)
            elif isinstance(action, Close):
                conn = self.connections.pop((broker, action.client_id), None)
                if conn is not None:
                    conn.close(action.reason)
            elif isinstance(action, AlarmEvent):
                self.pipeline.raise_alarm(Alarm(AlarmKind(action.kind), (action.client_id, broker),
                                                self.idp.clock(), action.detail, ""))

    def _loopback(self, broker: str, client_id: str, token: str,
                  on_message: Callable[[Message], None] | None = None) -> _Loopback:
        bc = self.cfg.broker
        client = Client(client_id, client_id, token, bc.retransmit_timeout_ms / 1000,
                        bc.max_retries, bc.max_inflight)
        lb = _Loopback(self, broker, client, on_message)
        self.connections[(broker, client_id)] = lb
        lb.send(client.connect(time.monotonic()))
        return lb

    def _wire(self) -> None:
        if SERVICE_PRINCIPAL not in self.idp.store:
            self.idp.store.add(Principal(SERVICE_PRINCIPAL, "platform", frozenset({Role.OPERATOR})))
        token = self.idp.issue(SERVICE_PRINCIPAL, [
            Grant.topics(Action.SUBSCRIBE, "ingest/#"),
            Grant.topics(Action.PUBLISH, "data/#"),
            Grant.topics(Action.PUBLISH, "quarantine/#"),
            Grant.topics(Action.PUBLISH, "alarms/#"),
        ], self.cfg.token_ttl_s).encode()
        self.qc = QcStage(self.cfg.qc, self.cfg.profiles)
        out = self._loopback("core", "pipeline-out", token)
        self.pipeline = Pipeline(
            self.registry, self.qc, self.cfg.triage, self.store, self.metrics,
            lambda topic, payload, qos: out.send(out.client.publish(topic, payload, qos,
                                                                    time.monotonic())),
            self.idp.clock)
        for org_id in sorted(self.cfg.org_formats):
            self.pipeline.register_org(org_id)
        inbound = self._loopback("ingest", "pipeline-in", token,
                                 lambda m: self.pipeline.handle_raw(m.payload))
        inbound.send(inbound.client.subscribe([("ingest/#", 2)], time.monotonic()))
        self._gateways: dict[str, DataPusher] = {}

    def _pusher(self, org_id: str) -> DataPusher:
        """Push-gateway connection for one org, under its own org-scoped producer principal."""
        pusher = self._gateways.get(org_id)
        if pusher is None:
            pid = f"push-gateway-{org_id}"
            self.idp.store.add(Principal(pid, org_id, frozenset({Role.PRODUCER})))
            token = self.idp.issue(pid, [Grant.topics(Action.PUBLISH, f"ingest/{org_id}/#")],
                                   self.cfg.token_ttl_s).encode()
            lb = self._loopback("ingest", pid, token)
            pusher = DataPusher(self.idp, self.registry,
                                lambda topic, payload, qos: lb.send(
                                    lb.client.publish(topic, payload, qos, time.monotonic())))
            self._gateways[org_id] = pusher
        return pusher

    async def _timers(self) -> None:
        last_sweep = time.monotonic()
        while True:
            await asyncio.sleep(self.cfg.tick_s)
            now = time.monotonic()
            for name, broker in self.brokers.items():
                self._apply(name, broker.tick(now))
                self.metrics.gauge_set("broker_inflight", {"broker": name}, broker.inflight_count())
            for conn in list(self.connections.values()):
                if isinstance(conn, _Loopback) and conn.client.busy:
                    conn.send(conn.client.tick(now))
            if now - last_sweep >= self.cfg.qc_sweep_s:
                last_sweep = now
                self.pipeline.sweep()

    # -- TCP -----------------------------------------------------------------------

    async def _serve_mqtt(self, broker: str, reader: asyncio.StreamReader,
                          writer: asyncio.StreamWriter) -> None:
        buffer = b""
        client_id: str | None = None
        conn = _TcpConnection(broker, writer)
        try:
            while True:
                chunk = await reader.read(65536)
                if not chunk:
                    break
                buffer += chunk
                packets, buffer = split_frames(buffer)
                for packet in packets:
                    if client_id is None:
                        if packet.kind is not PacketKind.CONNECT:
                            return
                        client_id = packet.client_id
                        self.connections[(broker, client_id)] = conn
                    self.deliver(broker, client_id, packet)
                await writer.drain()
        except (MalformedPacket, ValueError) as exc:
            log.info("malformed MQTT stream: %s", exc)
        except ConnectionError:
            pass
        finally:
            if client_id is not None and self.connections.get((broker, client_id)) is conn:
                del self.connections[(broker, client_id)]
            writer.close()

    # -- HTTP (called on the HTTP thread) -----------------------------------------

    def call(self, fn: Callable[..., Any], *args: Any) -> Any:
        """Run ``fn`` on the service loop and wait for its result."""
        fut: concurrent.futures.Future = concurrent.futures.Future()

        def job() -> None:
            try:
                fut.set_result(fn(*args))
            except BaseException as exc:  # handed back to the caller
                fut.set_exception(exc)

        self.loop.call_soon_threadsafe(job)
        return fut.result(timeout=30)

    def push(self, org_id: str, token: str, body: bytes, fmt: SourceFormat | None) -> dict:
        identity = self.idp.authenticate(token)
        if identity.principal.org_id != org_id:
            raise NotAuthorized(f"{identity.principal.principal_id} may not push for {org_id}")
        fmt = SourceFormat(fmt or self.cfg.org_formats.get(org_id) or sniff_format(body))
        try:
            self.registry.current(org_id, fmt)
        except MappingNotFound:
            # unconfigured orgs get the built-in vocabulary for the format they send
            self.registry.register(style_mapping(org_id, fmt))
            self.pipeline.register_org(org_id)
        receipt = self._pusher(org_id).push_ingest(token, body, fmt, org_id)
        return {"accepted": receipt.accepted,
                "rejected": [{"index": e.index, "field": e.field, "reason": e.reason}
                             for e in receipt.rejected]}

    def query(self, token: str, params: dict[str, str]) -> list[str]:
        identity = self.idp.authenticate(token)
        selector = selector_from_params(params)
        return [obs.to_json() for obs in self.store.query(selector, identity)]

    # -- lifecycle -------------------------------------------------------------------

    async def start(self) -> None:
        self.loop = asyncio.get_running_loop()
        self._wire()
        host = self.cfg.host
        ingest = await asyncio.start_server(
            lambda r, w: self._serve_mqtt("ingest", r, w), host, self.cfg.mqtt_port)
        core = await asyncio.start_server(
            lambda r, w: self._serve_mqtt("core", r, w), host,
            self.cfg.mqtt_port + 1 if self.cfg.mqtt_port else 0)
        self._servers = [ingest, core]
        self._http = ThreadingHTTPServer((host, self.cfg.http_port), _handler(self))
        threading.Thread(target=self._http.serve_forever, daemon=True).start()
        self._tasks.append(asyncio.create_task(self._timers()))

    @property
    def ports(self) -> dict[str, int]:
        out = {name: s.sockets[0].getsockname()[1] for name, s in zip(("ingest", "core"), self._servers)}
        if self._http is not None:
            out["http"] = self._http.server_address[1]
        return out

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        for server in self._servers:
            server.close()
            await server.wait_closed()
        if self._http is not None:
            self._http.shutdown()
            self._http.server_close()

    async def serve_forever(self) -> None:
        await self.start()
        log.info("listening: %s", self.ports)
        try:
            await asyncio.Event().wait()
        finally:
            await self.stop()


def sniff_format(body: bytes) -> SourceFormat:
    return SourceFormat.XML_V1 if body.lstrip().startswith(b"<") else SourceFormat.JSON_V1


def selector_from_params(params: dict[str, str]) -> Selector:
    def ms(name: str) -> int | None:
        value = params.get(name)
        if value is None:
            return None
        return int(value) if value.isdigit() else iso_to_epoch_ms(value)

    cats = params.get("category")
    return Selector(
        org_id=params.get("org"),
        platform_id=params.get("platform"),
        parameter=params.get("parameter"),
        categories=frozenset(DataCategory(c) for c in cats.split(",")) if cats else None,
        time_from=ms("from"),
        time_to=ms("to"),
        include_quarantined=params.get("include_quarantined", "").lower() in ("1", "true", "yes"),
    )


def _bearer(headers) -> str | None:
    value = headers.get("Authorization", "")
    if value.startswith("Bearer "):
        return value[len("Bearer "):].strip()
    return None


def _handler(service: Service) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt: str, *args: Any) -> None:
            log.debug("http: " + fmt, *args)

        def _send(self, status: int, body: bytes, content_type: str = "application/json") -> None:
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _error(self, status: HTTPStatus, reason: str) -> None:
            self._send(status, json.dumps({"error": reason}).encode())

        def do_GET(self) -> None:
            url = urlsplit(self.path)
            if url.path == "/metrics":
                text = service.call(service.metrics.render)
                self._send(HTTPStatus.OK, text.encode(), EXPOSITION_TYPE)
                return
            if url.path == "/query":
                token = _bearer(self.headers)
                if token is None:
                    self._error(HTTPStatus.UNAUTHORIZED, "bearer token required")
                    return
                params = {k: v[-1] for k, v in parse_qs(url.query).items()}
                try:
                    rows = service.call(service.query, token, params)
                except (InvalidToken, UnknownPrincipal) as exc:
                    self._error(HTTPStatus.UNAUTHORIZED, str(exc) or type(exc).__name__)
                    return
                except NotAuthorized as exc:
                    self._error(HTTPStatus.FORBIDDEN, str(exc))
                    return
                except ValueError as exc:
                    self._error(HTTPStatus.BAD_REQUEST, str(exc))
                    return
                body = "".join(r + "\n" for r in rows).encode()
                self._send(HTTPStatus.OK, body, "application/x-ndjson")
                return
            self._error(HTTPStatus.NOT_FOUND, "not found")

        def do_POST(self) -> None:
            url = urlsplit(self.path)
            parts = url.path.strip("/").split("/")
            if len(parts) != 2 or parts[0] != "ingest":
                self._error(HTTPStatus.NOT_FOUND, "not found")
                return
            token = _bearer(self.headers)
            if token is None:
                self._error(HTTPStatus.UNAUTHORIZED, "bearer token required")
                return
            body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
            fmt_name = parse_qs(url.query).get("format", [None])[-1]
            try:
                fmt = SourceFormat(fmt_name) if fmt_name else None
                receipt = service.call(service.push, parts[1], token, body, fmt)
            except NotAuthorized as exc:
                self._error(HTTPStatus.FORBIDDEN, str(exc))
                return
            except AccessError as exc:
                self._error(HTTPStatus.UNAUTHORIZED, str(exc) or type(exc).__name__)
                return
            except (UnparseablePayload, ValueError) as exc:
                self._error(HTTPStatus.BAD_REQUEST, str(exc))
                return
            self._send(HTTPStatus.ACCEPTED, json.dumps(receipt).encode())

    return Handler
