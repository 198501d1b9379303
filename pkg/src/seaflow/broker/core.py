"""Sans-IO publish/subscribe broker.

The same class backs the ingestion broker and the core broker; only the
config and the authorization hooks differ. All state lives in one
:class:`Broker` object that must be driven from a single loop
(:class:`~seaflow.broker.transport.InMemoryNetwork` in simulation,
:mod:`seaflow.service` over TCP).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Union

from seaflow.broker.packets import (
    CONNACK_ACCEPTED,
    CONNACK_NOT_AUTHORIZED,
    SUBACK_FAILURE,
    Packet,
    PacketKind,
    QoSLevel,
)
from seaflow.broker.session import Message, ProtocolViolation, QosSession
from seaflow.broker.topics import InvalidTopic, match_filter, validate_filter, validate_topic

log = logging.getLogger(__name__)

# authenticate(username, password) -> identity or None
Authenticator = Callable[[Union[str, None], Union[str, None]], Any]
# authorize(identity, action, topic_or_filter) -> bool ; action in {"publish", "subscribe"}
Authorizer = Callable[[Any, str, str], bool]


class NotAuthorized(Exception):
    pass


@dataclass(frozen=True)
class BrokerConfig:
    name: str = "broker"
    retransmit_timeout_ms: int = 5000
    max_retries: int = 8
    max_inflight: int = 1000

    @classmethod
    def from_dict(cls, data: dict) -> "BrokerConfig":
        return cls(**{k: data[k] for k in ("name", "retransmit_timeout_ms", "max_retries",
                                            "max_inflight") if k in data})


@dataclass(frozen=True)
class Send:
    client_id: str
    packet: Packet


@dataclass(frozen=True)
class Close:
    client_id: str
    reason: str


@dataclass(frozen=True)
class AlarmEvent:
    kind: str
    client_id: str
    detail: str


TransportAction = Union[Send, Close, AlarmEvent]


@dataclass
class BrokerSession:
    client_id: str
    identity: Any
    qos: QosSession
    credentials: tuple[str | None, str | None] = (None, None)
    subscriptions: dict[str, QoSLevel] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.qos.failed


@dataclass(frozen=True)
class PublishOutcome:
    matched: int
    delivered_qos0: int
    inflight_created: int
    denied: int = 0


@dataclass
class BrokerStats:
    received: int = 0
    routed: int = 0
    denied_publish: int = 0
    denied_subscribe: int = 0
    denied_delivery: int = 0
    protocol_violations: int = 0
    sessions_failed: int = 0


def _allow_all(identity: Any, action: str, topic: str) -> bool:
    return True


class Broker:
    def __init__(self, config: BrokerConfig | None = None,
                 authenticate: Authenticator | None = None,
                 authorize: Authorizer | None = None):
        self.config = config or BrokerConfig()
        self._authenticate = authenticate
        self._authorize = authorize or _allow_all
        self.sessions: dict[str, BrokerSession] = {}
        self.stats = BrokerStats()
        self._last_tick = float("-inf")

    # -- connection management --------------------------------------------

    def _new_qos(self) -> QosSession:
        return QosSession(self.config.retransmit_timeout_ms / 1000.0, self.config.max_retries,
                          self.config.max_inflight)

    def connect(self, client_id: str, username: str | None = None,
                password: str | None = None) -> BrokerSession | None:
        if self._authenticate is None:
            identity = None
        else:
            identity = self._authenticate(username, password)
            if identity is None:
                return None
        session = BrokerSession(client_id, identity, self._new_qos(), (username, password))
        self.sessions[client_id] = session
        return session

    def disconnect(self, client_id: str) -> None:
        self.sessions.pop(client_id, None)

    # -- packet handling ---------------------------------------------------

    def handle_packet(self, client_id: str, packet: Packet, now: float) -> list[TransportAction]:
        if packet.kind is PacketKind.CONNECT:
            existing = self.sessions.get(client_id)
            if existing is not None and existing.credentials == (packet.username, packet.password):
                # a repeated CONNECT (lost CONNACK) resumes the session untouched
                return [Send(client_id, Packet(PacketKind.CONNACK, session_present=True))]
            session = self.connect(client_id, packet.username, packet.password)
            code = CONNACK_ACCEPTED if session is not None else CONNACK_NOT_AUTHORIZED
            actions: list[TransportAction] = [
                Send(client_id, Packet(PacketKind.CONNACK, return_code=code))
            ]
            if session is None:
                actions.append(Close(client_id, "not authorized"))
            return actions

        session = self.sessions.get(client_id)
        if session is None:
            self.stats.protocol_violations += 1
            return [Close(client_id, f"ProtocolViolation: {packet.kind.name} before CONNECT")]
        try:
            return self._dispatch(session, packet, now)
        except ProtocolViolation as exc:
            self.stats.protocol_violations += 1
            self.disconnect(client_id)
            log.warning("%s: closing %s: %s", self.config.name, client_id, exc)
            return [Close(client_id, f"ProtocolViolation: {exc}")]

    def _dispatch(self, session: BrokerSession, packet: Packet, now: float) -> list[TransportAction]:
        kind = packet.kind
        cid = session.client_id
        if kind is PacketKind.DISCONNECT:
            self.disconnect(cid)
            return []
        if kind is PacketKind.SUBSCRIBE:
            return [Send(cid, self._subscribe(session, packet))]
        if kind is PacketKind.CONNACK or kind is PacketKind.SUBACK:
            raise ProtocolViolation(f"client sent {kind.name}")

        replies, deliveries = session.qos.receive(packet, now)
        actions: list[TransportAction] = [Send(cid, p) for p in replies]
        for message in deliveries:
            self.stats.received += 1
            try:
                outcome_actions, _ = self._route(session, message.topic, message.payload,
                                                 message.qos, now)
            except (NotAuthorized, InvalidTopic) as exc:
                log.info("%s: dropped publish from %s: %s", self.config.name, cid, exc)
                continue
            actions.extend(outcome_actions)
        return actions

    def _subscribe(self, session: BrokerSession, packet: Packet) -> Packet:
        codes = []
        for topic_filter, qos in packet.subscriptions:
            try:
                validate_filter(topic_filter)
            except InvalidTopic:
                codes.append(SUBACK_FAILURE)
                continue
            if not self._authorize(session.identity, "subscribe", topic_filter):
                self.stats.denied_subscribe += 1
                codes.append(SUBACK_FAILURE)
                continue
            session.subscriptions[topic_filter] = QoSLevel(qos)
            codes.append(int(qos))
        return Packet(PacketKind.SUBACK, packet_id=packet.packet_id, return_codes=tuple(codes))

    def subscribe(self, client_id: str, topic_filter: str, qos: int) -> bool:
        session = self.sessions[client_id]
        suback = self._subscribe(session, Packet(
            PacketKind.SUBSCRIBE, packet_id=1, subscriptions=((topic_filter, QoSLevel(qos)),)))
        return suback.return_codes[0] != SUBACK_FAILURE

    # -- routing -----------------------------------------------------------

    def publish(self, client_id: str, topic: str, payload: bytes, qos: int,
                now: float) -> tuple[PublishOutcome, list[TransportAction]]:
        """Publish on behalf of a connected session, bypassing the inbound handshake."""
        session = self.sessions.get(client_id)
        if session is None:
            raise NotAuthorized(f"{client_id} is not connected")
        actions, outcome = self._route(session, topic, payload, QoSLevel(qos), now)
        return outcome, actions

    def _route(self, publisher: BrokerSession, topic: str, payload: bytes, qos: QoSLevel,
               now: float) -> tuple[list[TransportAction], PublishOutcome]:
        validate_topic(topic)
        if not self._authorize(publisher.identity, "publish", topic):
            self.stats.denied_publish += 1
            raise NotAuthorized(f"{publisher.client_id} may not publish on {topic!r}")
        actions: list[TransportAction] = []
        matched = delivered = inflight = denied = 0
        for cid in sorted(self.sessions):
            session = self.sessions[cid]
            if session.failed:
                continue
            granted = None
            for topic_filter, sub_qos in session.subscriptions.items():
                if match_filter(topic_filter, topic):
                    granted = sub_qos if granted is None else max(granted, sub_qos)
            if granted is None:
                continue
            matched += 1
            if not self._authorize(session.identity, "subscribe", topic):
                self.stats.denied_delivery += 1
                denied += 1
                continue
            effective = min(qos, granted)
            packets = session.qos.send(topic, payload, effective, now)
            if effective == 0:
                delivered += 1
            else:
                inflight += 1
            actions.extend(Send(cid, p) for p in packets)
        self.stats.routed += 1
        return actions, PublishOutcome(matched, delivered, inflight, denied)

    # -- timers ------------------------------------------------------------

    def tick(self, now: float) -> list[TransportAction]:
        if now < self._last_tick:
            raise ValueError("tick time went backwards")
        self._last_tick = now
        actions: list[TransportAction] = []
        for cid in sorted(self.sessions):
            session = self.sessions[cid]
            if not session.qos.outbound_inflight:
                continue
            was_failed = session.failed
            actions.extend(Send(cid, p) for p in session.qos.expire(now))
            if session.failed and not was_failed:
                self.stats.sessions_failed += 1
                actions.append(AlarmEvent("SessionFailed", cid,
                                          f"retransmissions exhausted after {self.config.max_retries}"))
                actions.append(Close(cid, "retransmissions exhausted"))
                self.disconnect(cid)
        return actions

    def inflight_count(self) -> int:
        return sum(s.qos.inflight_count for s in self.sessions.values())


__all__ = [
    "AlarmEvent",
    "Broker",
    "BrokerConfig",
    "BrokerSession",
    "Close",
    "Message",
    "NotAuthorized",
    "PublishOutcome",
    "Send",
    "TransportAction",
]
