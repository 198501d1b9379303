"""In-memory transport with seeded drop/duplicate/delay injection.

Links are FIFO per direction (like the TCP streams MQTT assumes): a
delayed frame also holds back every frame sent after it on that link.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable

from seaflow.broker.client import Client
from seaflow.broker.core import AlarmEvent, Broker, Close, Send, TransportAction
from seaflow.broker.packets import Packet, decode_packet, encode_packet
from seaflow.broker.session import Message, ProtocolViolation
from seaflow.engine import EventQueue


@dataclass(frozen=True)
class LinkProfile:
    drop: float = 0.0
    dup: float = 0.0
    delay_s: float = 0.0
    jitter_s: float = 0.0
    codec: bool = False

    def __post_init__(self):
        for name in ("drop", "dup"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")
        if self.delay_s < 0 or self.jitter_s < 0:
            raise ValueError("delay and jitter must be >= 0")

    @classmethod
    def from_dict(cls, data: dict | None) -> "LinkProfile":
        return cls(**(data or {}))


LOSSLESS = LinkProfile()


@dataclass
class LinkStats:
    sent: int = 0
    dropped: int = 0
    duplicated: int = 0
    arrived: int = 0


class Link:
    def __init__(self, profile: LinkProfile, rng: random.Random, queue: EventQueue,
                 deliver: Callable[[Packet], None]):
        self.profile = profile
        self.rng = rng
        self.queue = queue
        self.deliver = deliver
        self.stats = LinkStats()
        self._last_arrival = float("-inf")
        self.up = True

    def send(self, packet: Packet) -> None:
        p = self.profile
        self.stats.sent += 1
        if p.codec:
            packet = decode_packet(encode_packet(packet))
        if p.drop and self.rng.random() < p.drop:
            self.stats.dropped += 1
            return
        copies = 1
        if p.dup and self.rng.random() < p.dup:
            copies = 2
            self.stats.duplicated += 1
        for _ in range(copies):
            delay = p.delay_s + (p.jitter_s * self.rng.random() if p.jitter_s else 0.0)
            arrival = max(self.queue.now + delay, self._last_arrival)
            self._last_arrival = arrival
            self.queue.schedule(arrival, self._arrive, packet)

    def _arrive(self, packet: Packet) -> None:
        if not self.up:
            return
        self.stats.arrived += 1
        self.deliver(packet)


@dataclass
class Endpoint:
    client: Client
    broker_name: str
    up: Link
    down: Link
    on_message: Callable[[Message], None] | None = None
    received: list[Message] = field(default_factory=list)
    keep_messages: bool = False
    closed_reason: str | None = None


class InMemoryNetwork:
    """Drives brokers and clients on one event queue."""

    def __init__(self, queue: EventQueue | None = None, seed: int = 0):
        self.queue = EventQueue() if queue is None else queue
        self.seed = seed
        self.brokers: dict[str, Broker] = {}
        self.endpoints: dict[str, Endpoint] = {}
        self.alarms: list[AlarmEvent] = []
        self.on_alarm: Callable[[str, AlarmEvent], None] | None = None

    def _rng(self, *parts: str) -> random.Random:
        return random.Random(":".join((str(self.seed),) + parts))

    def add_broker(self, name: str, broker: Broker) -> Broker:
        self.brokers[name] = broker
        return broker

    def add_client(self, client: Client, broker_name: str, up: LinkProfile = LOSSLESS,
                   down: LinkProfile = LOSSLESS,
                   on_message: Callable[[Message], None] | None = None,
                   keep_messages: bool = False) -> Endpoint:
        cid = client.client_id
        if cid in self.endpoints:
            raise ValueError(f"duplicate client id {cid!r}")
        if broker_name not in self.brokers:
            raise KeyError(f"unknown broker {broker_name!r}")
        up_link = Link(up, self._rng(broker_name, cid, "up"), self.queue,
                       lambda p: self._at_broker(broker_name, cid, p))
        down_link = Link(down, self._rng(broker_name, cid, "down"), self.queue,
                         lambda p: self._at_client(cid, p))
        endpoint = Endpoint(client, broker_name, up_link, down_link, on_message,
                            keep_messages=keep_messages)
        self.endpoints[cid] = endpoint
        return endpoint

    # -- client-side API ---------------------------------------------------

    def _send_up(self, cid: str, packets: list[Packet]) -> None:
        link = self.endpoints[cid].up
        for p in packets:
            link.send(p)

    def connect(self, cid: str) -> None:
        self._send_up(cid, self.endpoints[cid].client.connect(self.queue.now))

    def subscribe(self, cid: str, filters: list[tuple[str, int]]) -> None:
        self._send_up(cid, self.endpoints[cid].client.subscribe(filters, self.queue.now))

    def publish(self, cid: str, topic: str, payload: bytes, qos: int) -> None:
        endpoint = self.endpoints[cid]
        if endpoint.closed_reason is not None:
            return
        self._send_up(cid, endpoint.client.publish(topic, payload, qos, self.queue.now))

    # -- delivery ------------------------------------------------------------

    def _at_broker(self, broker_name: str, cid: str, packet: Packet) -> None:
        actions = self.brokers[broker_name].handle_packet(cid, packet, self.queue.now)
        self._apply(broker_name, actions)

    def _apply(self, broker_name: str, actions: list[TransportAction]) -> None:
        for action in actions:
            if isinstance(action, Send):
                endpoint = self.endpoints.get(action.client_id)
                if endpoint is not None:
                    endpoint.down.send(action.packet)
            elif isinstance(action, Close):
                endpoint = self.endpoints.get(action.client_id)
                if endpoint is not None and endpoint.closed_reason is None:
                    endpoint.closed_reason = action.reason
            elif isinstance(action, AlarmEvent):
                self.alarms.append(action)
                if self.on_alarm is not None:
                    self.on_alarm(broker_name, action)

    def _at_client(self, cid: str, packet: Packet) -> None:
        endpoint = self.endpoints[cid]
        try:
            replies, deliveries = endpoint.client.handle_packet(packet, self.queue.now)
        except ProtocolViolation as exc:
            endpoint.closed_reason = f"ProtocolViolation: {exc}"
            return
        for p in replies:
            endpoint.up.send(p)
        for message in deliveries:
            if endpoint.keep_messages:
                endpoint.received.append(message)
            if endpoint.on_message is not None:
                endpoint.on_message(message)

    # -- timers ----------------------------------------------------------------

    def tick(self) -> None:
        now = self.queue.now
        for name in sorted(self.brokers):
            broker = self.brokers[name]
            self._apply(name, broker.tick(now))
        for cid in sorted(self.endpoints):
            endpoint = self.endpoints[cid]
            client = endpoint.client
            if not client.busy or endpoint.closed_reason is not None:
                continue
            was_failed = client.failed
            self._send_up(cid, client.tick(now))
            if client.failed and not was_failed:
                alarm = AlarmEvent("SessionFailed", cid, "client retransmissions exhausted")
                self.alarms.append(alarm)
                if self.on_alarm is not None:
                    self.on_alarm(endpoint.broker_name, alarm)

    def inflight(self) -> int:
        total = sum(b.inflight_count() for b in self.brokers.values())
        for endpoint in self.endpoints.values():
            if endpoint.closed_reason is None and not endpoint.client.failed:
                total += int(endpoint.client.busy)
        return total

    def run_until_quiet(self, tick_interval_s: float = 1.0, max_time_s: float = 1e7) -> float:
        """Advance the clock, ticking retransmission timers, until nothing is in flight."""
        while self.queue.now < max_time_s:
            self.queue.run(self.queue.now + tick_interval_s)
            self.tick()
            if not len(self.queue) and not self.inflight():
                break
        return self.queue.now
