"""Sans-IO MQTT client endpoint."""

from __future__ import annotations

from seaflow.broker.packets import Packet, PacketKind, QoSLevel, SUBACK_FAILURE
from seaflow.broker.session import Message, ProtocolViolation, QosSession


class Client:
    def __init__(self, client_id: str, username: str | None = None, password: str | None = None,
                 retransmit_timeout_s: float = 5.0, max_retries: int = 8,
                 max_inflight: int = 1000):
        self.client_id = client_id
        self.username = username
        self.password = password
        self.qos = QosSession(retransmit_timeout_s, max_retries, max_inflight)
        self.connected = False
        self.refused = False
        self.granted: dict[str, int] = {}
        self._pending_subs: dict[int, tuple[tuple[str, QoSLevel], ...]] = {}
        self._sub_id = 0
        self._sub_deadline: dict[int, float] = {}
        self._connect_deadline: float | None = None
        self.delivered = 0

    def _connect_packet(self) -> Packet:
        return Packet(PacketKind.CONNECT, client_id=self.client_id, username=self.username,
                      password=self.password)

    def connect(self, now: float = 0.0) -> list[Packet]:
        self._connect_deadline = now + self.qos.retransmit_timeout_s
        return [self._connect_packet()]

    def disconnect(self) -> list[Packet]:
        self.connected = False
        return [Packet(PacketKind.DISCONNECT)]

    def subscribe(self, filters: list[tuple[str, int]], now: float = 0.0) -> list[Packet]:
        self._sub_id = self._sub_id % 0xFFFF + 1
        subs = tuple((f, QoSLevel(q)) for f, q in filters)
        self._pending_subs[self._sub_id] = subs
        self._sub_deadline[self._sub_id] = now + self.qos.retransmit_timeout_s
        return [Packet(PacketKind.SUBSCRIBE, packet_id=self._sub_id, subscriptions=subs)]

    def publish(self, topic: str, payload: bytes, qos: int, now: float) -> list[Packet]:
        return self.qos.send(topic, payload, qos, now)

    def handle_packet(self, packet: Packet, now: float) -> tuple[list[Packet], list[Message]]:
        kind = packet.kind
        if kind is PacketKind.CONNACK:
            self.connected = packet.return_code == 0
            self.refused = not self.connected
            self._connect_deadline = None
            return [], []
        if kind is PacketKind.SUBACK:
            subs = self._pending_subs.pop(packet.packet_id, ())
            self._sub_deadline.pop(packet.packet_id, None)
            for (topic_filter, _), code in zip(subs, packet.return_codes):
                if code != SUBACK_FAILURE:
                    self.granted[topic_filter] = code
            return [], []
        if kind in (PacketKind.CONNECT, PacketKind.SUBSCRIBE, PacketKind.DISCONNECT):
            raise ProtocolViolation(f"broker sent {kind.name}")
        replies, deliveries = self.qos.receive(packet, now)
        self.delivered += len(deliveries)
        return replies, deliveries

    def tick(self, now: float) -> list[Packet]:
        """Resend an unanswered CONNECT/SUBSCRIBE and retransmit expired QoS flows."""
        out = []
        timeout = self.qos.retransmit_timeout_s
        if self._connect_deadline is not None and now >= self._connect_deadline:
            self._connect_deadline = now + timeout
            out.append(self._connect_packet())
        for sub_id in sorted(self._sub_deadline):
            if now >= self._sub_deadline[sub_id]:
                self._sub_deadline[sub_id] = now + timeout
                out.append(Packet(PacketKind.SUBSCRIBE, packet_id=sub_id,
                                  subscriptions=self._pending_subs[sub_id]))
        return out + self.qos.expire(now)

    @property
    def busy(self) -> bool:
        return bool(self.qos.inflight_count or self._sub_deadline
                    or self._connect_deadline is not None)

    @property
    def failed(self) -> bool:
        return self.qos.failed
