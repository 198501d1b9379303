"""QoS handshake state shared by broker sessions and clients.

One :class:`QosSession` holds both directions of a connection: the
outbound inflight table (sender side of QoS 1/2) and the inbound QoS 2
dedup set (receiver side). It is sans-IO: methods return the packets to
send and the messages to hand to the application.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum

from seaflow.broker.packets import Packet, PacketKind, QoSLevel, ack, publish


class ProtocolViolation(Exception):
    pass


class Phase(Enum):
    AWAITING_PUBACK = "awaiting_puback"
    AWAITING_PUBREC = "awaiting_pubrec"
    AWAITING_PUBCOMP = "awaiting_pubcomp"


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes
    qos: QoSLevel
    dup: bool = False


@dataclass
class Inflight:
    message: Message
    qos: QoSLevel
    phase: Phase
    retransmit_deadline: float
    retries: int = 0


class QosSession:
    def __init__(self, retransmit_timeout_s: float = 5.0, max_retries: int = 8,
                 max_inflight: int = 1000):
        self.retransmit_timeout_s = retransmit_timeout_s
        self.max_retries = max_retries
        self.max_inflight = max_inflight
        self.outbound_inflight: dict[int, Inflight] = {}
        self.inbound_qos2_seen: set[int] = set()
        self.pending: deque[Message] = deque()
        self.failed = False
        # ids whose handshake finished; late duplicate acks for them are ignored
        self._completed: set[int] = set()
        # inbound ids already released by PUBREL; a repeated PUBREL is re-answered
        self._released: set[int] = set()
        self._next_id = 1

    # -- sender side -------------------------------------------------------

    def send(self, topic: str, payload: bytes, qos: int, now: float) -> list[Packet]:
        qos = QoSLevel(qos)
        if qos is QoSLevel.AT_MOST_ONCE:
            return [publish(topic, payload, 0)]
        message = Message(topic, payload, qos)
        if len(self.outbound_inflight) >= self.max_inflight:
            self.pending.append(message)
            return []
        return [self._start(message, now)]

    def _allocate_id(self) -> int:
        for _ in range(0xFFFF):
            candidate = self._next_id
            self._next_id = candidate % 0xFFFF + 1
            if candidate not in self.outbound_inflight:
                self._completed.discard(candidate)
                return candidate
        raise RuntimeError("no free packet identifiers")

    def _start(self, message: Message, now: float) -> Packet:
        packet_id = self._allocate_id()
        phase = Phase.AWAITING_PUBACK if message.qos == 1 else Phase.AWAITING_PUBREC
        self.outbound_inflight[packet_id] = Inflight(
            message, message.qos, phase, now + self.retransmit_timeout_s
        )
        return publish(message.topic, message.payload, message.qos, packet_id)

    def _finish(self, packet_id: int, now: float) -> list[Packet]:
        del self.outbound_inflight[packet_id]
        self._completed.add(packet_id)
        out = []
        while self.pending and len(self.outbound_inflight) < self.max_inflight:
            out.append(self._start(self.pending.popleft(), now))
        return out

    # -- receive -----------------------------------------------------------

    def receive(self, packet: Packet, now: float) -> tuple[list[Packet], list[Message]]:
        """Process one inbound packet; return (replies, application deliveries)."""
        kind = packet.kind
        pid = packet.packet_id
        if kind is PacketKind.PUBLISH:
            return self._receive_publish(packet)
        if kind is PacketKind.PUBREL:
            if pid in self.inbound_qos2_seen:
                self.inbound_qos2_seen.discard(pid)
                self._released.add(pid)
                return [ack(PacketKind.PUBCOMP, pid)], []
            if pid in self._released:
                return [ack(PacketKind.PUBCOMP, pid)], []
            raise ProtocolViolation(f"PUBREL for unknown packet id {pid}")

        entry = self.outbound_inflight.get(pid)
        if kind is PacketKind.PUBACK:
            if entry is not None and entry.phase is Phase.AWAITING_PUBACK:
                return self._finish(pid, now), []
            if entry is None and pid in self._completed:
                return [], []
            raise ProtocolViolation(f"PUBACK for unknown packet id {pid}")
        if kind is PacketKind.PUBREC:
            if entry is not None and entry.phase is Phase.AWAITING_PUBREC:
                entry.phase = Phase.AWAITING_PUBCOMP
                entry.retries = 0
                entry.retransmit_deadline = now + self.retransmit_timeout_s
                return [ack(PacketKind.PUBREL, pid)], []
            if entry is not None and entry.phase is Phase.AWAITING_PUBCOMP:
                return [ack(PacketKind.PUBREL, pid)], []
            if entry is None and pid in self._completed:
                return [], []
            raise ProtocolViolation(f"PUBREC for unknown packet id {pid}")
        if kind is PacketKind.PUBCOMP:
            if entry is not None and entry.phase is Phase.AWAITING_PUBCOMP:
                return self._finish(pid, now), []
            if entry is None and pid in self._completed:
                return [], []
            raise ProtocolViolation(f"PUBCOMP for unknown packet id {pid}")
        raise ProtocolViolation(f"unexpected {kind.name} in QoS flow")

    def _receive_publish(self, packet: Packet) -> tuple[list[Packet], list[Message]]:
        message = Message(packet.topic, packet.payload, packet.qos, packet.dup)
        if packet.qos is QoSLevel.AT_MOST_ONCE:
            return [], [message]
        pid = packet.packet_id
        if packet.qos is QoSLevel.AT_LEAST_ONCE:
            return [ack(PacketKind.PUBACK, pid)], [message]
        if pid in self.inbound_qos2_seen:
            return [ack(PacketKind.PUBREC, pid)], []
        self._released.discard(pid)
        self.inbound_qos2_seen.add(pid)
        return [ack(PacketKind.PUBREC, pid)], [message]

    # -- timers ------------------------------------------------------------

    def expire(self, now: float) -> list[Packet]:
        """Retransmit every inflight entry whose deadline has passed.

        An entry that already used ``max_retries`` retransmissions marks the
        session failed instead.
        """
        out = []
        for pid in sorted(self.outbound_inflight):
            entry = self.outbound_inflight[pid]
            if entry.retransmit_deadline > now:
                continue
            if entry.retries >= self.max_retries:
                self.failed = True
                continue
            entry.retries += 1
            entry.retransmit_deadline = now + self.retransmit_timeout_s
            if entry.phase is Phase.AWAITING_PUBCOMP:
                out.append(ack(PacketKind.PUBREL, pid))
            else:
                m = entry.message
                out.append(publish(m.topic, m.payload, m.qos, pid, dup=True))
        return out

    @property
    def inflight_count(self) -> int:
        return len(self.outbound_inflight) + len(self.pending)
