"""Packet model and the MQTT 3.1.1 wire subset used by the brokers.

Supported control packets: CONNECT, CONNACK, PUBLISH, PUBACK, PUBREC,
PUBREL, PUBCOMP, SUBSCRIBE, SUBACK, DISCONNECT. Retain, will and
MQTT 5 properties are not supported.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum


class QoSLevel(IntEnum):
    AT_MOST_ONCE = 0
    AT_LEAST_ONCE = 1
    EXACTLY_ONCE = 2


class PacketKind(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    DISCONNECT = 14


ACK_KINDS = (PacketKind.PUBACK, PacketKind.PUBREC, PacketKind.PUBREL, PacketKind.PUBCOMP)

SUBACK_FAILURE = 0x80
CONNACK_ACCEPTED = 0
CONNACK_NOT_AUTHORIZED = 5


class MalformedPacket(ValueError):
    pass


class InvalidPacket(ValueError):
    """Raised by :func:`encode_packet` for packets that break the model's invariants."""


@dataclass(frozen=True)
class Packet:
    kind: PacketKind
    packet_id: int = 0
    topic: str = ""
    payload: bytes = b""
    qos: QoSLevel = QoSLevel.AT_MOST_ONCE
    dup: bool = False
    # CONNECT
    client_id: str = ""
    username: str | None = None
    password: str | None = None
    keepalive: int = 60
    clean_session: bool = True
    # CONNACK
    return_code: int = 0
    session_present: bool = False
    # SUBSCRIBE / SUBACK
    subscriptions: tuple[tuple[str, QoSLevel], ...] = ()
    return_codes: tuple[int, ...] = ()


def publish(topic: str, payload: bytes, qos: int = 0, packet_id: int = 0, dup: bool = False) -> Packet:
    return Packet(PacketKind.PUBLISH, packet_id=packet_id, topic=topic, payload=payload,
                  qos=QoSLevel(qos), dup=dup)


def ack(kind: PacketKind, packet_id: int) -> Packet:
    return Packet(kind, packet_id=packet_id)


def check_packet(p: Packet) -> None:
    if p.kind is PacketKind.PUBLISH:
        if p.qos > 0 and not 1 <= p.packet_id <= 0xFFFF:
            raise InvalidPacket("QoS>0 PUBLISH requires packet_id in 1..65535")
        if p.qos == 0 and (p.packet_id != 0 or p.dup):
            raise InvalidPacket("QoS0 PUBLISH carries neither packet_id nor dup")
        if not p.topic:
            raise InvalidPacket("PUBLISH requires a topic")
        if "+" in p.topic or "#" in p.topic:
            raise InvalidPacket("PUBLISH topic must not contain wildcards")
    else:
        if p.dup:
            raise InvalidPacket("dup is only legal on PUBLISH")
        if p.qos != 0:
            raise InvalidPacket("qos is only carried by PUBLISH")
    if p.kind in ACK_KINDS + (PacketKind.SUBSCRIBE, PacketKind.SUBACK):
        if not 1 <= p.packet_id <= 0xFFFF:
            raise InvalidPacket(f"{p.kind.name} requires packet_id in 1..65535")
    if p.kind is PacketKind.SUBSCRIBE and not p.subscriptions:
        raise InvalidPacket("SUBSCRIBE requires at least one filter")
    if p.kind is PacketKind.SUBACK and not p.return_codes:
        raise InvalidPacket("SUBACK requires at least one return code")
    if p.kind is PacketKind.CONNECT and p.password is not None and p.username is None:
        raise InvalidPacket("password requires username in MQTT 3.1.1")


# -- encoding ---------------------------------------------------------------


def _utf8(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise InvalidPacket("string field longer than 65535 bytes")
    return struct.pack("!H", len(raw)) + raw


def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= 268_435_455:
        raise InvalidPacket("remaining length out of range")
    out = bytearray()
    while True:
        byte, n = n % 128, n // 128
        if n:
            byte |= 0x80
        out.append(byte)
        if not n:
            return bytes(out)


def encode_packet(p: Packet) -> bytes:
    check_packet(p)
    flags = 0
    kind = p.kind
    if kind is PacketKind.CONNECT:
        connect_flags = 0
        if p.username is not None:
            connect_flags |= 0x80
        if p.password is not None:
            connect_flags |= 0x40
        if p.clean_session:
            connect_flags |= 0x02
        body = _utf8("MQTT") + bytes([4, connect_flags]) + struct.pack("!H", p.keepalive)
        body += _utf8(p.client_id)
        if p.username is not None:
            body += _utf8(p.username)
        if p.password is not None:
            body += _utf8(p.password)
    elif kind is PacketKind.CONNACK:
        body = bytes([1 if p.session_present else 0, p.return_code])
    elif kind is PacketKind.PUBLISH:
        flags = (0x08 if p.dup else 0) | (int(p.qos) << 1)
        body = _utf8(p.topic)
        if p.qos > 0:
            body += struct.pack("!H", p.packet_id)
        body += p.payload
    elif kind in ACK_KINDS:
        if kind is PacketKind.PUBREL:
            flags = 0x02
        body = struct.pack("!H", p.packet_id)
    elif kind is PacketKind.SUBSCRIBE:
        flags = 0x02
        body = struct.pack("!H", p.packet_id)
        for topic_filter, qos in p.subscriptions:
            body += _utf8(topic_filter) + bytes([int(qos)])
    elif kind is PacketKind.SUBACK:
        body = struct.pack("!H", p.packet_id) + bytes(p.return_codes)
    elif kind is PacketKind.DISCONNECT:
        body = b""
    else:  # pragma: no cover - PacketKind is closed
        raise InvalidPacket(f"unsupported kind {kind!r}")
    return bytes([(int(kind) << 4) | flags]) + encode_remaining_length(len(body)) + body


# -- decoding ---------------------------------------------------------------


def decode_remaining_length(data: bytes, offset: int = 1) -> tuple[int, int] | None:
    """Return ``(length, header_size)`` or ``None`` if more bytes are needed."""
    multiplier = 1
    value = 0
    for i in range(4):
        pos = offset + i
        if pos >= len(data):
            return None
        byte = data[pos]
        value += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            return value, offset + i + 1
        multiplier *= 128
    raise MalformedPacket("remaining length exceeds 4 bytes")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedPacket(f"truncated body at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def utf8(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPacket("invalid UTF-8 string") from exc

    def rest(self) -> bytes:
        chunk = self.data[self.pos:]
        self.pos = len(self.data)
        return chunk

    def done(self) -> bool:
        return self.pos == len(self.data)


def decode_packet(data: bytes) -> Packet:
    if len(data) < 2:
        raise MalformedPacket("truncated fixed header")
    header = decode_remaining_length(data)
    if header is None:
        raise MalformedPacket("truncated fixed header")
    length, start = header
    if len(data) != start + length:
        raise MalformedPacket(
            f"remaining length {length} does not match {len(data) - start} body bytes"
        )
    type_code, flags = data[0] >> 4, data[0] & 0x0F
    try:
        kind = PacketKind(type_code)
    except ValueError as exc:
        raise MalformedPacket(f"unsupported packet type {type_code}") from exc
    r = _Reader(data[start:])

    if kind is PacketKind.PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos == 3:
            raise MalformedPacket("PUBLISH qos=3")
        if flags & 0x01:
            raise MalformedPacket("retain is not supported")
        dup = bool(flags & 0x08)
        topic = r.utf8()
        packet_id = r.u16() if qos else 0
        packet = Packet(kind, packet_id=packet_id, topic=topic, payload=r.rest(),
                        qos=QoSLevel(qos), dup=dup)
    else:
        expected_flags = 0x02 if kind in (PacketKind.PUBREL, PacketKind.SUBSCRIBE) else 0
        if flags != expected_flags:
            raise MalformedPacket(f"bad fixed-header flags {flags:#x} for {kind.name}")
        if kind is PacketKind.CONNECT:
            if r.utf8() != "MQTT" or r.u8() != 4:
                raise MalformedPacket("only MQTT 3.1.1 CONNECT is supported")
            connect_flags = r.u8()
            if connect_flags & 0x01:
                raise MalformedPacket("reserved CONNECT flag set")
            if connect_flags & 0x3C:
                raise MalformedPacket("will messages are not supported")
            keepalive = r.u16()
            client_id = r.utf8()
            username = r.utf8() if connect_flags & 0x80 else None
            password = r.utf8() if connect_flags & 0x40 else None
            packet = Packet(kind, client_id=client_id, username=username, password=password,
                            keepalive=keepalive, clean_session=bool(connect_flags & 0x02))
        elif kind is PacketKind.CONNACK:
            ack_flags = r.u8()
            packet = Packet(kind, session_present=bool(ack_flags & 0x01), return_code=r.u8())
        elif kind in ACK_KINDS:
            packet = Packet(kind, packet_id=r.u16())
        elif kind is PacketKind.SUBSCRIBE:
            packet_id = r.u16()
            subs = []
            while not r.done():
                topic_filter = r.utf8()
                qos = r.u8()
                if qos > 2:
                    raise MalformedPacket("SUBSCRIBE requested qos > 2")
                subs.append((topic_filter, QoSLevel(qos)))
            packet = Packet(kind, packet_id=packet_id, subscriptions=tuple(subs))
        elif kind is PacketKind.SUBACK:
            packet_id = r.u16()
            packet = Packet(kind, packet_id=packet_id, return_codes=tuple(r.rest()))
        else:
            packet = Packet(kind)
    if not r.done():
        raise MalformedPacket(f"{len(r.data) - r.pos} trailing bytes in {kind.name}")
    try:
        check_packet(packet)
    except InvalidPacket as exc:
        raise MalformedPacket(str(exc)) from exc
    return packet


def split_frames(buffer: bytes) -> tuple[list[Packet], bytes]:
    """Decode every complete frame at the start of ``buffer``; return the remainder."""
    packets = []
    while len(buffer) >= 2:
        header = decode_remaining_length(buffer)
        if header is None:
            break
        length, start = header
        end = start + length
        if len(buffer) < end:
            break
        packets.append(decode_packet(buffer[:end]))
        buffer = buffer[end:]
    return packets, buffer
