"""Message-oriented middleware: MQTT 3.1.1 QoS semantics over pluggable transports."""

from seaflow.broker.client import Client
from seaflow.broker.core import (
    AlarmEvent,
    Broker,
    BrokerConfig,
    Close,
    NotAuthorized,
    PublishOutcome,
    Send,
)
from seaflow.broker.packets import (
    MalformedPacket,
    Packet,
    PacketKind,
    QoSLevel,
    decode_packet,
    encode_packet,
)
from seaflow.broker.session import Message, ProtocolViolation, QosSession
from seaflow.broker.topics import InvalidTopic, filter_covers, match_filter
from seaflow.broker.transport import InMemoryNetwork, LinkProfile

__all__ = [
    "AlarmEvent",
    "Broker",
    "BrokerConfig",
    "Client",
    "Close",
    "InMemoryNetwork",
    "InvalidTopic",
    "LinkProfile",
    "MalformedPacket",
    "Message",
    "NotAuthorized",
    "Packet",
    "PacketKind",
    "ProtocolViolation",
    "PublishOutcome",
    "QoSLevel",
    "QosSession",
    "Send",
    "decode_packet",
    "encode_packet",
    "filter_covers",
    "match_filter",
]
