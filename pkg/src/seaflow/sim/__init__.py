"""Deterministic simulator of the producer side: nodes, links, gateways."""

from seaflow.sim.frames import decode_frame, encode_frame
from seaflow.sim.model import (
    AggregationMode,
    AggregationPolicy,
    ChannelKind,
    ChannelModel,
    ConfigError,
    EnergyCosts,
    FaultEvent,
    FaultKind,
    NodeDead,
    NodeRole,
    NodeState,
    OutRecord,
    RawReading,
    SensorSpec,
    SignalModel,
    TransmitResult,
    TransmitStatus,
    joules_to_nj,
)
from seaflow.sim.world import (
    CloudDelivery,
    GatewayInfo,
    SimEvent,
    World,
    local_process,
    sample,
    transmit,
)

__all__ = [
    "AggregationMode", "AggregationPolicy", "ChannelKind", "ChannelModel", "CloudDelivery",
    "ConfigError", "EnergyCosts", "FaultEvent", "FaultKind", "GatewayInfo", "NodeDead",
    "NodeRole", "NodeState", "OutRecord", "RawReading", "SensorSpec", "SignalModel", "SimEvent",
    "TransmitResult", "TransmitStatus", "World", "decode_frame", "encode_frame", "joules_to_nj",
    "local_process", "sample", "transmit",
]
