"""Producer-side types: sensors, faults, nodes with batteries, channels, aggregation.

Energy is kept in integer nanojoules so the ledger balances exactly.
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Any

NJ_PER_J = 1_000_000_000
DAY_S = 86_400.0
UAC_MAX_BPS = 10_000


def joules_to_nj(joules: float | str | Decimal) -> int:
    return int((Decimal(str(joules)) * NJ_PER_J).to_integral_value())


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the file or section, ``field`` the key."""

    def __init__(self, path: str, field: str, reason: str):
        super().__init__(f"{path}: {field}: {reason}")
        self.path = path
        self.field = field
        self.reason = reason


@dataclass(frozen=True)
class SignalModel:
    base: float = 10.0
    amplitude: float = 0.0
    noise_std: float = 0.0
    period_s: float = DAY_S
    phase: float = 0.0

    def clean(self, t: float) -> float:
        if not self.amplitude:
            return self.base
        return self.base + self.amplitude * math.sin(2 * math.pi * t / self.period_s + self.phase)

    @classmethod
    def from_dict(cls, data: dict | None) -> "SignalModel":
        return cls(**(data or {}))


class FaultKind(str, Enum):
    SPIKE = "Spike"
    STUCK = "Stuck"
    DRIFT = "Drift"
    OUT_OF_RANGE = "OutOfRange"
    NODE_DEAD = "NodeDead"
    LINK_DOWN = "LinkDown"


SENSOR_FAULTS = {FaultKind.SPIKE, FaultKind.STUCK, FaultKind.DRIFT, FaultKind.OUT_OF_RANGE}
CLEAN = "Clean"


@dataclass(frozen=True)
class FaultEvent:
    kind: FaultKind
    start: float
    end: float
    magnitude: float = 0.0
    target: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        if not self.start < self.end:
            raise ValueError(f"fault {self.kind.value} needs start < end")

    def active(self, t: float) -> bool:
        return self.start <= t < self.end

    @property
    def on_sensor(self) -> bool:
        return self.kind in SENSOR_FAULTS

    @classmethod
    def from_dict(cls, data: dict) -> "FaultEvent":
        return cls(FaultKind(data["kind"]), float(data["start_s"]), float(data["end_s"]),
                   float(data.get("magnitude", 0.0)), data.get("target", ""))


@dataclass(frozen=True)
class SensorSpec:
    sensor_id: str
    parameter: str
    unit: str
    sampling_interval_s: float
    valid_range: tuple[float, float]
    signal: SignalModel = SignalModel()
    fault_plan: tuple[FaultEvent, ...] = ()

    def __post_init__(self):
        if self.sampling_interval_s <= 0:
            raise ValueError(f"{self.sensor_id}: sampling_interval_s must be > 0")
        lo, hi = self.valid_range
        if not lo < hi:
            raise ValueError(f"{self.sensor_id}: valid_range needs min < max")
        for fault in self.fault_plan:
            if not fault.on_sensor:
                raise ValueError(f"{self.sensor_id}: {fault.kind.value} attaches to a node")


@dataclass(frozen=True)
class RawReading:
    sensor_id: str
    t: float
    value: float
    true_flag: str = CLEAN


@dataclass(frozen=True)
class EnergyCosts:
    sample_nj: int = joules_to_nj("0.005")
    cpu_per_record_nj: int = joules_to_nj("0.001")
    tx_per_byte_nj: int = joules_to_nj("0.05")
    rx_per_byte_nj: int = joules_to_nj("0.025")

    def __post_init__(self):
        if min(self.sample_nj, self.cpu_per_record_nj, self.tx_per_byte_nj, self.rx_per_byte_nj) < 0:
            raise ValueError("energy costs must be >= 0")
        if not self.tx_per_byte_nj > self.cpu_per_record_nj:
            raise ValueError("tx_per_byte_j must exceed cpu_per_record_j")

    @classmethod
    def from_dict(cls, data: dict | None) -> "EnergyCosts":
        data = data or {}
        base = cls()
        return cls(
            sample_nj=joules_to_nj(data["sample_j"]) if "sample_j" in data else base.sample_nj,
            cpu_per_record_nj=(joules_to_nj(data["cpu_per_record_j"])
                               if "cpu_per_record_j" in data else base.cpu_per_record_nj),
            tx_per_byte_nj=(joules_to_nj(data["tx_per_byte_j"])
                            if "tx_per_byte_j" in data else base.tx_per_byte_nj),
            rx_per_byte_nj=(joules_to_nj(data["rx_per_byte_j"])
                            if "rx_per_byte_j" in data else base.rx_per_byte_nj),
        )


class NodeRole(str, Enum):
    SENSING = "Sensing"
    GATEWAY = "Gateway"


class NodeDead(Exception):
    pass


@dataclass
class NodeState:
    node_id: str
    role: NodeRole
    battery_nj: int
    costs: EnergyCosts = field(default_factory=EnergyCosts)
    buffer_capacity: int = 256
    buffer: deque = field(default_factory=deque)
    fault_dead: bool = False
    link_down: bool = False
    initial_nj: int = -1
    ledger: dict[str, int] = field(default_factory=dict)
    ota_cost: Decimal = Decimal(0)
    died_at: float | None = None
    bytes_sent: int = 0

    def __post_init__(self):
        if self.battery_nj < 0:
            raise ValueError("battery must be >= 0")
        if self.initial_nj < 0:
            self.initial_nj = self.battery_nj

    @property
    def alive(self) -> bool:
        return self.battery_nj > 0 and not self.fault_dead

    @property
    def battery_j(self) -> float:
        return self.battery_nj / NJ_PER_J

    @property
    def debited_nj(self) -> int:
        return sum(self.ledger.values())

    def debit(self, kind: str, amount_nj: int, t: float | None = None) -> bool:
        """Charge ``amount_nj``; False (and the node dies) if the battery runs out."""
        paid = min(amount_nj, self.battery_nj)
        self.battery_nj -= paid
        self.ledger[kind] = self.ledger.get(kind, 0) + paid
        if self.battery_nj == 0:
            if self.died_at is None:
                self.died_at = t
            return False
        return True


class ChannelKind(str, Enum):
    UAC = "UAC"
    SERIAL = "Serial"
    OTA = "OTA"


CHANNEL_DEFAULTS: dict[ChannelKind, dict[str, Any]] = {
    ChannelKind.UAC: {"bandwidth_bps": 2000, "base_latency_s": 1.5, "jitter_s": 0.5,
                      "frame_loss_prob": 0.10},
    ChannelKind.SERIAL: {"bandwidth_bps": 9600, "base_latency_s": 0.0, "jitter_s": 0.0,
                         "frame_loss_prob": 0.0},
    ChannelKind.OTA: {"bandwidth_bps": 64_000, "base_latency_s": 2.0, "jitter_s": 0.5,
                      "frame_loss_prob": 0.0, "cost_per_kb": "0.05"},
}


@dataclass(frozen=True)
class ChannelModel:
    kind: ChannelKind
    bandwidth_bps: float
    base_latency_s: float = 0.0
    jitter_s: float = 0.0
    frame_loss_prob: float = 0.0
    bit_error_rate: float = 0.0
    duty_cycle: tuple[tuple[float, float], ...] = ()
    cost_per_kb: Decimal = Decimal(0)

    def __post_init__(self):
        object.__setattr__(self, "kind", ChannelKind(self.kind))
        object.__setattr__(self, "cost_per_kb", Decimal(str(self.cost_per_kb)))
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth_bps must be > 0")
        if not 0 <= self.frame_loss_prob <= 1 or not 0 <= self.bit_error_rate <= 1:
            raise ValueError("loss probabilities must lie in [0, 1]")
        if self.kind is ChannelKind.UAC and self.bandwidth_bps > UAC_MAX_BPS:
            raise ValueError(f"UAC bandwidth above {UAC_MAX_BPS} bps")
        if self.kind is ChannelKind.SERIAL and (self.frame_loss_prob or self.bit_error_rate):
            raise ValueError("serial links are lossless")
        if self.kind is not ChannelKind.OTA and self.cost_per_kb:
            raise ValueError("only OTA links carry a per-kB cost")
        for start, end in self.duty_cycle:
            if not (0 <= start < DAY_S and 0 < end <= DAY_S and start != end):
                raise ValueError(f"bad duty window {(start, end)}")

    @classmethod
    def of(cls, kind: ChannelKind | str, **overrides: Any) -> "ChannelModel":
        kind = ChannelKind(kind)
        params = dict(CHANNEL_DEFAULTS[kind])
        params.update(overrides)
        if "duty_cycle" in params:
            params["duty_cycle"] = tuple(tuple(w) for w in params["duty_cycle"])
        return cls(kind, **params)

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelModel":
        data = dict(data)
        return cls.of(data.pop("kind"), **data)

    def in_window(self, t: float) -> bool:
        if not self.duty_cycle:
            return True
        tod = t % DAY_S
        for start, end in self.duty_cycle:
            if start < end and start <= tod < end:
                return True
            if start > end and (tod >= start or tod < end):
                return True
        return False

    def next_window(self, t: float) -> float:
        if self.in_window(t):
            return t
        day = math.floor(t / DAY_S) * DAY_S
        tod = t - day
        return min(day + s if s > tod else day + DAY_S + s for s, _ in self.duty_cycle)


class AggregationMode(str, Enum):
    RAW = "Raw"
    MEAN_OVER_WINDOW = "MeanOverWindow"
    EVENT_ONLY = "EventOnly"


@dataclass(frozen=True)
class AggregationPolicy:
    mode: AggregationMode = AggregationMode.RAW
    window_s: float = 0.0
    event_threshold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", AggregationMode(self.mode))
        if self.mode is AggregationMode.MEAN_OVER_WINDOW and self.window_s <= 0:
            raise ValueError("MeanOverWindow needs window_s > 0")

    def samples_per_window(self, sampling_interval_s: float) -> int:
        if self.mode is not AggregationMode.MEAN_OVER_WINDOW:
            return 1
        n = self.window_s / sampling_interval_s
        if n < 1 or abs(n - round(n)) > 1e-9:
            raise ValueError("window_s must be a multiple of sampling_interval_s")
        return int(round(n))

    def record_interval(self, sampling_interval_s: float) -> float | None:
        """Expected spacing of emitted records, or None when emission is data driven."""
        if self.mode is AggregationMode.EVENT_ONLY:
            return None
        return sampling_interval_s * self.samples_per_window(sampling_interval_s)

    @classmethod
    def from_dict(cls, data: dict | None) -> "AggregationPolicy":
        data = data or {}
        return cls(AggregationMode(data.get("mode", "Raw")), float(data.get("window_s", 0)),
                   float(data.get("event_threshold", 0)))


@dataclass(frozen=True)
class OutRecord:
    """One record leaving a node. ``t_ms`` is the offset from the world epoch."""

    sensor_id: str
    t_ms: int
    value: float
    vmin: float | None = None
    vmax: float | None = None
    count: int = 1


class TransmitStatus(str, Enum):
    DELIVERED = "Delivered"
    LOST = "Lost"
    DEFERRED = "Deferred"


@dataclass(frozen=True)
class TransmitResult:
    status: TransmitStatus
    at: float | None = None


def entity_rng(seed: int, *parts: str) -> random.Random:
    """Independent stream for one entity; seeding from a string hashes it (SHA-512)."""
    return random.Random(":".join((str(seed),) + parts))
