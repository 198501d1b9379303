"""Stream-processing quality control.

Each arriving observation is checked for accuracy (range, spike, stuck),
completeness, consistency with nearby sensors and currentness. Gaps in a
stream are filled with synthesized missing observations, each paired with
one ``MissingData`` alarm.

All times here are epoch milliseconds.
"""

from __future__ import annotations

import math
import statistics
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Sequence

from seaflow.model import (
    AttributeFlag,
    Observation,
    QCReport,
    append_lineage,
)

G = AttributeFlag


class AlarmKind(str, Enum):
    MISSING_DATA = "MissingData"
    QC_BAD = "QcBad"
    SESSION_FAILED = "SessionFailed"
    LOW_BATTERY = "LowBattery"


@dataclass(frozen=True)
class Alarm:
    kind: AlarmKind
    key: tuple[str, str]
    at: int
    detail: str = ""
    org_id: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "key": list(self.key), "at": self.at,
                "detail": self.detail, "org_id": self.org_id}


@dataclass(frozen=True)
class QcConfig:
    spike_k: float = 6.0
    stuck_n: int = 5
    window: int = 20
    gap_tolerance_factor: float = 1.5
    currentness_max_age_s: float | None = None
    neighbor_radius_m: float = 1000.0
    max_delta: float = 2.0
    mad_floor: float = 1e-3
    alarm_horizon_s: float = 48 * 3600.0

    def __post_init__(self):
        for name in ("spike_k", "stuck_n", "gap_tolerance_factor", "neighbor_radius_m",
                     "max_delta", "mad_floor", "alarm_horizon_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"qc.{name} must be positive")
        if self.currentness_max_age_s is not None and self.currentness_max_age_s <= 0:
            raise ValueError("qc.currentness_max_age_s must be positive")
        if self.window < 5:
            raise ValueError("qc.window must be >= 5")
        if self.gap_tolerance_factor < 1:
            raise ValueError("qc.gap_tolerance_factor must be >= 1")

    @classmethod
    def from_dict(cls, data: dict | None) -> "QcConfig":
        return cls(**(data or {}))


@dataclass(frozen=True)
class SensorProfile:
    sensor_id: str
    parameter: str
    expected_interval_s: float | None = None
    valid_min: float | None = None
    valid_max: float | None = None


@dataclass
class StreamState:
    key: tuple[str, str]
    expected_interval_s: float | None = None
    valid_min: float | None = None
    valid_max: float | None = None
    window_size: int = 20
    last_seen: int | None = None
    window: deque = field(default_factory=deque)
    stuck_run: int = 0
    last_value: float | None = None
    template: Observation | None = None

    @classmethod
    def for_profile(cls, profile: SensorProfile | None, key: tuple[str, str],
                    window_size: int = 20) -> "StreamState":
        if profile is None:
            return cls(key, window_size=window_size)
        return cls(key, profile.expected_interval_s, profile.valid_min, profile.valid_max,
                   window_size)

    def values(self) -> list[float]:
        return [v for _, v in self.window]

    def remember(self, obs: Observation) -> None:
        """Fold an arrived (non-missing) observation into the stream history."""
        value = obs.value
        self.stuck_run = self.stuck_run + 1 if value == self.last_value else 1
        self.last_value = value
        # repeats add no information and would collapse the MAD after a stuck run
        if self._in_range(value) and self.stuck_run == 1:
            entry = (obs.measured_at, value)
            if not self.window or self.window[-1][0] <= obs.measured_at:
                self.window.append(entry)
            else:
                items = sorted(list(self.window) + [entry], key=lambda e: e[0])
                self.window = deque(items)
            while len(self.window) > self.window_size:
                self.window.popleft()
        if self.last_seen is None or obs.measured_at > self.last_seen:
            self.last_seen = obs.measured_at
        self.template = obs

    def _in_range(self, value: float) -> bool:
        if self.valid_min is not None and value < self.valid_min:
            return False
        if self.valid_max is not None and value > self.valid_max:
            return False
        return True


def median_and_mad(values: Sequence[float]) -> tuple[float, float]:
    med = statistics.median(values)
    return med, statistics.median(abs(v - med) for v in values)


def check_accuracy(obs: Observation, state: StreamState, cfg: QcConfig) -> AttributeFlag:
    value = obs.value
    if value is None:
        return G.NOT_EVALUATED
    if not state._in_range(value):
        return G.BAD
    stuck_run = state.stuck_run + 1 if value == state.last_value else 1
    if stuck_run >= cfg.stuck_n:
        return G.PROBABLY_BAD
    if len(state.window) < cfg.window:
        return G.PROBABLY_GOOD
    med, mad = median_and_mad(state.values())
    if abs(value - med) > cfg.spike_k * max(mad, cfg.mad_floor):
        return G.PROBABLY_BAD
    return G.GOOD


def missing_slots(last_seen: int, now: int, interval_ms: int, tolerance: float) -> list[int]:
    """Expected arrival times after ``last_seen`` that are overdue at ``now``.

    Slot ``k`` (at ``last_seen + k*interval``) is overdue once the silence
    reaches ``(k + tolerance - 1) * interval``.
    """
    silence = now - last_seen
    if silence < tolerance * interval_ms:
        return []
    count = math.floor((silence - (tolerance - 1) * interval_ms) / interval_ms)
    return [last_seen + k * interval_ms for k in range(1, count + 1)]


def synthesize_missing(template: Observation, measured_at: int, now: int) -> Observation:
    obs = Observation(
        observation_id=f"{template.org_id}:{template.sensor_id}:{measured_at}",
        org_id=template.org_id,
        platform_id=template.platform_id,
        sensor_id=template.sensor_id,
        parameter=template.parameter,
        unit=template.unit,
        value=None,
        measured_at=measured_at,
        ingested_at=now,
        location=template.location,
        qc=QCReport.of(G.NOT_EVALUATED, G.MISSING, G.NOT_EVALUATED, G.NOT_EVALUATED),
    )
    return append_lineage(obs, "qc", now, "synthesized missing value")


def check_completeness(state: StreamState, now: int,
                       cfg: QcConfig) -> list[tuple[Observation, Alarm]]:
    if state.last_seen is None or state.template is None or not state.expected_interval_s:
        return []
    if now < state.last_seen:
        return []
    interval_ms = int(round(state.expected_interval_s * 1000))
    slots = missing_slots(state.last_seen, now, interval_ms, cfg.gap_tolerance_factor)
    if not slots:
        return []
    state.last_seen = slots[-1]
    horizon = now - int(cfg.alarm_horizon_s * 1000)
    out = []
    for slot in slots:
        if slot < horizon:
            continue
        missing = synthesize_missing(state.template, slot, now)
        alarm = Alarm(AlarmKind.MISSING_DATA, state.key, now,
                      f"no value for measured_at={slot}", state.template.org_id)
        out.append((missing, alarm))
    return out


def check_consistency(obs: Observation, neighbors: Iterable[Observation],
                      cfg: QcConfig | None = None, max_delta: float | None = None) -> AttributeFlag:
    if max_delta is None:
        max_delta = (cfg or QcConfig()).max_delta
    values = [n.value for n in neighbors
              if n.value is not None and n.sensor_id != obs.sensor_id]
    if obs.value is None or not values:
        return G.NOT_EVALUATED
    if abs(obs.value - statistics.median(values)) > max_delta:
        return G.PROBABLY_BAD
    return G.GOOD


def check_currentness(obs: Observation, now: int, cfg: QcConfig,
                      expected_interval_s: float | None = None) -> AttributeFlag:
    max_age_s = cfg.currentness_max_age_s
    if max_age_s is None:
        if not expected_interval_s:
            return G.NOT_EVALUATED
        max_age_s = 2 * expected_interval_s
    age_ms = now - obs.measured_at
    if age_ms <= max_age_s * 1000:
        return G.GOOD
    if age_ms <= 10 * max_age_s * 1000:
        return G.PROBABLY_BAD
    return G.BAD


def run_qc(obs: Observation, state: StreamState, now: int, cfg: QcConfig,
           neighbors: Iterable[Observation] = ()) -> tuple[Observation, list[Alarm]]:
    """Complete the QC report of one arrival and fold it into the stream state."""
    if obs.value is None:
        qc = QCReport.of(G.NOT_EVALUATED, G.MISSING, G.NOT_EVALUATED, G.NOT_EVALUATED)
        return append_lineage(replace(obs, qc=qc), "qc", now, "missing"), []
    accuracy = check_accuracy(obs, state, cfg)
    consistency = check_consistency(obs, neighbors, cfg)
    currentness = check_currentness(obs, now, cfg, state.expected_interval_s)
    qc = QCReport.of(accuracy, G.GOOD, consistency, currentness)
    state.remember(obs)
    if state.stuck_run >= cfg.stuck_n:
        # the reference predates the frozen stretch; rebuild it once values move again
        state.window.clear()
    out = append_lineage(replace(obs, qc=qc), "qc", now)
    alarms = []
    if qc.overall is G.BAD:
        alarms.append(Alarm(AlarmKind.QC_BAD, state.key, now,
                            f"measured_at={obs.measured_at} value={obs.value} "
                            f"accuracy={accuracy.value} currentness={currentness.value}",
                            obs.org_id))
    return out, alarms


NeighborLookup = Callable[[Observation], list[Observation]]


class QcStage:
    """Keyed QC state plus the per-arrival and periodic entry points."""

    def __init__(self, cfg: QcConfig | None = None,
                 profiles: Iterable[SensorProfile] = (),
                 neighbors: NeighborLookup | None = None):
        self.cfg = cfg or QcConfig()
        self.profiles = {(p.sensor_id, p.parameter): p for p in profiles}
        self.neighbors = neighbors
        self.states: dict[tuple[str, str], StreamState] = {}

    def state_for(self, obs: Observation) -> StreamState:
        key = (obs.sensor_id, obs.parameter)
        state = self.states.get(key)
        if state is None:
            state = StreamState.for_profile(self.profiles.get(key), key, self.cfg.window)
            self.states[key] = state
        return state

    def process(self, obs: Observation, now: int) -> tuple[list[Observation], list[Alarm]]:
        """QC one arrival; gap-fill its stream first. Returns outputs in emit order."""
        state = self.state_for(obs)
        outputs: list[Observation] = []
        alarms: list[Alarm] = []
        if obs.value is not None and (state.last_seen is None or obs.measured_at > state.last_seen):
            # only the silence before this arrival counts as a gap
            for missing, alarm in check_completeness(state, min(now, obs.measured_at), self.cfg):
                outputs.append(missing)
                alarms.append(alarm)
        neighbors = self.neighbors(obs) if self.neighbors is not None else []
        checked, obs_alarms = run_qc(obs, state, now, self.cfg, neighbors)
        outputs.append(checked)
        alarms.extend(obs_alarms)
        return outputs, alarms

    def sweep(self, now: int) -> tuple[list[Observation], list[Alarm]]:
        outputs: list[Observation] = []
        alarms: list[Alarm] = []
        for key in sorted(self.states):
            for missing, alarm in check_completeness(self.states[key], now, self.cfg):
                outputs.append(missing)
                alarms.append(alarm)
        return outputs, alarms
