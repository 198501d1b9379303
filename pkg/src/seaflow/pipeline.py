"""Ingested-data processing: transform, deduplicate, QC, triage, store, forward.

The pipeline is transport agnostic. It consumes RawRecord JSON payloads
from the ingestion broker and hands each outbound observation and alarm to
a ``publish`` callable aimed at the core broker.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable

from seaflow.dataspace import AppendResult, DataSpace
from seaflow.ingestion.formats import RawRecord
from seaflow.model import Observation
from seaflow.monitoring import MetricKind, Registry
from seaflow.qc import Alarm, AlarmKind, QcStage
from seaflow.transform import ConversionError, Deduplicator, MappingError, MappingRegistry, to_canonical
from seaflow.triage import TriagePolicy, is_quarantined, triage

PublishFn = Callable[[str, bytes, int], None]

STANDARD_KPIS = {
    "ingest_records_total": (MetricKind.COUNTER, "Raw records received from the ingestion broker"),
    "transform_errors_total": (MetricKind.COUNTER, "Records that failed canonical mapping"),
    "qc_flag_total": (MetricKind.COUNTER, "QC verdicts by attribute and flag"),
    "missing_alarms_total": (MetricKind.COUNTER, "MissingData alarms raised"),
    "broker_inflight": (MetricKind.GAUGE, "Unacknowledged QoS 1/2 flows per broker"),
    "delivery_latency_seconds": (MetricKind.HISTOGRAM, "Measurement to storage latency"),
    "node_battery_j": (MetricKind.GAUGE, "Remaining node battery in joules"),
    "ota_cost_total": (MetricKind.COUNTER, "Accrued OTA carrier cost per gateway"),
}


def describe_standard(reg: Registry) -> None:
    for name, (kind, help_text) in STANDARD_KPIS.items():
        reg.describe(name, kind, help_text)
    reg.describe("dedup_drops_total", MetricKind.COUNTER, "Duplicate records dropped at transform")
    reg.describe("observations_stored_total", MetricKind.COUNTER, "Observations stored in the data space")
    reg.describe("alarms_total", MetricKind.COUNTER, "Alarms raised by kind")


@dataclass
class OrgCounts:
    records_ingested: int = 0
    transform_errors: int = 0
    dedup_drops: int = 0
    observations_stored: int = 0
    missing_synthesized: int = 0
    quarantined: int = 0
    alarms: Counter = field(default_factory=Counter)


class Pipeline:
    def __init__(self, registry: MappingRegistry, qc: QcStage, policy: TriagePolicy,
                 store: DataSpace, metrics: Registry, publish: PublishFn,
                 clock: Callable[[], int], qos: int = 1):
        self.registry = registry
        self.qc = qc
        self.policy = policy
        self.store = store
        self.metrics = metrics
        self.publish = publish
        self.clock = clock
        self.qos = qos
        self.dedup = Deduplicator()
        self.counts: dict[str, OrgCounts] = defaultdict(OrgCounts)
        self.alarms: list[Alarm] = []
        if qc.neighbors is None:
            qc.neighbors = self._neighbors
        describe_standard(metrics)

    def register_org(self, org_id: str) -> None:
        labels = {"org": org_id}
        self.counts[org_id]
        for name in ("ingest_records_total", "transform_errors_total", "missing_alarms_total",
                     "dedup_drops_total", "observations_stored_total"):
            self.metrics.ensure(name, MetricKind.COUNTER, labels)
        self.metrics.ensure("delivery_latency_seconds", MetricKind.HISTOGRAM, labels)

    def _neighbors(self, obs: Observation) -> list[Observation]:
        return self.store.latest(obs.parameter, obs.location, self.qc.cfg.neighbor_radius_m,
                                 exclude_sensor=obs.sensor_id)

    def handle_raw(self, payload: bytes) -> None:
        now = self.clock()
        try:
            record = RawRecord.from_json(payload)
        except (ValueError, KeyError, TypeError):
            self.metrics.counter_inc("transform_errors_total", {"org": "unknown"})
            return
        org = record.org_id
        counts = self.counts[org]
        counts.records_ingested += 1
        self.metrics.counter_inc("ingest_records_total", {"org": org})
        try:
            obs = to_canonical(record, self.registry, at=max(now, record.received_at))
        except (ConversionError, MappingError):
            counts.transform_errors += 1
            self.metrics.counter_inc("transform_errors_total", {"org": org})
            return
        if not self.dedup.admit(obs):
            counts.dedup_drops += 1
            self.metrics.counter_inc("dedup_drops_total", {"org": org})
            return
        outputs, alarms = self.qc.process(obs, obs.lineage[-1].at)
        for out in outputs:
            self._emit(out)
        for alarm in alarms:
            self.raise_alarm(alarm)

    def sweep(self, now: int | None = None) -> None:
        now = self.clock() if now is None else now
        outputs, alarms = self.qc.sweep(now)
        for out in outputs:
            self._emit(out)
        for alarm in alarms:
            self.raise_alarm(alarm)

    def _emit(self, obs: Observation) -> None:
        now = max(self.clock(), obs.lineage[-1].at)
        obs, topic = triage(obs, self.policy, now)
        quarantined = is_quarantined(obs, self.policy)
        result = self.store.append(obs, quarantined)
        counts = self.counts[obs.org_id]
        for attribute, flag in {**obs.qc.attributes(), "overall": obs.qc.overall}.items():
            self.metrics.counter_inc("qc_flag_total", {"attribute": attribute, "flag": flag.value})
        if obs.is_missing:
            counts.missing_synthesized += 1
        elif result is not AppendResult.IGNORED:
            counts.observations_stored += 1
            self.metrics.counter_inc("observations_stored_total", {"org": obs.org_id})
            self.metrics.histogram_observe("delivery_latency_seconds", {"org": obs.org_id},
                                           (now - obs.measured_at) / 1000)
        if quarantined:
            counts.quarantined += 1
        self.publish(topic, obs.to_json().encode(), self.qos)

    def raise_alarm(self, alarm: Alarm) -> None:
        self.alarms.append(alarm)
        org = alarm.org_id or "platform"
        self.counts[org].alarms[alarm.kind.value] += 1
        self.metrics.counter_inc("alarms_total", {"org": org, "kind": alarm.kind.value})
        if alarm.kind is AlarmKind.MISSING_DATA:
            self.metrics.counter_inc("missing_alarms_total", {"org": org})
        self.publish(f"alarms/{org}/{alarm.kind.value}",
                     json.dumps(alarm.to_dict(), sort_keys=True).encode(), self.qos)

    def flag_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for key, value in self.metrics.series("qc_flag_total").items():
            labels = dict(key)
            if labels.get("attribute") == "overall":
                out[labels["flag"]] = int(value)
        return out
