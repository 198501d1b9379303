import json

from seaflow.dataspace import DataSpace
from seaflow.ingestion.formats import RawRecord, SourceFormat, style_fields
from seaflow.model import DataCategory
from seaflow.monitoring import Registry
from seaflow.pipeline import Pipeline
from seaflow.qc import QcConfig, QcStage, SensorProfile
from seaflow.transform import MappingRegistry, style_mapping
from seaflow.triage import TriagePolicy

from support import EPOCH_MS

HOUR = 3_600_000


def _pipeline():
    reg = MappingRegistry()
    reg.register(style_mapping("org7", SourceFormat.JSON_V1))
    clock = {"now": EPOCH_MS}
    published = []
    p = Pipeline(reg, QcStage(QcConfig(), [SensorProfile("t1", "temperature", 3600.0, -2, 35)]),
                 TriagePolicy(DataCategory.OPEN_ACCESS), DataSpace(), Registry(),
                 lambda topic, payload, qos: published.append((topic, payload)),
                 lambda: clock["now"])
    p.register_org("org7")
    return p, clock, published


def _raw(hour, value="10.0", received=None):
    fields = style_fields(SourceFormat.JSON_V1, {
        "platform_id": "b1", "sensor_id": "t1", "parameter": "temperature", "unit": "degC",
        "measured_at": f"2024-01-01T{hour:02d}:00:00Z", "value": value, "location.lat": "60",
        "location.lon": "10", "location.depth_m": "1"})
    return RawRecord("org7", SourceFormat.JSON_V1, fields,
                     received or EPOCH_MS + hour * HOUR + 1000).to_json()


def test_records_flow_to_store_and_core():
    p, clock, published = _pipeline()
    clock["now"] = EPOCH_MS + 2000
    p.handle_raw(_raw(0))
    (row,) = p.store.rows()
    assert [s.stage for s in row.obs.lineage] == ["transform", "qc", "triage"]
    assert published[0][0] == "data/open_access/org7/b1/temperature"
    assert p.metrics.value("delivery_latency_seconds", {"org": "org7"}) == 1


def test_duplicates_and_garbage_are_counted():
    p, clock, _ = _pipeline()
    p.handle_raw(_raw(0))
    p.handle_raw(_raw(0))
    p.handle_raw(_raw(1, value="oops"))
    p.handle_raw(b"not json")
    c = p.counts["org7"]
    assert (c.records_ingested, c.observations_stored, c.dedup_drops, c.transform_errors) == (3, 1, 1, 1)
    assert p.metrics.value("transform_errors_total", {"org": "unknown"}) == 1


def test_gap_produces_missing_and_alarm_topics():
    p, clock, published = _pipeline()
    p.handle_raw(_raw(0))
    clock["now"] = EPOCH_MS + 4 * HOUR
    p.sweep()
    topics = [t for t, _ in published]
    assert topics.count("alarms/org7/MissingData") == 3
    assert p.counts["org7"].missing_synthesized == 3
    assert p.metrics.total("missing_alarms_total") == 3
    alarm = json.loads(next(pl for t, pl in published if t.startswith("alarms/")))
    assert alarm["kind"] == "MissingData"


def test_late_real_record_replaces_synthesized_missing():
    p, clock, _ = _pipeline()
    p.handle_raw(_raw(0))
    clock["now"] = EPOCH_MS + 3 * HOUR
    p.sweep()
    assert p.store.count(missing=True) == 2
    clock["now"] = EPOCH_MS + 3 * HOUR + 1000
    p.handle_raw(_raw(1, received=clock["now"]))
    assert p.store.count(missing=True) == 1
    assert p.store.count(missing=False) == 2


def test_out_of_range_is_quarantined():
    p, _, published = _pipeline()
    p.handle_raw(_raw(0, value="99"))
    assert published[0][0] == "quarantine/org7/temperature"
    assert published[1][0] == "alarms/org7/QcBad"
    assert p.store.rows()[0].quarantined
    assert p.flag_counts() == {"bad": 1}
