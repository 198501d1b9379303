from dataclasses import replace
from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from seaflow.ingestion.formats import RawRecord, SourceFormat
from seaflow.transform import (
    ConversionError,
    Converter,
    Deduplicator,
    FieldMapping,
    FieldRule,
    IncompleteMapping,
    MappingError,
    MappingNotFound,
    MappingRegistry,
    style_mapping,
    to_canonical,
)

from support import EPOCH_MS, make_obs


def test_converters():
    assert Converter.decimal().apply(" 1.5 ", "value") == 1.5
    assert Converter.unit_scale("0.001").apply("1250", "value") == 1.25
    assert Converter.unit_scale(1.8, 32).apply("100", "value") == 212.0
    assert Converter.iso8601().apply("2024-01-01T00:00:00Z", "measured_at") == EPOCH_MS
    assert Converter.const(3).apply(None, "location.depth_m") == 3.0
    assert Converter.const("degC").apply(None, "unit") == "degC"


@pytest.mark.parametrize("conv, raw, target", [
    (Converter.decimal(), "abc", "value"),
    (Converter.decimal(), "NaN", "value"),
    (Converter.decimal(), None, "value"),
    (Converter.identity(), "1", "value"),
    (Converter.identity(), "", "unit"),
    (Converter.iso8601(), "yesterday", "measured_at"),
])
def test_conversion_errors_name_the_field(conv, raw, target):
    with pytest.raises(ConversionError) as info:
        conv.apply(raw, target)
    assert info.value.field == target


def test_converter_json_roundtrip():
    for conv in (Converter.identity(), Converter.iso8601(), Converter.decimal(),
                 Converter.unit_scale("0.001", "2"), Converter.const("x")):
        assert Converter.from_json(conv.to_json()) == conv
    with pytest.raises(MappingError):
        Converter.from_json("unit_scale")


def test_incomplete_mapping_lists_gaps():
    mapping = style_mapping("org7", SourceFormat.JSON_V1)
    rules = mapping.rules[1:] + (mapping.rules[2],)
    with pytest.raises(IncompleteMapping) as info:
        FieldMapping("org7", SourceFormat.JSON_V1, rules).check()
    assert info.value.uncovered == [mapping.rules[0].target_field]
    assert info.value.duplicated == [mapping.rules[2].target_field]


def test_registry_versions_and_lookup(tmp_path):
    reg = MappingRegistry()
    m = style_mapping("org7", SourceFormat.JSON_V1)
    assert reg.register(m) == "org7/json_v1/v1"
    snap = reg.snapshot()
    assert reg.register(m) == "org7/json_v1/v2"
    assert reg.current("org7", SourceFormat.JSON_V1)[0] == "org7/json_v1/v2"
    assert snap.current("org7", SourceFormat.JSON_V1)[0] == "org7/json_v1/v1"
    assert reg.resolve("org7/json_v1/v1") == m
    with pytest.raises(MappingNotFound):
        reg.current("org8", SourceFormat.JSON_V1)
    path = tmp_path / "mappings.json"
    path.write_text('{"mappings": [%s]}' % __import__("json").dumps(m.to_dict()))
    assert MappingRegistry.load(path).current("org7", "json_v1")[1] == m


def _record(fields, fmt=SourceFormat.JSON_V1):
    return RawRecord("org7", fmt, fields, EPOCH_MS + 60_000)


JSON_FIELDS = {"pid": "b1", "sid": "s1", "par": "temperature", "u": "degC",
               "t": "2024-01-01T00:00:00Z", "v": "12.25", "lat": "60", "lon": "10", "z": "2"}


def test_to_canonical_records_lineage():
    reg = MappingRegistry()
    reg.register(style_mapping("org7", SourceFormat.JSON_V1))
    obs = to_canonical(_record(JSON_FIELDS), reg)
    assert obs.value == 12.25 and obs.measured_at == EPOCH_MS
    assert obs.observation_id == f"org7:s1:{EPOCH_MS}"
    (step,) = obs.lineage
    assert step.stage == "transform" and "org7/json_v1/v1" in step.detail


def test_to_canonical_rejects_future_measurement():
    reg = MappingRegistry()
    reg.register(style_mapping("org7", SourceFormat.JSON_V1))
    with pytest.raises(ConversionError) as info:
        to_canonical(_record(dict(JSON_FIELDS, t="2030-01-01T00:00:00Z")), reg)
    assert info.value.field == "measured_at"


@given(st.decimals(min_value=-10_000, max_value=10_000, places=3))
def test_xml_thousandths_scale_exactly(value):
    milli = int(value * 1000)
    out = Converter.unit_scale(Decimal(1) / Decimal(1000)).apply(str(milli), "value")
    assert out == float(Decimal(milli) / 1000)


def test_dedup_within_horizon():
    d = Deduplicator(horizon_ms=1000)
    a = make_obs()
    assert d.admit(a)
    assert not d.admit(replace(a, value=99.0))
    assert d.admit(make_obs(t_ms=EPOCH_MS + 1))
    assert len(d) == 2
