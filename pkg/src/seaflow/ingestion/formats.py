"""Producer wire formats.

JsonV1::

    {"records": [{"sid": "s1", "t": "2024-01-01T00:00:00Z", "v": "9.8", ...}, ...]}

XmlV1::

    <batch><rec sid="s1" t="2024-01-01T00:00:00Z" v="9.8" .../></batch>

Both carry flat string-valued records; field names are preserved verbatim
and numbers stay strings until the transform stage types them. A
``<rec>`` may also carry fields as child elements (``<v>9.8</v>``).
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Mapping


class SourceFormat(str, Enum):
    JSON_V1 = "json_v1"
    XML_V1 = "xml_v1"


class UnparseablePayload(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class RawRecord:
    org_id: str
    source_format: SourceFormat
    fields: Mapping[str, str]
    received_at: int

    def __post_init__(self):
        if not self.fields:
            raise ValueError("a raw record needs at least one field")

    def get(self, name: str) -> str | None:
        return self.fields.get(name)

    def to_dict(self) -> dict[str, Any]:
        return {"org_id": self.org_id, "source_format": self.source_format.value,
                "fields": dict(self.fields), "received_at": self.received_at}

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RawRecord":
        return cls(data["org_id"], SourceFormat(data["source_format"]),
                   dict(data["fields"]), int(data["received_at"]))

    @classmethod
    def from_json(cls, payload: bytes | str) -> "RawRecord":
        return cls.from_dict(json.loads(payload))


def _scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, (int, float, str)):
        return str(value)
    raise TypeError(f"non-scalar field value {value!r}")


def _decode_utf8(payload: bytes | str) -> str:
    if isinstance(payload, str):
        return payload
    try:
        return payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise UnparseablePayload("payload is not UTF-8", exc.start) from exc


def parse_json(payload: bytes | str, org_id: str, received_at: int) -> list[RawRecord]:
    text = _decode_utf8(payload)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise UnparseablePayload(f"invalid JSON: {exc.msg}", offset) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
        raise UnparseablePayload('expected an object with a "records" array', 0)
    records = []
    for i, item in enumerate(doc["records"]):
        if not isinstance(item, dict) or not item:
            raise UnparseablePayload(f"records[{i}] is not a non-empty object", 0)
        try:
            fields = {str(k): _scalar(v) for k, v in item.items()}
        except TypeError as exc:
            raise UnparseablePayload(f"records[{i}]: {exc}", 0) from exc
        records.append(RawRecord(org_id, SourceFormat.JSON_V1, fields, received_at))
    return records


def _xml_error_offset(text: str, exc: ET.ParseError) -> int:
    line, column = exc.position
    lines = text.split("\n")
    prefix = "\n".join(lines[:line - 1])
    if line > 1:
        prefix += "\n"
    return len(prefix.encode("utf-8")) + len(lines[line - 1][:column].encode("utf-8"))


def parse_xml(payload: bytes | str, org_id: str, received_at: int) -> list[RawRecord]:
    text = _decode_utf8(payload)
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise UnparseablePayload(f"invalid XML: {exc}", _xml_error_offset(text, exc)) from exc
    if root.tag != "batch":
        raise UnparseablePayload(f"expected <batch> root, got <{root.tag}>", 0)
    records = []
    for i, rec in enumerate(root):
        if rec.tag != "rec":
            raise UnparseablePayload(f"batch child {i} is <{rec.tag}>, expected <rec>", 0)
        fields = dict(rec.attrib)
        for child in rec:
            fields[child.tag] = (child.text or "").strip()
        if not fields:
            raise UnparseablePayload(f"<rec> {i} has no fields", 0)
        records.append(RawRecord(org_id, SourceFormat.XML_V1, fields, received_at))
    return records


def parse_payload(payload: bytes | str, fmt: SourceFormat, org_id: str,
                  received_at: int) -> list[RawRecord]:
    if SourceFormat(fmt) is SourceFormat.JSON_V1:
        return parse_json(payload, org_id, received_at)
    return parse_xml(payload, org_id, received_at)


def encode_json(records: Iterable[Mapping[str, str]]) -> bytes:
    return json.dumps({"records": [dict(r) for r in records]}, separators=(",", ":")).encode()


def encode_xml(records: Iterable[Mapping[str, str]]) -> bytes:
    root = ET.Element("batch")
    for fields in records:
        ET.SubElement(root, "rec", {k: str(v) for k, v in fields.items()})
    return ET.tostring(root, encoding="utf-8", xml_declaration=False)


def encode_payload(records: Iterable[Mapping[str, str]], fmt: SourceFormat) -> bytes:
    if SourceFormat(fmt) is SourceFormat.JSON_V1:
        return encode_json(records)
    return encode_xml(records)


# Field vocabularies of the two producer styles. They differ on purpose:
# the JSON style carries plain decimals, the XML style carries values in
# thousandths, so each needs its own mapping to reach the canonical form.
STYLE_FIELDS: dict[SourceFormat, dict[str, str]] = {
    SourceFormat.JSON_V1: {
        "platform_id": "pid", "sensor_id": "sid", "parameter": "par", "unit": "u",
        "measured_at": "t", "value": "v", "location.lat": "lat", "location.lon": "lon",
        "location.depth_m": "z",
    },
    SourceFormat.XML_V1: {
        "platform_id": "station", "sensor_id": "probe", "parameter": "quantity",
        "unit": "uom", "measured_at": "timestamp", "value": "reading_milli",
        "location.lat": "latitude", "location.lon": "longitude", "location.depth_m": "depth",
    },
}
XML_VALUE_SCALE = 1000


def style_fields(fmt: SourceFormat, canonical: Mapping[str, Any]) -> dict[str, str]:
    """Render canonical-named values (``measured_at`` as ISO text) in a producer style."""
    fmt = SourceFormat(fmt)
    names = STYLE_FIELDS[fmt]
    out = {}
    for target, source in names.items():
        value = canonical[target]
        if target == "value" and fmt is SourceFormat.XML_V1:
            out[source] = str(int(round(float(value) * XML_VALUE_SCALE)))
        else:
            out[source] = _scalar(value)
    return out
