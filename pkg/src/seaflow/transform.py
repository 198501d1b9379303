"""Data transformation: org-specific raw records to canonical observations.

A :class:`FieldMapping` lists one rule per canonical field. Mapping files
are JSON::

    {"mappings": [
      {"org_id": "org7", "source_format": "json_v1", "rules": [
        {"source_field": "sid", "target_field": "sensor_id", "converter": "identity"},
        {"source_field": "t", "target_field": "measured_at",
         "converter": "parse_iso8601_to_epoch_ms"},
        {"source_field": "v", "target_field": "value",
         "converter": {"unit_scale": {"factor": 0.001, "offset": 0}}},
        {"target_field": "unit", "converter": {"constant": "Cel"}},
        ...]}]}
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Any, Union

from seaflow.ingestion.formats import RawRecord, SourceFormat
from seaflow.model import (
    Location,
    Observation,
    append_lineage,
    iso_to_epoch_ms,
    validate_observation,
)

REQUIRED_FIELDS = (
    "platform_id",
    "sensor_id",
    "parameter",
    "unit",
    "value",
    "measured_at",
    "location.lat",
    "location.lon",
    "location.depth_m",
)
NUMERIC_FIELDS = {"value", "location.lat", "location.lon", "location.depth_m"}
DEDUP_HORIZON_MS = 48 * 3600 * 1000


class MappingError(ValueError):
    pass


class IncompleteMapping(MappingError):
    def __init__(self, uncovered: list[str], duplicated: list[str] | None = None):
        self.uncovered = uncovered
        self.duplicated = duplicated or []
        parts = []
        if uncovered:
            parts.append(f"uncovered: {', '.join(uncovered)}")
        if self.duplicated:
            parts.append(f"covered more than once: {', '.join(self.duplicated)}")
        super().__init__("; ".join(parts))


class MappingNotFound(MappingError):
    pass


class ConversionError(ValueError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class ConverterKind(str, Enum):
    IDENTITY = "identity"
    PARSE_ISO8601_TO_EPOCH_MS = "parse_iso8601_to_epoch_ms"
    PARSE_DECIMAL = "parse_decimal"
    UNIT_SCALE = "unit_scale"
    CONSTANT = "constant"


@dataclass(frozen=True)
class Converter:
    kind: ConverterKind
    factor: Decimal = Decimal(1)
    offset: Decimal = Decimal(0)
    constant: Any = None

    @classmethod
    def identity(cls) -> "Converter":
        return cls(ConverterKind.IDENTITY)

    @classmethod
    def iso8601(cls) -> "Converter":
        return cls(ConverterKind.PARSE_ISO8601_TO_EPOCH_MS)

    @classmethod
    def decimal(cls) -> "Converter":
        return cls(ConverterKind.PARSE_DECIMAL)

    @classmethod
    def unit_scale(cls, factor: float | str, offset: float | str = 0) -> "Converter":
        return cls(ConverterKind.UNIT_SCALE, factor=Decimal(str(factor)), offset=Decimal(str(offset)))

    @classmethod
    def const(cls, value: Any) -> "Converter":
        return cls(ConverterKind.CONSTANT, constant=value)

    def to_json(self) -> Union[str, dict]:
        if self.kind is ConverterKind.UNIT_SCALE:
            return {"unit_scale": {"factor": str(self.factor), "offset": str(self.offset)}}
        if self.kind is ConverterKind.CONSTANT:
            return {"constant": self.constant}
        return self.kind.value

    @classmethod
    def from_json(cls, spec: Union[str, dict]) -> "Converter":
        if isinstance(spec, str):
            kind = ConverterKind(spec)
            if kind in (ConverterKind.UNIT_SCALE, ConverterKind.CONSTANT):
                raise MappingError(f"converter {spec!r} needs parameters")
            return cls(kind)
        if "unit_scale" in spec:
            args = spec["unit_scale"]
            return cls.unit_scale(args["factor"], args.get("offset", 0))
        if "constant" in spec:
            return cls.const(spec["constant"])
        raise MappingError(f"unknown converter {spec!r}")

    def apply(self, raw: str | None, target: str) -> Any:
        kind = self.kind
        if kind is ConverterKind.CONSTANT:
            if target in NUMERIC_FIELDS:
                return float(Decimal(str(self.constant)))
            return self.constant
        if raw is None:
            raise ConversionError(target, "source field absent")
        if kind is ConverterKind.IDENTITY:
            if target in NUMERIC_FIELDS or target == "measured_at":
                raise ConversionError(target, "identity converter cannot type a numeric field")
            if not raw:
                raise ConversionError(target, "empty value")
            return raw
        if kind is ConverterKind.PARSE_ISO8601_TO_EPOCH_MS:
            try:
                return iso_to_epoch_ms(raw)
            except ValueError as exc:
                raise ConversionError(target, f"bad timestamp {raw!r}: {exc}") from None
        try:
            number = Decimal(raw.strip())
        except InvalidOperation:
            raise ConversionError(target, f"not a decimal: {raw!r}") from None
        if not number.is_finite():
            raise ConversionError(target, f"not a finite decimal: {raw!r}")
        if kind is ConverterKind.UNIT_SCALE:
            number = number * self.factor + self.offset
        return float(number)


@dataclass(frozen=True)
class FieldRule:
    target_field: str
    converter: Converter
    source_field: str | None = None


@dataclass(frozen=True)
class FieldMapping:
    org_id: str
    source_format: SourceFormat
    rules: tuple[FieldRule, ...]

    def check(self) -> None:
        counts: dict[str, int] = {}
        for rule in self.rules:
            counts[rule.target_field] = counts.get(rule.target_field, 0) + 1
            if rule.converter.kind is not ConverterKind.CONSTANT and rule.source_field is None:
                raise MappingError(f"rule for {rule.target_field} needs a source_field")
        uncovered = [f for f in REQUIRED_FIELDS if f not in counts]
        duplicated = sorted(f for f, n in counts.items() if n > 1)
        unknown = sorted(f for f in counts if f not in REQUIRED_FIELDS)
        if unknown:
            raise MappingError(f"unknown target fields: {', '.join(unknown)}")
        if uncovered or duplicated:
            raise IncompleteMapping(uncovered, duplicated)

    def to_dict(self) -> dict:
        return {
            "org_id": self.org_id,
            "source_format": self.source_format.value,
            "rules": [
                {k: v for k, v in (("source_field", r.source_field),
                                   ("target_field", r.target_field),
                                   ("converter", r.converter.to_json())) if v is not None}
                for r in self.rules
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FieldMapping":
        return cls(
            org_id=data["org_id"],
            source_format=SourceFormat(data["source_format"]),
            rules=tuple(
                FieldRule(r["target_field"], Converter.from_json(r["converter"]),
                          r.get("source_field"))
                for r in data["rules"]
            ),
        )


class MappingRegistry:
    """Versioned mappings per (org, format); superseded versions stay resolvable."""

    def __init__(self):
        self._versions: dict[tuple[str, SourceFormat], list[str]] = {}
        self._by_id: dict[str, FieldMapping] = {}

    def register(self, mapping: FieldMapping) -> str:
        mapping.check()
        key = (mapping.org_id, SourceFormat(mapping.source_format))
        versions = self._versions.setdefault(key, [])
        mapping_id = f"{mapping.org_id}/{key[1].value}/v{len(versions) + 1}"
        versions.append(mapping_id)
        self._by_id[mapping_id] = mapping
        return mapping_id

    def resolve(self, mapping_id: str) -> FieldMapping:
        try:
            return self._by_id[mapping_id]
        except KeyError:
            raise MappingNotFound(mapping_id) from None

    def current(self, org_id: str, source_format: SourceFormat) -> tuple[str, FieldMapping]:
        versions = self._versions.get((org_id, SourceFormat(source_format)))
        if not versions:
            raise MappingNotFound(f"no mapping for {org_id}/{SourceFormat(source_format).value}")
        return versions[-1], self._by_id[versions[-1]]

    def snapshot(self) -> "MappingRegistry":
        copy = MappingRegistry()
        copy._versions = {k: list(v) for k, v in self._versions.items()}
        copy._by_id = dict(self._by_id)
        return copy

    @classmethod
    def load(cls, path: str | Path) -> "MappingRegistry":
        registry = cls()
        for entry in json.loads(Path(path).read_text())["mappings"]:
            registry.register(FieldMapping.from_dict(entry))
        return registry


def register_mapping(registry: MappingRegistry, mapping: FieldMapping) -> str:
    return registry.register(mapping)


def to_canonical(record: RawRecord, registry: MappingRegistry, at: int | None = None) -> Observation:
    mapping_id, mapping = registry.current(record.org_id, record.source_format)
    values: dict[str, Any] = {}
    for rule in mapping.rules:
        raw = record.get(rule.source_field) if rule.source_field is not None else None
        values[rule.target_field] = rule.converter.apply(raw, rule.target_field)
    measured_at = values["measured_at"]
    obs = Observation(
        observation_id=f"{record.org_id}:{values['sensor_id']}:{measured_at}",
        org_id=record.org_id,
        platform_id=str(values["platform_id"]),
        sensor_id=str(values["sensor_id"]),
        parameter=str(values["parameter"]),
        unit=str(values["unit"]),
        value=values["value"],
        measured_at=measured_at,
        ingested_at=record.received_at,
        location=Location(values["location.lat"], values["location.lon"],
                          values["location.depth_m"]),
    )
    obs = append_lineage(obs, "transform", record.received_at if at is None else at,
                         f"{mapping_id} {record.source_format.value}")
    errors = validate_observation(obs)
    if errors:
        raise ConversionError(errors[0].field, errors[0].rule)
    return obs


def dedup_key(obs: Observation) -> tuple[str, int]:
    return (obs.sensor_id, obs.measured_at)


class Deduplicator:
    """Remembers emitted keys for ``horizon_ms`` of measured time."""

    def __init__(self, horizon_ms: int = DEDUP_HORIZON_MS):
        self.horizon_ms = horizon_ms
        self._seen: OrderedDict[tuple[str, int], int] = OrderedDict()
        self._newest = None
        self._sweep_at = 4096

    def admit(self, obs: Observation) -> bool:
        key = dedup_key(obs)
        if key in self._seen:
            return False
        self._seen[key] = obs.measured_at
        if self._newest is None or obs.measured_at > self._newest:
            self._newest = obs.measured_at
        self._evict()
        return True

    def _evict(self) -> None:
        if len(self._seen) < self._sweep_at:
            return
        cutoff = self._newest - self.horizon_ms
        for k in [k for k, t in self._seen.items() if t < cutoff]:
            del self._seen[k]
        self._sweep_at = max(4096, 2 * len(self._seen))

    def __len__(self) -> int:
        return len(self._seen)


def style_mapping(org_id: str, source_format: SourceFormat) -> FieldMapping:
    """The mapping for one of the built-in producer styles."""
    from seaflow.ingestion.formats import STYLE_FIELDS, XML_VALUE_SCALE

    fmt = SourceFormat(source_format)
    rules = []
    for target, source in STYLE_FIELDS[fmt].items():
        if target == "measured_at":
            conv = Converter.iso8601()
        elif target == "value" and fmt is SourceFormat.XML_V1:
            conv = Converter.unit_scale(Decimal(1) / Decimal(XML_VALUE_SCALE))
        elif target in NUMERIC_FIELDS:
            conv = Converter.decimal()
        else:
            conv = Converter.identity()
        rules.append(FieldRule(target, conv, source))
    return FieldMapping(org_id, fmt, tuple(rules))
