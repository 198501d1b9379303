"""Canonical observation model shared by every platform stage.

Every stage after transformation speaks :class:`Observation`. Values are
immutable; stages derive new observations with :func:`dataclasses.replace`
and record themselves via :func:`append_lineage`.

The interchange format is one JSON object per observation, with the field
names used here plus ``"schema_version": "1"``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Any, Iterable

SCHEMA_VERSION = "1"


class AttributeFlag(str, Enum):
    GOOD = "good"
    PROBABLY_GOOD = "probably_good"
    PROBABLY_BAD = "probably_bad"
    BAD = "bad"
    MISSING = "missing"
    NOT_EVALUATED = "not_evaluated"

    @property
    def rank(self) -> int:
        return _FLAG_RANK[self]


_FLAG_RANK = {
    AttributeFlag.GOOD: 0,
    AttributeFlag.PROBABLY_GOOD: 1,
    AttributeFlag.PROBABLY_BAD: 2,
    AttributeFlag.BAD: 3,
    AttributeFlag.MISSING: 4,
    AttributeFlag.NOT_EVALUATED: -1,
}


class DataCategory(str, Enum):
    OPEN_ACCESS = "open_access"
    BUSINESS_CRITICAL = "business_critical"
    LEGALLY_RESTRICTED = "legally_restricted"


def worst_flag(flags: Iterable[AttributeFlag]) -> AttributeFlag:
    """Return the worst flag, ignoring ``NOT_EVALUATED``.

    An empty input, or one holding only ``NOT_EVALUATED``, yields
    ``NOT_EVALUATED``.
    """
    evaluated = [f for f in flags if f is not AttributeFlag.NOT_EVALUATED]
    if not evaluated:
        return AttributeFlag.NOT_EVALUATED
    return max(evaluated, key=lambda f: f.rank)


@dataclass(frozen=True)
class QCReport:
    accuracy: AttributeFlag = AttributeFlag.NOT_EVALUATED
    completeness: AttributeFlag = AttributeFlag.NOT_EVALUATED
    consistency: AttributeFlag = AttributeFlag.NOT_EVALUATED
    currentness: AttributeFlag = AttributeFlag.NOT_EVALUATED
    overall: AttributeFlag = AttributeFlag.NOT_EVALUATED

    @classmethod
    def of(
        cls,
        accuracy: AttributeFlag,
        completeness: AttributeFlag,
        consistency: AttributeFlag,
        currentness: AttributeFlag,
    ) -> "QCReport":
        overall = worst_flag([accuracy, completeness, consistency, currentness])
        return cls(accuracy, completeness, consistency, currentness, overall)

    def attributes(self) -> dict[str, AttributeFlag]:
        return {
            "accuracy": self.accuracy,
            "completeness": self.completeness,
            "consistency": self.consistency,
            "currentness": self.currentness,
        }

    @property
    def is_complete(self) -> bool:
        """True once QC has run (the overall flag was computed from evaluated attributes)."""
        return self.overall is not AttributeFlag.NOT_EVALUATED


@dataclass(frozen=True)
class Location:
    lat: float
    lon: float
    depth_m: float = 0.0


@dataclass(frozen=True)
class LineageStep:
    stage: str
    at: int
    detail: str = ""


@dataclass(frozen=True)
class Observation:
    observation_id: str
    org_id: str
    platform_id: str
    sensor_id: str
    parameter: str
    unit: str
    value: float | None
    measured_at: int
    ingested_at: int
    location: Location
    qc: QCReport = field(default_factory=QCReport)
    category: DataCategory = DataCategory.BUSINESS_CRITICAL
    lineage: tuple[LineageStep, ...] = ()

    @property
    def is_missing(self) -> bool:
        return self.value is None

    @property
    def key(self) -> tuple[str, int]:
        return (self.sensor_id, self.measured_at)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "observation_id": self.observation_id,
            "org_id": self.org_id,
            "platform_id": self.platform_id,
            "sensor_id": self.sensor_id,
            "parameter": self.parameter,
            "unit": self.unit,
            "value": self.value,
            "measured_at": self.measured_at,
            "ingested_at": self.ingested_at,
            "location": {
                "lat": self.location.lat,
                "lon": self.location.lon,
                "depth_m": self.location.depth_m,
            },
            "qc": {name: flag.value for name, flag in self.qc.attributes().items()}
            | {"overall": self.qc.overall.value},
            "category": self.category.value,
            "lineage": [
                {"stage": s.stage, "at": s.at, "detail": s.detail} for s in self.lineage
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Observation":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version!r}")
        qc = data["qc"]
        loc = data["location"]
        value = data["value"]
        return cls(
            observation_id=data["observation_id"],
            org_id=data["org_id"],
            platform_id=data["platform_id"],
            sensor_id=data["sensor_id"],
            parameter=data["parameter"],
            unit=data["unit"],
            value=None if value is None else float(value),
            measured_at=int(data["measured_at"]),
            ingested_at=int(data["ingested_at"]),
            location=Location(float(loc["lat"]), float(loc["lon"]), float(loc["depth_m"])),
            qc=QCReport(
                accuracy=AttributeFlag(qc["accuracy"]),
                completeness=AttributeFlag(qc["completeness"]),
                consistency=AttributeFlag(qc["consistency"]),
                currentness=AttributeFlag(qc["currentness"]),
                overall=AttributeFlag(qc["overall"]),
            ),
            category=DataCategory(data["category"]),
            lineage=tuple(
                LineageStep(s["stage"], int(s["at"]), s.get("detail", ""))
                for s in data["lineage"]
            ),
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> "Observation":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ValidationError:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


class TimeRegression(ValueError):
    """A lineage step was stamped earlier than the step before it."""


def validate_observation(obs: Observation) -> list[ValidationError]:
    errors: list[ValidationError] = []

    def bad(field_name: str, rule: str) -> None:
        errors.append(ValidationError(field_name, rule))

    for name in ("observation_id", "org_id", "platform_id", "sensor_id", "parameter", "unit"):
        value = getattr(obs, name)
        if not isinstance(value, str) or not value:
            bad(name, "must be a non-empty string")

    loc = obs.location
    if not _finite(loc.lat) or not -90.0 <= loc.lat <= 90.0:
        bad("location.lat", "out of range [-90, 90]")
    if not _finite(loc.lon) or not -180.0 <= loc.lon <= 180.0:
        bad("location.lon", "out of range [-180, 180]")
    if not _finite(loc.depth_m) or loc.depth_m < 0:
        bad("location.depth_m", "must be >= 0")

    if obs.value is not None and not _finite(obs.value):
        bad("value", "must be finite")
    if obs.value is None and obs.qc.completeness is not AttributeFlag.MISSING:
        bad("qc.completeness", "absent value requires completeness=missing")

    if obs.measured_at > obs.ingested_at:
        bad("measured_at", "time ordering: measured_at must be <= ingested_at")

    expected_overall = worst_flag(obs.qc.attributes().values())
    if obs.qc.overall is not expected_overall:
        bad("qc.overall", f"must equal worst attribute flag ({expected_overall.value})")

    previous = None
    for i, step in enumerate(obs.lineage):
        if previous is not None and step.at < previous:
            bad(f"lineage[{i}].at", "timestamps must be non-decreasing")
        previous = step.at

    if not isinstance(obs.category, DataCategory):
        bad("category", "must be a DataCategory")
    return errors


def append_lineage(obs: Observation, stage: str, at: int, detail: str = "") -> Observation:
    if obs.lineage and at < obs.lineage[-1].at:
        raise TimeRegression(
            f"lineage step {stage!r} at {at} precedes last step at {obs.lineage[-1].at}"
        )
    return replace(obs, lineage=obs.lineage + (LineageStep(stage, at, detail),))


def _finite(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def iso_to_epoch_ms(text: str) -> int:
    """Parse an ISO-8601 timestamp to epoch milliseconds (UTC if no offset given)."""
    stamp = text.strip()
    if stamp.endswith(("Z", "z")):
        stamp = stamp[:-1] + "+00:00"
    dt = datetime.fromisoformat(stamp)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    delta = dt - datetime(1970, 1, 1, tzinfo=timezone.utc)
    return (delta.days * 86_400 + delta.seconds) * 1000 + delta.microseconds // 1000


def epoch_ms_to_iso(ms: int) -> str:
    dt = datetime(1970, 1, 1, tzinfo=timezone.utc) + timedelta(milliseconds=ms)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ms % 1000:03d}Z"
