"""Classification into openness categories and Core Broker topic routing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from seaflow.model import AttributeFlag, DataCategory, Observation, append_lineage

MATCH_KEYS = ("org_id", "platform_id", "parameter")


@dataclass(frozen=True)
class TriageRule:
    match: tuple[tuple[str, str], ...]
    category: DataCategory

    def matches(self, obs: Observation) -> bool:
        return all(getattr(obs, key) == value for key, value in self.match)


@dataclass(frozen=True)
class TriagePolicy:
    default: DataCategory
    rules: tuple[TriageRule, ...] = ()
    quarantine_flags: frozenset[AttributeFlag] = field(
        default_factory=lambda: frozenset({AttributeFlag.BAD}))

    @classmethod
    def from_dict(cls, data: dict) -> "TriagePolicy":
        if "default" not in data:
            raise ValueError("triage policy needs a default category")
        rules = []
        for entry in data.get("rules", ()):
            match = entry["match"]
            unknown = set(match) - set(MATCH_KEYS)
            if unknown or not match:
                raise ValueError(f"bad triage match {match!r}")
            rules.append(TriageRule(tuple(sorted(match.items())), DataCategory(entry["category"])))
        flags = data.get("quarantine_flags")
        return cls(
            default=DataCategory(data["default"]),
            rules=tuple(rules),
            quarantine_flags=(frozenset(AttributeFlag(f) for f in flags) if flags is not None
                              else frozenset({AttributeFlag.BAD})),
        )

    def to_dict(self) -> dict:
        return {
            "default": self.default.value,
            "rules": [{"match": dict(r.match), "category": r.category.value} for r in self.rules],
            "quarantine_flags": sorted(f.value for f in self.quarantine_flags),
        }

    @classmethod
    def load(cls, path: str | Path) -> "TriagePolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def classify(obs: Observation, policy: TriagePolicy) -> DataCategory:
    for rule in policy.rules:
        if rule.matches(obs):
            return rule.category
    return policy.default


def is_quarantined(obs: Observation, policy: TriagePolicy) -> bool:
    return obs.qc.overall in policy.quarantine_flags


def route(obs: Observation, policy: TriagePolicy | None = None) -> str:
    flags = policy.quarantine_flags if policy else frozenset({AttributeFlag.BAD})
    if obs.qc.overall in flags:
        return f"quarantine/{obs.org_id}/{obs.parameter}"
    return f"data/{obs.category.value}/{obs.org_id}/{obs.platform_id}/{obs.parameter}"


def triage(obs: Observation, policy: TriagePolicy, now: int) -> tuple[Observation, str]:
    """Classify, stamp lineage and pick the single outbound topic."""
    category = classify(obs, policy)
    obs = append_lineage(replace(obs, category=category), "triage", now, category.value)
    return obs, route(obs, policy)
