"""The Data Space: append-only observation store with category-aware pull queries.

Rows live in an in-memory index keyed by ``(sensor_id, measured_at)``.
With a journal path every accepted append is also written as one JSON
line, and the journal is replayed when the store is reopened.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from seaflow.access import Action, Identity, Role, authorize
from seaflow.broker.core import NotAuthorized
from seaflow.model import DataCategory, Location, Observation

EARTH_RADIUS_M = 6_371_008.8


class AppendResult(str, Enum):
    STORED = "stored"
    REPLACED = "replaced"
    IGNORED = "ignored"


@dataclass(frozen=True)
class Selector:
    org_id: str | None = None
    platform_id: str | None = None
    parameter: str | None = None
    categories: frozenset[DataCategory] | None = None
    time_from: int | None = None
    time_to: int | None = None
    include_quarantined: bool = False

    def __post_init__(self):
        if self.time_from is not None and self.time_to is not None and self.time_from >= self.time_to:
            raise ValueError("selector needs time_from < time_to")
        if self.categories is not None:
            object.__setattr__(self, "categories",
                               frozenset(DataCategory(c) for c in self.categories))

    def matches(self, obs: Observation) -> bool:
        if self.org_id is not None and obs.org_id != self.org_id:
            return False
        if self.platform_id is not None and obs.platform_id != self.platform_id:
            return False
        if self.parameter is not None and obs.parameter != self.parameter:
            return False
        if self.categories is not None and obs.category not in self.categories:
            return False
        if self.time_from is not None and obs.measured_at < self.time_from:
            return False
        if self.time_to is not None and obs.measured_at >= self.time_to:
            return False
        return True


def haversine_m(a: Location, b: Location) -> float:
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class Row:
    obs: Observation
    quarantined: bool = False


class DataSpace:
    def __init__(self, journal: str | Path | None = None):
        self._rows: dict[tuple[str, int], Row] = {}
        self._latest: dict[tuple[str, str], Observation] = {}
        self._lock = threading.Lock()
        self.journal = Path(journal) if journal is not None else None
        if self.journal is not None and self.journal.exists():
            for line in self.journal.read_text().splitlines():
                if line.strip():
                    entry = json.loads(line)
                    self._apply(Observation.from_dict(entry["obs"]), entry.get("quarantined", False))

    def _apply(self, obs: Observation, quarantined: bool) -> AppendResult:
        key = obs.key
        current = self._rows.get(key)
        if current is not None and len(obs.lineage) <= len(current.obs.lineage):
            return AppendResult.IGNORED
        self._rows[key] = Row(obs, quarantined)
        if not obs.is_missing:
            lk = (obs.sensor_id, obs.parameter)
            prev = self._latest.get(lk)
            if prev is None or obs.measured_at >= prev.measured_at:
                self._latest[lk] = obs
        return AppendResult.REPLACED if current is not None else AppendResult.STORED

    def append(self, obs: Observation, quarantined: bool = False) -> AppendResult:
        """Store ``obs``; a repeated key replaces the row only if its lineage is longer."""
        with self._lock:
            result = self._apply(obs, quarantined)
            if result is not AppendResult.IGNORED and self.journal is not None:
                with self.journal.open("a") as fh:
                    fh.write(json.dumps({"obs": obs.to_dict(), "quarantined": quarantined},
                                        sort_keys=True, separators=(",", ":")) + "\n")
            return result

    def __len__(self) -> int:
        return len(self._rows)

    def rows(self) -> list[Row]:
        with self._lock:
            rows = list(self._rows.values())
        return sorted(rows, key=lambda r: (r.obs.measured_at, r.obs.sensor_id))

    def query(self, selector: Selector, identity: Identity | None) -> list[Observation]:
        allowed = {c for c in DataCategory if authorize(identity, Action.QUERY_PULL, c)}
        if selector.categories is not None:
            denied = sorted(c.value for c in selector.categories - allowed)
            if denied:
                raise NotAuthorized(f"no query grant for {', '.join(denied)}")
        operator = identity is not None and identity.principal.has(Role.OPERATOR)
        show_quarantined = selector.include_quarantined and operator
        out = []
        for row in self.rows():
            if row.obs.category not in allowed or not selector.matches(row.obs):
                continue
            if row.quarantined and not show_quarantined:
                continue
            out.append(row.obs)
        return out

    def latest(self, parameter: str, near: Location, radius_m: float,
               exclude_sensor: str | None = None) -> list[Observation]:
        if radius_m <= 0:
            raise ValueError("radius_m must be > 0")
        with self._lock:
            candidates = [o for (sensor, param), o in self._latest.items()
                          if param == parameter and sensor != exclude_sensor]
        hits = [o for o in candidates if haversine_m(near, o.location) <= radius_m]
        return sorted(hits, key=lambda o: o.sensor_id)

    def count(self, missing: bool | None = None, org_id: str | None = None) -> int:
        with self._lock:
            rows = list(self._rows.values())
        return sum(1 for r in rows
                   if (missing is None or r.obs.is_missing == missing)
                   and (org_id is None or r.obs.org_id == org_id))


class RawArchive:
    """Write-only sink for payloads in their original wire format."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.count = 0

    def write(self, org_id: str, source_format: str, received_at: int, payload: bytes) -> None:
        self.count += 1
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write(json.dumps({"org_id": org_id, "source_format": source_format,
                                 "received_at": received_at,
                                 "payload": payload.decode("utf-8", "replace")},
                                sort_keys=True) + "\n")


def query(store: DataSpace, selector: Selector, identity: Identity | None) -> list[Observation]:
    return store.query(selector, identity)


def latest(store: DataSpace, parameter: str, near: Location, radius_m: float) -> list[Observation]:
    return store.latest(parameter, near, radius_m)


def append(store: DataSpace, obs: Observation, quarantined: bool = False) -> AppendResult:
    return store.append(obs, quarantined)

