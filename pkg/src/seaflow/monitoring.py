"""KPI registry, Prometheus text exposition (format 0.0.4) and SLO evaluation."""

from __future__ import annotations

import bisect
import math
import re
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping

NAME_RE = re.compile(r"^[a-z_]+$")
LABEL_RE = re.compile(r"^[a-zA-Z_][a-zA-Z0-9_]*$")
DEFAULT_BUCKETS = (0.5, 1.0, 5.0, 30.0, 60.0, 300.0, 1800.0, 3600.0)
HISTORY_LIMIT = 100_000

LabelKey = tuple[tuple[str, str], ...]


class MetricKind(str, Enum):
    COUNTER = "counter"
    GAUGE = "gauge"
    HISTOGRAM = "histogram"


class NegativeCounterDelta(ValueError):
    pass


class MetricTypeError(ValueError):
    pass


@dataclass
class _Histogram:
    bounds: tuple[float, ...]
    counts: list[int]
    total: float = 0.0
    count: int = 0


@dataclass
class _Family:
    name: str
    kind: MetricKind
    help: str = ""
    buckets: tuple[float, ...] = ()
    series: dict[LabelKey, float | _Histogram] = field(default_factory=dict)
    history: dict[LabelKey, deque] = field(default_factory=dict)


def _label_key(labels: Mapping[str, str] | None) -> LabelKey:
    if not labels:
        return ()
    for k in labels:
        if not LABEL_RE.match(k) or k == "le":
            raise ValueError(f"invalid label name {k!r}")
    return tuple(sorted((k, str(v)) for k, v in labels.items()))


class Registry:
    """Thread-safe metric registry; unknown series are created on first use."""

    def __init__(self, clock: Callable[[], float] | None = None):
        self.clock = clock
        self._families: dict[str, _Family] = {}
        self._lock = threading.Lock()

    def describe(self, name: str, kind: MetricKind | str, help: str = "",
                 buckets: Iterable[float] | None = None) -> None:
        with self._lock:
            self._family(name, MetricKind(kind), help, buckets)

    def _family(self, name: str, kind: MetricKind, help: str = "",
                buckets: Iterable[float] | None = None) -> _Family:
        family = self._families.get(name)
        if family is None:
            if not NAME_RE.match(name):
                raise ValueError(f"invalid metric name {name!r}")
            bounds: tuple[float, ...] = ()
            if kind is MetricKind.HISTOGRAM:
                bounds = tuple(float(b) for b in (buckets or DEFAULT_BUCKETS))
                if any(b >= c for b, c in zip(bounds, bounds[1:])) or not bounds:
                    raise ValueError("histogram buckets must be strictly increasing")
                if math.isinf(bounds[-1]):
                    bounds = bounds[:-1]
            family = _Family(name, kind, help, bounds)
            self._families[name] = family
        elif family.kind is not kind:
            raise MetricTypeError(f"{name} is a {family.kind.value}, not a {kind.value}")
        if help and not family.help:
            family.help = help
        return family

    def _record(self, family: _Family, key: LabelKey, value: float) -> None:
        if self.clock is None:
            return
        hist = family.history.get(key)
        if hist is None:
            hist = family.history[key] = deque(maxlen=HISTORY_LIMIT)
        hist.append((self.clock(), value))

    def counter_inc(self, name: str, labels: Mapping[str, str] | None = None,
                    delta: float = 1) -> None:
        if delta < 0:
            raise NegativeCounterDelta(f"{name}: counter delta {delta} < 0")
        key = _label_key(labels)
        with self._lock:
            family = self._family(name, MetricKind.COUNTER)
            value = family.series.get(key, 0) + delta
            family.series[key] = value
            self._record(family, key, value)

    def gauge_set(self, name: str, labels: Mapping[str, str] | None = None,
                  value: float = 0) -> None:
        key = _label_key(labels)
        with self._lock:
            family = self._family(name, MetricKind.GAUGE)
            family.series[key] = value
            self._record(family, key, value)

    def histogram_observe(self, name: str, labels: Mapping[str, str] | None = None,
                          value: float = 0.0, buckets: Iterable[float] | None = None) -> None:
        key = _label_key(labels)
        with self._lock:
            family = self._family(name, MetricKind.HISTOGRAM, buckets=buckets)
            hist = family.series.get(key)
            if hist is None:
                hist = family.series[key] = _Histogram(family.buckets, [0] * len(family.buckets))
            i = bisect.bisect_left(hist.bounds, value)
            if i < len(hist.counts):
                hist.counts[i] += 1
            hist.total += value
            hist.count += 1
            self._record(family, key, value)

    def ensure(self, name: str, kind: MetricKind | str, labels: Mapping[str, str] | None = None,
               help: str = "") -> None:
        """Create a zero-valued series so it is exposed before its first update."""
        key = _label_key(labels)
        with self._lock:
            family = self._family(name, MetricKind(kind), help)
            if key in family.series:
                return
            if family.kind is MetricKind.HISTOGRAM:
                family.series[key] = _Histogram(family.buckets, [0] * len(family.buckets))
            else:
                family.series[key] = 0

    # -- reading -------------------------------------------------------------

    def value(self, name: str, labels: Mapping[str, str] | None = None) -> float:
        with self._lock:
            family = self._families.get(name)
            if family is None:
                return 0
            entry = family.series.get(_label_key(labels), 0)
            return entry.count if isinstance(entry, _Histogram) else entry

    def total(self, name: str, **match: str) -> float:
        """Sum a counter or gauge over every series whose labels include ``match``."""
        with self._lock:
            family = self._families.get(name)
            if family is None:
                return 0
            out = 0
            for key, entry in family.series.items():
                if all((k, v) in key for k, v in match.items()):
                    out += entry.count if isinstance(entry, _Histogram) else entry
            return out

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._families)

    def kind(self, name: str) -> MetricKind | None:
        family = self._families.get(name)
        return family.kind if family else None

    def series(self, name: str) -> dict[LabelKey, float]:
        with self._lock:
            family = self._families.get(name)
            if family is None:
                return {}
            return {k: (v.count if isinstance(v, _Histogram) else v)
                    for k, v in family.series.items()}

    def history(self, name: str, key: LabelKey) -> list[tuple[float, float]]:
        with self._lock:
            family = self._families.get(name)
            if family is None:
                return []
            return list(family.history.get(key, ()))

    # -- exposition ----------------------------------------------------------

    def render(self) -> str:
        return render_exposition(self)


def _fmt(value: float) -> str:
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, int):
        return str(value)
    if math.isinf(value):
        return "+Inf" if value > 0 else "-Inf"
    if math.isnan(value):
        return "NaN"
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace("\n", "\\n").replace('"', '\\"')


def _labels(key: LabelKey, extra: tuple[tuple[str, str], ...] = ()) -> str:
    pairs = key + extra
    if not pairs:
        return ""
    return "{" + ",".join(f'{k}="{_escape(v)}"' for k, v in pairs) + "}"


def render_exposition(reg: Registry) -> str:
    """Render every series, families and label sets in lexicographic order."""
    lines: list[str] = []
    with reg._lock:
        for name in sorted(reg._families):
            family = reg._families[name]
            if not family.series:
                continue
            if family.help:
                help_text = family.help.replace("\\", "\\\\").replace("\n", "\\n")
                lines.append(f"# HELP {name} {help_text}")
            lines.append(f"# TYPE {name} {family.kind.value}")
            for key in sorted(family.series):
                entry = family.series[key]
                if isinstance(entry, _Histogram):
                    cumulative = 0
                    for bound, count in zip(entry.bounds, entry.counts):
                        cumulative += count
                        lines.append(f"{name}_bucket{_labels(key, (('le', _fmt(bound)),))} {cumulative}")
                    lines.append(f"{name}_bucket{_labels(key, (('le', '+Inf'),))} {entry.count}")
                    lines.append(f"{name}_sum{_labels(key)} {_fmt(entry.total)}")
                    lines.append(f"{name}_count{_labels(key)} {entry.count}")
                else:
                    lines.append(f"{name}{_labels(key)} {_fmt(entry)}")
    return "\n".join(lines) + "\n" if lines else ""


# -- SLOs ------------------------------------------------------------------------


class Aggregation(str, Enum):
    RATE = "rate"
    VALUE = "value"
    P95 = "p95"


@dataclass(frozen=True)
class SloRule:
    name: str
    metric: str
    aggregation: Aggregation
    op: str
    threshold: float
    window_s: float
    labels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        if self.op not in ("<=", ">="):
            raise ValueError(f"SLO op must be '<=' or '>=', got {self.op!r}")
        if self.window_s <= 0:
            raise ValueError("SLO window_s must be > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "SloRule":
        return cls(name=data.get("name", data["metric"]), metric=data["metric"],
                   aggregation=Aggregation(data["aggregation"]), op=data["op"],
                   threshold=float(data["threshold"]), window_s=float(data["window_s"]),
                   labels=dict(data.get("labels", {})))

    def holds(self, observed: float) -> bool:
        return observed <= self.threshold if self.op == "<=" else observed >= self.threshold


@dataclass(frozen=True)
class SloBreach:
    rule: str
    metric: str
    labels: LabelKey
    observed: float
    threshold: float
    op: str

    def __str__(self) -> str:
        return (f"SLO {self.rule}: {self.metric}{_labels(self.labels)} = {self.observed:g}, "
                f"required {self.op} {self.threshold:g}")


def _value_at(history: list[tuple[float, float]], t: float) -> float:
    value = 0.0
    for at, v in history:
        if at > t:
            break
        value = v
    return value


def _aggregate(reg: Registry, rule: SloRule, key: LabelKey, now: float) -> float | None:
    kind = reg.kind(rule.metric)
    current = reg.series(rule.metric).get(key, 0)
    if rule.aggregation is Aggregation.VALUE:
        return current
    history = reg.history(rule.metric, key)
    start = now - rule.window_s
    if rule.aggregation is Aggregation.RATE:
        if kind is not MetricKind.COUNTER:
            raise MetricTypeError(f"rate needs a counter, {rule.metric} is {kind}")
        return (current - _value_at(history, start)) / rule.window_s
    if kind is not MetricKind.HISTOGRAM:
        raise MetricTypeError(f"p95 needs a histogram, {rule.metric} is {kind}")
    values = sorted(v for at, v in history if start < at <= now)
    if not values:
        return None
    rank = max(1, math.ceil(0.95 * len(values)))
    return values[rank - 1]


def evaluate_slos(reg: Registry, rules: Iterable[SloRule], now: float) -> list[SloBreach]:
    breaches = []
    for rule in rules:
        for key in sorted(reg.series(rule.metric)):
            if not all((k, str(v)) in key for k, v in rule.labels.items()):
                continue
            observed = _aggregate(reg, rule, key, now)
            if observed is None or rule.holds(observed):
                continue
            breaches.append(SloBreach(rule.name, rule.metric, key, observed, rule.threshold,
                                      rule.op))
    return breaches
