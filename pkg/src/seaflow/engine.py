"""Discrete-event queue on a virtual clock (seconds)."""

from __future__ import annotations

import heapq
import itertools
from typing import Any, Callable


class EventQueue:
    """Events fire in ``(time, sequence)`` order, so ties resolve by insertion."""

    def __init__(self, start: float = 0.0):
        self.now = start
        self._heap: list[tuple[float, int, Callable[..., Any], tuple]] = []
        self._seq = itertools.count()

    def schedule(self, at: float, callback: Callable[..., Any], *args: Any) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule at {at} before now={self.now}")
        heapq.heappush(self._heap, (at, next(self._seq), callback, args))

    def schedule_in(self, delay: float, callback: Callable[..., Any], *args: Any) -> None:
        self.schedule(self.now + delay, callback, *args)

    def next_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)

    def run(self, until: float) -> int:
        """Fire every event with time strictly before ``until``; the clock ends at ``until``."""
        if until < self.now:
            raise ValueError(f"until={until} is before now={self.now}")
        fired = 0
        while self._heap and self._heap[0][0] < until:
            at, _, callback, args = heapq.heappop(self._heap)
            self.now = at
            callback(*args)
            fired += 1
        self.now = until
        return fired

    def run_through(self, at: float) -> int:
        """Fire every event with time <= ``at``."""
        fired = 0
        while self._heap and self._heap[0][0] <= at:
            t, _, callback, args = heapq.heappop(self._heap)
            self.now = t
            callback(*args)
            fired += 1
        self.now = max(self.now, at)
        return fired
