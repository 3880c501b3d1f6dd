"""Deterministic discrete-event engine.

Time is an integer count of nanoseconds. Pending events live in a binary heap
keyed by ``(fire_at, sequence)``; the sequence number is a per-engine counter,
so events scheduled for the same instant run in the order they were scheduled.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from typing import Any, Callable

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

# Heap entry layout. Entries are mutable lists so that cancel() can blank the
# action in place (lazy tombstone); the list itself is the event handle.
_AT, _SEQ, _ACTION, _ARGS = range(4)


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


@dataclass(frozen=True)
class SimEvent:
    """Read-only view of a pending event, as returned by :meth:`Simulator.peek`."""

    fire_at: int
    sequence: int
    action: Callable[..., Any]


@dataclass
class RunSummary:
    dispatched: int
    clock: int
    pending: int
    truncated: bool = False


class Simulator:
    def __init__(self, max_pending: int | None = None):
        self.now = 0
        self._heap: list[list] = []
        self._seq = 0
        self.dispatched = 0
        self.max_pending = max_pending
        self.truncated = False

    def schedule(self, fire_at: int, action: Callable[..., Any], *args: Any) -> list:
        """Schedule ``action(*args)`` at absolute time ``fire_at``.

        Returns a handle accepted by :meth:`cancel`.
        """
        if fire_at < self.now:
            raise SchedulingError(f"cannot schedule at t={fire_at} ns; clock is {self.now} ns")
        entry = [fire_at, self._seq, action, args]
        self._seq += 1
        heapq.heappush(self._heap, entry)
        return entry

    def after(self, delay: int, action: Callable[..., Any], *args: Any) -> list:
        return self.schedule(self.now + delay, action, *args)

    def cancel(self, handle: list) -> bool:
        if handle[_ACTION] is None:
            return False
        handle[_ACTION] = None
        handle[_ARGS] = ()
        return True

    @staticmethod
    def is_pending(handle: list) -> bool:
        return handle[_ACTION] is not None

    def peek(self) -> SimEvent | None:
        heap = self._heap
        while heap and heap[0][_ACTION] is None:
            heapq.heappop(heap)
        if not heap:
            return None
        at, seq, action, _ = heap[0]
        return SimEvent(at, seq, action)

    def __len__(self) -> int:
        return sum(1 for e in self._heap if e[_ACTION] is not None)

    def run_until(self, limit: int) -> RunSummary:
        """Dispatch every event with ``fire_at <= limit``, then set the clock to ``limit``.

        If ``max_pending`` is set and the heap grows beyond it, the run stops
        early and ``truncated`` is set; the clock is left at the last
        dispatched event.
        """
        heap = self._heap
        pop = heapq.heappop
        cap = self.max_pending
        count = 0
        while heap and heap[0][0] <= limit:
            entry = pop(heap)
            action = entry[2]
            if action is None:
                continue
            # Dispatched entries are marked so a late cancel() returns False.
            entry[2] = None
            self.now = entry[0]
            action(*entry[3])
            count += 1
            if cap is not None and len(heap) > cap:
                self.truncated = True
                self.dispatched += count
                return RunSummary(count, self.now, len(heap), truncated=True)
        self.dispatched += count
        if limit > self.now:
            self.now = limit
        return RunSummary(count, self.now, len(self._heap))

    def run(self) -> RunSummary:
        """Run until the queue is empty."""
        heap = self._heap
        total = 0
        while heap:
            last = max(e[0] for e in heap)
            summary = self.run_until(last)
            total += summary.dispatched
            if summary.truncated:
                return RunSummary(total, self.now, len(heap), truncated=True)
        return RunSummary(total, self.now, 0)


def make_rng(seed: int, stream: str) -> random.Random:
    """Independent Mersenne-Twister stream for one purpose within one run.

    String seeds are hashed with SHA-512 by :class:`random.Random`, so the
    derived streams are stable across platforms and interpreter runs.
    """
    return random.Random(f"{int(seed)}/{stream}")
