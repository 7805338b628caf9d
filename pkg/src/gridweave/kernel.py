"""Discrete-event core.

The engine is a binary heap keyed on ``(time_s, seq)``; ``seq`` comes from a
single counter so simultaneous events pop in the order they were scheduled.
Cancelled events stay in the heap and are skipped when popped.

Site uplinks use a fluid model: the active flows on a link split its
bandwidth equally, and progress is only brought up to date when the active
set changes.
"""
from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ReleaseUnderflow, TimeTravel, UnknownSite


class EventKind(enum.IntEnum):
    JOB_ARRIVAL = 1
    FLOW_ACTIVATE = 2
    TRANSFER_COMPLETE = 3
    OVERHEAD_ELAPSED = 4
    COMPUTE_COMPLETE = 5
    SNAPSHOT_TICK = 6


@dataclass(eq=False)
class SimEvent:
    time_s: float
    seq: int
    kind: EventKind
    payload: Any = None
    cancelled: bool = False

    def __repr__(self) -> str:
        return f"SimEvent({self.time_s!r}, #{self.seq}, {self.kind.name}, {self.payload!r})"


class Engine:
    """Virtual clock plus timestamped event queue."""

    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[tuple[float, int, SimEvent]] = []
        self._seq = 0
        self._live = 0
        self._handlers: dict[EventKind, Callable[[SimEvent], None]] = {}
        self.popped = 0
        self.trace: list[tuple[float, int, EventKind]] | None = None

    def on(self, kind: EventKind, handler: Callable[[SimEvent], None]) -> None:
        self._handlers[kind] = handler

    def schedule(self, time_s: float, kind: EventKind, payload: Any = None) -> SimEvent:
        if time_s < self.now:
            raise TimeTravel(time_s, self.now)
        self._seq += 1
        ev = SimEvent(float(time_s), self._seq, kind, payload)
        heapq.heappush(self._heap, (ev.time_s, ev.seq, ev))
        self._live += 1
        return ev

    def cancel(self, ev: SimEvent) -> None:
        if not ev.cancelled:
            ev.cancelled = True
            self._live -= 1

    def __len__(self) -> int:
        return self._live

    def peek_time(self) -> float | None:
        while self._heap and self._heap[0][2].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def pop(self) -> SimEvent | None:
        while self._heap:
            _, _, ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self._live -= 1
            self.now = ev.time_s
            self.popped += 1
            if self.trace is not None:
                self.trace.append((ev.time_s, ev.seq, ev.kind))
            return ev
        return None

    def run(self, stop_time_s: float | None = None,
            after_event: Callable[[SimEvent], None] | None = None) -> bool:
        """Dispatch events until the queue drains or ``stop_time_s`` passes.

        Returns True when the run was cut short by the horizon.
        """
        while True:
            t = self.peek_time()
            if t is None:
                return False
            if stop_time_s is not None and t > stop_time_s:
                self.now = max(self.now, stop_time_s)
                return True
            ev = self.pop()
            self._handlers[ev.kind](ev)
            if after_event is not None:
                after_event(ev)


def compute_duration(job, site) -> float:
    """Seconds of compute for ``job`` on ``site`` (perfect core scaling)."""
    return job.work / (job.cores * site.speed_per_core)


# -- network --------------------------------------------------------------------

@dataclass(eq=False)
class Flow:
    id: int
    link: str
    total_bytes: float
    opened_at_s: float
    on_done: Callable[["Flow"], None] | None = None
    transferred_bytes: float = 0.0
    rate_bps: float = 0.0
    started_at_s: float | None = None
    finished_at_s: float | None = None
    last_update_s: float = 0.0
    event: SimEvent | None = None


@dataclass(eq=False)
class Link:
    name: str
    bandwidth_bps: float
    latency_s: float
    active: dict[int, Flow] = field(default_factory=dict)


class FlowNetwork:
    """Per-site uplinks with equal-share fluid bandwidth allocation.

    A flow first waits out the link latency, then joins the link's active
    set. Zero-byte flows finish when the latency has elapsed.
    """

    def __init__(self, engine: Engine, links: dict[str, Link], check: bool = False) -> None:
        self.engine = engine
        self.links = links
        self.flows: dict[int, Flow] = {}
        self.check = check
        self._next_id = 0
        engine.on(EventKind.FLOW_ACTIVATE, self._on_activate)
        engine.on(EventKind.TRANSFER_COMPLETE, self._on_complete)

    def open_flow(self, link: str, nbytes: float,
                  on_done: Callable[[Flow], None] | None = None) -> int:
        if link not in self.links:
            raise UnknownSite(link)
        if nbytes < 0:
            raise ValueError("flow size must be >= 0")
        self._next_id += 1
        now = self.engine.now
        flow = Flow(self._next_id, link, float(nbytes), now, on_done, last_update_s=now)
        self.flows[flow.id] = flow
        lat = self.links[link].latency_s
        kind = EventKind.FLOW_ACTIVATE if nbytes > 0 else EventKind.TRANSFER_COMPLETE
        flow.event = self.engine.schedule(now + lat, kind, flow.id)
        return flow.id

    def _on_activate(self, ev: SimEvent) -> None:
        flow = self.flows[ev.payload]
        link = self.links[flow.link]
        flow.started_at_s = self.engine.now
        flow.last_update_s = self.engine.now
        flow.event = None
        self._advance(link)
        link.active[flow.id] = flow
        self._reassign(link)

    def _on_complete(self, ev: SimEvent) -> None:
        flow = self.flows.pop(ev.payload)
        flow.event = None
        flow.finished_at_s = self.engine.now
        link = self.links[flow.link]
        if flow.id in link.active:
            self._advance(link)
            del link.active[flow.id]
            flow.transferred_bytes = flow.total_bytes
            flow.rate_bps = 0.0
            self._reassign(link)
        if flow.on_done is not None:
            flow.on_done(flow)

    def _advance(self, link: Link) -> None:
        now = self.engine.now
        for f in link.active.values():
            dt = now - f.last_update_s
            if dt > 0:
                f.transferred_bytes = min(f.total_bytes, f.transferred_bytes + f.rate_bps * dt)
            f.last_update_s = now

    def _reassign(self, link: Link) -> None:
        n = len(link.active)
        if n == 0:
            return
        rate = link.bandwidth_bps / n
        now = self.engine.now
        for f in link.active.values():
            f.rate_bps = rate
            if f.event is not None:
                self.engine.cancel(f.event)
            remaining = f.total_bytes - f.transferred_bytes
            f.event = self.engine.schedule(now + remaining / rate, EventKind.TRANSFER_COMPLETE, f.id)
        if self.check:
            total = sum(f.rate_bps for f in link.active.values())
            assert abs(total - link.bandwidth_bps) <= 1e-9 * link.bandwidth_bps, (link.name, total)

    def link_rate_sum(self, link: str) -> float:
        return sum(f.rate_bps for f in self.links[link].active.values())


# -- sites ----------------------------------------------------------------------

class SiteState:
    """Mutable per-site resource accounting during a run."""

    def __init__(self, spec) -> None:
        self.spec = spec
        self.name = spec.name
        self.total_cores = spec.total_cores
        self.total_memory_mb = spec.total_memory_mb
        self.free_cores = self.total_cores
        self.free_memory_mb = self.total_memory_mb
        self.local_queue: deque[int] = deque()
        self.assigned_count = 0
        self.finished_count = 0
        self.failed_count = 0
        self.reserved_cores = 0
        # independent occupancy integral, checked against the event log
        self.busy_core_seconds = 0.0
        self._last_change_s = 0.0

    def _accumulate(self, now: float) -> None:
        self.busy_core_seconds += (self.total_cores - self.free_cores) * (now - self._last_change_s)
        self._last_change_s = now

    def reserve(self, cores: int, memory_mb: float, now: float) -> bool:
        if cores < 0 or memory_mb < 0:
            raise ValueError("reservation sizes must be >= 0")
        if self.free_cores < cores or self.free_memory_mb < memory_mb:
            return False
        self._accumulate(now)
        self.free_cores -= cores
        self.free_memory_mb -= memory_mb
        self.reserved_cores += cores
        return True

    def release(self, cores: int, memory_mb: float, now: float) -> None:
        if cores < 0 or memory_mb < 0:
            raise ValueError("release sizes must be >= 0")
        if cores > self.reserved_cores or self.free_memory_mb + memory_mb > self.total_memory_mb + 1e-6:
            raise ReleaseUnderflow(f"site {self.name}: release of {cores} cores exceeds reservations")
        self._accumulate(now)
        self.free_cores += cores
        self.free_memory_mb = min(self.total_memory_mb, self.free_memory_mb + memory_mb)
        self.reserved_cores -= cores

    def close(self, now: float) -> None:
        self._accumulate(now)

    def fits_ever(self, cores: int, memory_mb: float) -> bool:
        return cores <= self.total_cores and memory_mb <= self.total_memory_mb
