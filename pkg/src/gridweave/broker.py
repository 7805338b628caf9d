"""Main-server control loop and per-site receivers.

Job lifecycle at a site, in order:

1. stage input over the site uplink,
2. wait the site's scheduling overhead,
3. reserve cores and memory, strictly in local-queue order,
4. compute,
5. release, then stage output,
6. finish.

Cores are held only during step 4, so "available cores" in the event log is
compute occupancy.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import Deadlock, IllegalTransition, InvariantViolation, PolicyReturnedUnknownSite
from .kernel import Engine, EventKind, FlowNetwork, Link, SiteState, compute_duration
from .policy import AllocationPolicy, ResourceView, SiteView, default_registry
from .telemetry import EventLog, SiteSnapshot, SummaryMetrics, summarize
from .workload import LEGAL_TRANSITIONS, Job, JobState

log = logging.getLogger(__name__)


@dataclass
class JobTimestamps:
    submitted_s: float
    site: str | None = None
    assigned_s: float | None = None
    input_done_s: float | None = None
    ready_s: float | None = None
    running_s: float | None = None
    compute_end_s: float | None = None
    compute_s: float | None = None
    terminal_s: float | None = None
    terminal_state: JobState | None = None
    failure_reason: str | None = None
    walltime_includes_staging: bool = False

    @property
    def sim_queue_time_s(self) -> float | None:
        if self.running_s is None:
            return None
        if self.walltime_includes_staging:
            return (self.assigned_s - self.submitted_s) + (self.running_s - self.ready_s)
        return self.running_s - self.submitted_s

    @property
    def sim_walltime_s(self) -> float | None:
        if self.compute_end_s is None:
            return None
        compute = self.compute_s
        if self.walltime_includes_staging:
            if self.terminal_s is None:
                return None
            return (self.ready_s - self.assigned_s) + compute + (self.terminal_s - self.compute_end_s)
        return compute


@dataclass
class SimulationResult:
    final_time_s: float
    truncated: bool
    jobs: list[Job]
    timestamps: dict[int, JobTimestamps]
    states: dict[int, JobState]
    site_counters: dict[str, dict[str, int]]
    busy_core_seconds: dict[str, float]
    log: EventLog
    events_processed: int
    event_trace: list | None = None
    pending_at_end: list[int] = field(default_factory=list)

    @property
    def assignments(self) -> dict[int, str]:
        return {jid: ts.site for jid, ts in self.timestamps.items() if ts.site is not None}

    def count(self, state: JobState) -> int:
        return sum(1 for s in self.states.values() if s is state)

    def summary(self, platform) -> SummaryMetrics:
        return summarize(self.jobs, self.timestamps, platform, self.busy_core_seconds,
                         self.final_time_s)


class Simulation:
    """One run of the grid: broker, receivers, network and telemetry."""

    def __init__(
        self,
        platform,
        jobs: Iterable[Job],
        policy: AllocationPolicy,
        *,
        snapshot_mode: str = "on_transition",
        snapshot_interval_s: float | None = None,
        stop_time_s: float | None = None,
        walltime_includes_staging: bool = False,
        check_invariants: bool = False,
        base_event_id: int = 1,
        record_trace: bool = False,
    ) -> None:
        self.platform = platform
        self.policy = policy
        self.jobs = sorted(jobs, key=lambda j: (j.submit_time_s, j.id))
        self.job_by_id = {j.id: j for j in self.jobs}
        if len(self.job_by_id) != len(self.jobs):
            raise ValueError("duplicate job ids in workload")
        self.snapshot_mode = snapshot_mode
        self.snapshot_interval_s = snapshot_interval_s
        self.stop_time_s = stop_time_s
        self.walltime_includes_staging = walltime_includes_staging
        self.check = check_invariants

        self.engine = Engine()
        if record_trace:
            self.engine.trace = []
        self.sites = {s.name: SiteState(s) for s in platform.sites}
        self.order = tuple(sorted(self.sites))
        self.network = FlowNetwork(
            self.engine,
            {s.name: Link(s.name, s.uplink_bandwidth_bps, s.uplink_latency_s) for s in platform.sites},
            check=check_invariants,
        )
        self.log = EventLog(base_event_id)
        self.state: dict[int, JobState] = {}
        self.ts: dict[int, JobTimestamps] = {}
        self.pending: dict[int, None] = {}  # insertion-ordered set
        self.ready: dict[str, set[int]] = {name: set() for name in self.sites}
        self.running: dict[str, dict[int, int]] = {name: {} for name in self.sites}
        self.state_counts: Counter = Counter()
        self.grid_free_cores = sum(s.total_cores for s in self.sites.values())
        self.total_assigned = 0
        self.total_finished = 0
        self.total_failed = 0
        self._last_time = 0.0
        self._last_event_id = 0
        self._checked_records = 0
        self._last_activity_s = 0.0
        self._views: dict[str, SiteView] = {}
        self._dirty: set[str] = set(self.order)
        self._view_pending = -1

        e = self.engine
        e.on(EventKind.JOB_ARRIVAL, self._on_arrival)
        e.on(EventKind.OVERHEAD_ELAPSED, self._on_overhead_elapsed)
        e.on(EventKind.COMPUTE_COMPLETE, self._on_compute_complete)
        e.on(EventKind.SNAPSHOT_TICK, self._on_snapshot)

    # -- views and bookkeeping ------------------------------------------------------

    def _site_view(self, name: str, pend: int) -> SiteView:
        s = self.sites[name]
        return SiteView(
            name=name,
            total_cores=s.total_cores,
            free_cores=s.free_cores,
            free_memory_mb=s.free_memory_mb,
            speed_per_core=s.spec.speed_per_core,
            uplink_bandwidth_bps=s.spec.uplink_bandwidth_bps,
            local_queue_length=len(s.local_queue),
            pending_global=pend,
        )

    def resource_view(self) -> ResourceView:
        # per-site views are cached and rebuilt only for sites touched since the last call
        pend = len(self.pending)
        if pend != self._view_pending:
            self._dirty.update(self.order)
            self._view_pending = pend
        for name in self._dirty:
            self._views[name] = self._site_view(name, pend)
        self._dirty.clear()
        return ResourceView(self._views, self.engine.now, pend, self.order)

    def _transition(self, jid: int, new: JobState, site: str = "") -> None:
        old = self.state.get(jid)
        if new not in LEGAL_TRANSITIONS[old]:
            raise IllegalTransition(jid, old, new)
        self.state[jid] = new
        if old is not None:
            self.state_counts[old] -= 1
        self.state_counts[new] += 1
        if site:
            s = self.sites[site]
            avail, assigned, finished = s.free_cores, s.assigned_count, s.finished_count
        else:
            avail, assigned, finished = self.grid_free_cores, self.total_assigned, self.total_finished
        self.log.record_transition(self.engine.now, jid, new, site, avail, len(self.pending),
                                   assigned, finished)

    def _fail(self, jid: int, reason: str, site: str = "") -> None:
        ts = self.ts[jid]
        ts.terminal_s = self.engine.now
        ts.terminal_state = JobState.FAILED
        ts.failure_reason = reason
        self.total_failed += 1
        if site:
            self.sites[site].failed_count += 1
        self._transition(jid, JobState.FAILED, site)

    # -- broker -------------------------------------------------------------------------

    def _on_arrival(self, ev) -> None:
        job = self.job_by_id[ev.payload]
        self.ts[job.id] = JobTimestamps(self.engine.now,
                                        walltime_includes_staging=self.walltime_includes_staging)
        self._transition(job.id, JobState.PENDING)
        if not any(s.fits_ever(job.cores, job.memory_mb) for s in self.sites.values()):
            self._fail(job.id, "unsatisfiable")
            return
        view = self.resource_view()
        self.policy.get_resource_information(view)
        self._decide(job, self.policy.assign_job(job, view), from_pending=False)

    def _decide(self, job: Job, site: str | None, from_pending: bool) -> bool:
        if site is None:
            if not from_pending:
                self.pending[job.id] = None
            return False
        if site not in self.sites:
            raise PolicyReturnedUnknownSite(site)
        if from_pending:
            del self.pending[job.id]
        s = self.sites[site]
        if not s.fits_ever(job.cores, job.memory_mb):
            self._fail(job.id, f"unsatisfiable at {site}", site)
            return True
        ts = self.ts[job.id]
        ts.site = site
        ts.assigned_s = self.engine.now
        s.assigned_count += 1
        self.total_assigned += 1
        s.local_queue.append(job.id)
        self._dirty.add(site)
        self._transition(job.id, JobState.ASSIGNED, site)
        self.network.open_flow(site, job.input_bytes,
                               lambda flow, jid=job.id: self._on_input_staged(jid))
        return True

    def on_resource_freed(self, site: str) -> None:
        """Offer every pending job to the policy once, in FIFO order."""
        if not self.pending:
            return
        self.policy.get_resource_information(self.resource_view())
        for jid in list(self.pending):
            job = self.job_by_id[jid]
            self._decide(job, self.policy.assign_job(job, self.resource_view()), from_pending=True)

    # -- receivers --------------------------------------------------------------------------

    def _on_input_staged(self, jid: int) -> None:
        ts = self.ts[jid]
        ts.input_done_s = self.engine.now
        overhead = self.sites[ts.site].spec.scheduling_overhead_s
        self.engine.schedule(self.engine.now + overhead, EventKind.OVERHEAD_ELAPSED, jid)

    def _on_overhead_elapsed(self, ev) -> None:
        jid = ev.payload
        ts = self.ts[jid]
        ts.ready_s = self.engine.now
        self.ready[ts.site].add(jid)
        self._try_start(ts.site)

    def _try_start(self, site: str) -> None:
        s = self.sites[site]
        ready = self.ready[site]
        now = self.engine.now
        while s.local_queue and s.local_queue[0] in ready:
            jid = s.local_queue[0]
            job = self.job_by_id[jid]
            if not s.reserve(job.cores, job.memory_mb, now):
                break
            s.local_queue.popleft()
            self._dirty.add(site)
            ready.discard(jid)
            self.grid_free_cores -= job.cores
            self.running[site][jid] = job.cores
            ts = self.ts[jid]
            ts.running_s = now
            ts.compute_s = compute_duration(job, s.spec)
            self._transition(jid, JobState.RUNNING, site)
            self.engine.schedule(now + ts.compute_s, EventKind.COMPUTE_COMPLETE, jid)

    def _on_compute_complete(self, ev) -> None:
        jid = ev.payload
        job = self.job_by_id[jid]
        ts = self.ts[jid]
        site = ts.site
        s = self.sites[site]
        now = self.engine.now
        ts.compute_end_s = now
        s.release(job.cores, job.memory_mb, now)
        self._dirty.add(site)
        self.grid_free_cores += job.cores
        del self.running[site][jid]
        self._try_start(site)
        self.on_resource_freed(site)
        self.network.open_flow(site, job.output_bytes,
                               lambda flow, jid=jid: self._on_output_staged(jid))

    def _on_output_staged(self, jid: int) -> None:
        ts = self.ts[jid]
        s = self.sites[ts.site]
        ts.terminal_s = self.engine.now
        ts.terminal_state = JobState.FINISHED
        s.finished_count += 1
        self.total_finished += 1
        self._transition(jid, JobState.FINISHED, ts.site)
        self.policy.on_job_finished(self.job_by_id[jid], ts.site)

    # -- periodic snapshots ---------------------------------------------------------------

    def _on_snapshot(self, ev) -> None:
        now = self.engine.now
        if self.engine.peek_time() == now:
            # let same-instant work settle so the snapshot sees the post-event state
            self.engine.schedule(now, EventKind.SNAPSHOT_TICK)
            return
        for name in self.order:
            s = self.sites[name]
            self.log.snapshots.append(SiteSnapshot(now, name, s.free_cores, len(self.pending),
                                                   s.assigned_count, s.finished_count))
        if len(self.engine) > 0:
            self.engine.schedule(now + self.snapshot_interval_s, EventKind.SNAPSHOT_TICK)

    def _after_event(self, ev) -> None:
        if ev.kind is not EventKind.SNAPSHOT_TICK:
            self._last_activity_s = self.engine.now
        if self.check:
            self.check_invariants(ev)

    # -- invariants -------------------------------------------------------------------------

    def check_invariants(self, ev=None) -> None:
        now = self.engine.now
        if now < self._last_time:
            raise InvariantViolation(f"clock went backwards: {now} < {self._last_time}")
        self._last_time = now
        for name, s in self.sites.items():
            if not 0 <= s.free_cores <= s.total_cores:
                raise InvariantViolation(f"{name}: free cores {s.free_cores} out of range")
            held = sum(self.running[name].values())
            if s.free_cores + held != s.total_cores:
                raise InvariantViolation(f"{name}: core conservation broken ({s.free_cores} + {held})")
        arrived = len(self.state)
        if sum(self.state_counts.values()) != arrived:
            raise InvariantViolation("job-count conservation broken")
        if self.state_counts[JobState.PENDING] < len(self.pending):
            raise InvariantViolation("pending list holds non-pending jobs")
        recs = self.log.records
        for r in recs[self._checked_records:]:
            if r.event_id <= self._last_event_id:
                raise InvariantViolation("event ids not strictly increasing")
            if r.sim_time_s != now:
                raise InvariantViolation("record time differs from the event instant")
            self._last_event_id = r.event_id
        self._checked_records = len(recs)
        view = self.resource_view()
        pend = len(self.pending)
        for name in self.order:
            if view[name] != self._site_view(name, pend):
                raise InvariantViolation(f"{name}: cached resource view is stale")

    # -- driver ------------------------------------------------------------------------------

    def run(self) -> SimulationResult:
        for job in self.jobs:
            self.engine.schedule(job.submit_time_s, EventKind.JOB_ARRIVAL, job.id)
        if self.snapshot_mode == "periodic" and self.jobs:
            self.engine.schedule(0.0, EventKind.SNAPSHOT_TICK)
        self.policy.on_simulation_start(self.resource_view())
        truncated = self.engine.run(self.stop_time_s, self._after_event)
        final = self.stop_time_s if truncated else self._last_activity_s
        for s in self.sites.values():
            s.close(final)
        non_terminal = [jid for jid, st in self.state.items() if not st.terminal]
        if not truncated:
            not_arrived = [j.id for j in self.jobs if j.id not in self.state]
            if non_terminal or not_arrived:
                raise Deadlock(non_terminal + not_arrived)
        self.policy.on_simulation_end(self.resource_view())
        return SimulationResult(
            final_time_s=final,
            truncated=truncated,
            jobs=self.jobs,
            timestamps=self.ts,
            states=dict(self.state),
            site_counters={
                name: {"assigned": s.assigned_count, "finished": s.finished_count,
                       "failed": s.failed_count, "free_cores": s.free_cores}
                for name, s in self.sites.items()
            },
            busy_core_seconds={name: s.busy_core_seconds for name, s in self.sites.items()},
            log=self.log,
            events_processed=self.engine.popped,
            event_trace=self.engine.trace,
            pending_at_end=list(self.pending),
        )


def simulate(platform, jobs: Sequence[Job], policy: AllocationPolicy | str = "first_fit",
             seed: int = 0, **kwargs) -> SimulationResult:
    """Build and run a :class:`Simulation`; ``policy`` may be a registry name."""
    if isinstance(policy, str):
        policy = default_registry().create(policy, seed=seed, platform=platform)
    return Simulation(platform, jobs, policy, **kwargs).run()
