"""Event-level log, flat-file export, and summary metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import EmptySite, IoError, MalformedRow, NonPositiveTruth, NonPositiveValue, UnknownSite
from .workload import JobState

log = logging.getLogger(__name__)

EVENT_COLUMNS = (
    "event_id",
    "sim_time_s",
    "job_id",
    "state",
    "site",
    "available_cores",
    "pending_jobs",
    "assigned_jobs",
    "finished_jobs",
)
SNAPSHOT_COLUMNS = ("sim_time_s", "site", "available_cores", "pending_jobs",
                    "assigned_jobs", "finished_jobs")
SUMMARY_COLUMNS = ("site", "n_jobs", "rel_mae_walltime", "rel_mae_queue",
                   "mean_utilization", "throughput_jobs_per_s")
GEOMEAN_KEY = "__geomean__"
ZERO_CLAMP = 1e-6


@dataclass(frozen=True)
class EventRecord:
    event_id: int
    sim_time_s: float
    job_id: int
    state: JobState
    site: str
    available_cores: int
    pending_jobs: int
    assigned_jobs: int
    finished_jobs: int

    def as_row(self) -> list[str]:
        return [str(self.event_id), repr(float(self.sim_time_s)), str(self.job_id),
                self.state.value, self.site, str(self.available_cores),
                str(self.pending_jobs), str(self.assigned_jobs), str(self.finished_jobs)]

    def as_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "sim_time_s": float(self.sim_time_s),
            "job_id": self.job_id,
            "state": self.state.value,
            "site": self.site,
            "available_cores": self.available_cores,
            "pending_jobs": self.pending_jobs,
            "assigned_jobs": self.assigned_jobs,
            "finished_jobs": self.finished_jobs,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EventRecord":
        return cls(
            event_id=int(d["event_id"]),
            sim_time_s=float(d["sim_time_s"]),
            job_id=int(d["job_id"]),
            state=JobState(d["state"]),
            site=d["site"] or "",
            available_cores=int(d["available_cores"]),
            pending_jobs=int(d["pending_jobs"]),
            assigned_jobs=int(d["assigned_jobs"]),
            finished_jobs=int(d["finished_jobs"]),
        )


@dataclass(frozen=True)
class SiteSnapshot:
    sim_time_s: float
    site: str
    available_cores: int
    pending_jobs: int
    assigned_jobs: int
    finished_jobs: int


class EventLog:
    """Append-only list of transition records for one run."""

    def __init__(self, base_event_id: int = 1) -> None:
        self.records: list[EventRecord] = []
        self.snapshots: list[SiteSnapshot] = []
        self._next_id = base_event_id

    def record_transition(self, sim_time_s: float, job_id: int, state: JobState, site: str,
                          available_cores: int, pending_jobs: int, assigned_jobs: int,
                          finished_jobs: int) -> EventRecord:
        rec = EventRecord(self._next_id, sim_time_s, job_id, JobState(state), site,
                          available_cores, pending_jobs, assigned_jobs, finished_jobs)
        self._next_id += 1
        self.records.append(rec)
        return rec

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


# -- export / import ------------------------------------------------------------

def export_log(records: Iterable[EventRecord], fmt: str, path) -> None:
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("w", newline="") as fh:
            if fmt == "csv":
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(EVENT_COLUMNS)
                for r in records:
                    w.writerow(r.as_row())
            elif fmt == "jsonl":
                for r in records:
                    fh.write(json.dumps(r.as_dict()) + "\n")
            else:
                raise ValueError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise IoError(f"cannot write {p}: {exc}") from exc


def import_log(path, fmt: str | None = None) -> list[EventRecord]:
    p = Path(path)
    if fmt is None:
        fmt = "jsonl" if p.suffix == ".jsonl" else "csv"
    try:
        with p.open(newline="") as fh:
            if fmt == "jsonl":
                return [EventRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != EVENT_COLUMNS:
                raise MalformedRow(1, "unexpected event-log header")
            return [EventRecord.from_dict(row) for row in reader]
    except OSError as exc:
        raise IoError(f"cannot read {p}: {exc}") from exc


def export_snapshots(snapshots: Sequence[SiteSnapshot], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SNAPSHOT_COLUMNS)
        for s in snapshots:
            w.writerow([repr(float(s.sim_time_s)), s.site, s.available_cores, s.pending_jobs,
                        s.assigned_jobs, s.finished_jobs])


# -- error metrics ----------------------------------------------------------------

def rel_mae(pairs: Sequence[tuple[float, float]]) -> float:
    """Mean of ``|sim - truth| / truth`` over (sim, truth) pairs."""
    if not pairs:
        raise EmptySite("relative MAE of an empty job set")
    total = 0.0
    for sim, truth in pairs:
        if not truth > 0:
            raise NonPositiveTruth(f"truth value {truth!r} must be > 0")
        total += abs(sim - truth) / truth
    return total / len(pairs)


def geomean(values: Sequence[float]) -> float:
    if not values:
        raise NonPositiveValue("geometric mean of no values")
    for v in values:
        if not v > 0:
            raise NonPositiveValue(f"value {v!r} must be > 0")
    return math.exp(math.fsum(math.log(v) for v in values) / len(values))


def clamped_geomean(values: Sequence[float]) -> tuple[float, int]:
    """Geometric mean with exact zeros clamped to ``ZERO_CLAMP``.

    Returns the mean and the number of clamped entries.
    """
    n_clamped = sum(1 for v in values if v == 0)
    return geomean([ZERO_CLAMP if v == 0 else v for v in values]), n_clamped


def filter_truth(pairs: Iterable[tuple[float, float | None]], label: str = "") -> tuple[list, int]:
    """Drop pairs with missing or zero truth; returns (kept, n_dropped_zero)."""
    kept, dropped = [], 0
    for sim, truth in pairs:
        if truth is None:
            continue
        if truth == 0:
            dropped += 1
            continue
        kept.append((sim, truth))
    if dropped:
        log.warning("%s: %d jobs with zero truth excluded from relative MAE", label or "rel_mae", dropped)
    return kept, dropped


# -- utilisation reconstruction ------------------------------------------------------

def _occupancy_steps(records: Iterable[EventRecord], site: str, total_cores: int):
    steps = []
    for r in records:
        if r.site != site:
            continue
        occ = total_cores - r.available_cores
        if steps and steps[-1][0] == r.sim_time_s:
            steps[-1] = (r.sim_time_s, occ)
        else:
            steps.append((r.sim_time_s, occ))
    return steps


def busy_core_seconds_from_log(records: Iterable[EventRecord], site: str, total_cores: int,
                               end_time_s: float) -> float:
    steps = _occupancy_steps(records, site, total_cores)
    total = 0.0
    for i, (t, occ) in enumerate(steps):
        t_next = steps[i + 1][0] if i + 1 < len(steps) else end_time_s
        t_next = min(t_next, end_time_s)
        if t_next > t:
            total += occ * (t_next - t)
    return total


def utilization_series(records: Sequence[EventRecord], site: str, bucket_s: float,
                       total_cores: int, end_time_s: float | None = None,
                       known_sites: Iterable[str] | None = None) -> list[tuple[float, float]]:
    """Bucketed mean busy-core fraction for one site.

    Occupancy is the step function ``total_cores - available_cores`` taken
    from the site's records; before its first record the site is idle. The
    last bucket is averaged over the part that lies before ``end_time_s``.
    """
    if not bucket_s > 0:
        raise ValueError("bucket_s must be > 0")
    if known_sites is not None and site not in set(known_sites):
        raise UnknownSite(site)
    if end_time_s is None:
        end_time_s = max((r.sim_time_s for r in records), default=0.0)
    steps = _occupancy_steps(records, site, total_cores)
    n_buckets = max(1, math.ceil(end_time_s / bucket_s)) if end_time_s > 0 else 1

    out = []
    i = 0
    occ = 0
    for k in range(n_buckets):
        lo = k * bucket_s
        hi = min((k + 1) * bucket_s, end_time_s) if end_time_s > 0 else bucket_s
        area = 0.0
        t = lo
        while i < len(steps) and steps[i][0] <= t:
            occ = steps[i][1]
            i += 1
        while i < len(steps) and steps[i][0] < hi:
            area += occ * (steps[i][0] - t)
            t = steps[i][0]
            occ = steps[i][1]
            i += 1
        area += occ * (hi - t)
        width = hi - lo
        out.append((lo, area / (width * total_cores) if width > 0 else 0.0))
    return out


# -- run summary ------------------------------------------------------------------------

@dataclass
class SiteMetrics:
    n_jobs: int
    rel_mae_walltime: float | None
    rel_mae_queue: float | None
    mean_utilization: float
    throughput_jobs_per_s: float
    rel_mae_walltime_by_class: dict[str, float] = field(default_factory=dict)


@dataclass
class SummaryMetrics:
    per_site: dict[str, SiteMetrics]
    geomean_rel_mae: float | None
    geomean_rel_mae_queue: float | None
    makespan_s: float
    clamped_sites: list[str] = field(default_factory=list)
    zero_truth_excluded: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            for name, m in self.per_site.items():
                w.writerow([name, m.n_jobs, _opt(m.rel_mae_walltime), _opt(m.rel_mae_queue),
                            repr(m.mean_utilization), repr(m.throughput_jobs_per_s)])
            w.writerow([GEOMEAN_KEY, sum(m.n_jobs for m in self.per_site.values()),
                        _opt(self.geomean_rel_mae), _opt(self.geomean_rel_mae_queue), "", ""])


def _opt(v) -> str:
    return "" if v is None else repr(float(v))


def summarize(jobs, timestamps, platform, busy_core_seconds: Mapping[str, float],
              makespan_s: float) -> SummaryMetrics:
    """Per-site error and utilisation metrics for a completed run.

    ``timestamps`` maps job id to an object exposing ``site``,
    ``sim_walltime_s``, ``sim_queue_time_s`` and ``terminal_state``.
    """
    by_site: dict[str, list] = {s.name: [] for s in platform.sites}
    for j in jobs:
        ts = timestamps.get(j.id)
        if ts is None or ts.site is None or ts.terminal_state is not JobState.FINISHED:
            continue
        by_site[ts.site].append((j, ts))

    per_site = {}
    wall_errs, queue_errs = {}, {}
    excluded = 0
    for s in platform.sites:
        entries = by_site[s.name]
        wall, n0 = filter_truth(((ts.sim_walltime_s, j.truth_walltime_s) for j, ts in entries),
                                f"{s.name} walltime")
        queue, n1 = filter_truth(((ts.sim_queue_time_s, j.truth_queue_time_s) for j, ts in entries),
                                 f"{s.name} queue")
        excluded += n0 + n1
        by_class = {}
        for label, pred in (("single_core", lambda j: j.cores == 1), ("multi_core", lambda j: j.cores > 1)):
            cls_pairs, _ = filter_truth(((ts.sim_walltime_s, j.truth_walltime_s)
                                         for j, ts in entries if pred(j)))
            if cls_pairs:
                by_class[label] = rel_mae(cls_pairs)
        rw = rel_mae(wall) if wall else None
        rq = rel_mae(queue) if queue else None
        if rw is not None:
            wall_errs[s.name] = rw
        if rq is not None:
            queue_errs[s.name] = rq
        util = busy_core_seconds.get(s.name, 0.0) / (s.total_cores * makespan_s) if makespan_s > 0 else 0.0
        per_site[s.name] = SiteMetrics(
            n_jobs=len(entries),
            rel_mae_walltime=rw,
            rel_mae_queue=rq,
            mean_utilization=util,
            throughput_jobs_per_s=len(entries) / makespan_s if makespan_s > 0 else 0.0,
            rel_mae_walltime_by_class=by_class,
        )
    gw = gq = None
    clamped = [k for k, v in wall_errs.items() if v == 0]
    if wall_errs:
        gw, _ = clamped_geomean(list(wall_errs.values()))
    if queue_errs:
        gq, _ = clamped_geomean(list(queue_errs.values()))
    return SummaryMetrics(per_site, gw, gq, makespan_s, clamped, excluded)


def job_times_from_log(records: Iterable[EventRecord]) -> dict[int, dict]:
    """Per-job state-entry times and final state reconstructed from a log."""
    out: dict[int, dict] = {}
    for r in records:
        d = out.setdefault(r.job_id, {"site": "", "state": None})
        d[r.state.value] = r.sim_time_s
        d["state"] = r.state
        if r.site:
            d["site"] = r.site
    return out


def incomplete_jobs(records: Iterable[EventRecord]) -> list[int]:
    return sorted(j for j, d in job_times_from_log(records).items() if not d["state"].terminal)
