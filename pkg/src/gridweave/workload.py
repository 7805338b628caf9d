"""Jobs, trace files, and synthetic workloads."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DuplicateJobId, InvalidSpec, MalformedRow, MissingTrace, UnknownSite

TRACE_COLUMNS = (
    "job_id",
    "submit_time_s",
    "work",
    "cores",
    "memory_mb",
    "input_bytes",
    "output_bytes",
    "target_site",
    "truth_walltime_s",
    "truth_queue_time_s",
)


class JobState(str, enum.Enum):
    PENDING = "pending"
    ASSIGNED = "assigned"
    RUNNING = "running"
    FINISHED = "finished"
    FAILED = "failed"

    def __str__(self) -> str:
        return self.value

    @property
    def terminal(self) -> bool:
        return self in (JobState.FINISHED, JobState.FAILED)


LEGAL_TRANSITIONS = {
    None: {JobState.PENDING},
    JobState.PENDING: {JobState.ASSIGNED, JobState.FAILED},
    JobState.ASSIGNED: {JobState.RUNNING, JobState.FAILED},
    JobState.RUNNING: {JobState.FINISHED, JobState.FAILED},
    JobState.FINISHED: set(),
    JobState.FAILED: set(),
}


@dataclass(frozen=True)
class Job:
    id: int
    submit_time_s: float
    work: float
    cores: int
    memory_mb: float = 0.0
    input_bytes: float = 0.0
    output_bytes: float = 0.0
    target_site: str | None = None
    truth_walltime_s: float | None = None
    truth_queue_time_s: float | None = None

    def __post_init__(self):
        if not 0 <= self.id < 2**64:
            raise InvalidSpec(f"job id {self.id} out of range")
        if self.work < 0:
            raise InvalidSpec(f"job {self.id}: work must be >= 0")
        if self.cores < 1:
            raise InvalidSpec(f"job {self.id}: cores must be >= 1")
        if self.memory_mb < 0 or self.input_bytes < 0 or self.output_bytes < 0:
            raise InvalidSpec(f"job {self.id}: memory and byte sizes must be >= 0")


@dataclass(frozen=True)
class WorkloadGenSpec:
    n_sites: int
    jobs_per_site: int
    seed: int = 0
    work_range: tuple[float, float] = (1e11, 1e13)
    cores_choices: tuple[int, ...] = (1, 8)
    interarrival_mean_s: float = 10.0
    io_range_bytes: tuple[float, float] = (1e6, 1e9)
    memory_per_core_mb: float = 0.0

    def validate(self) -> None:
        if self.n_sites <= 0:
            raise InvalidSpec("n_sites must be positive")
        if self.jobs_per_site <= 0:
            raise InvalidSpec("jobs_per_site must be positive")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must be a 64-bit unsigned integer")
        lo, hi = self.work_range
        if not 0 <= lo <= hi:
            raise InvalidSpec("work_range must satisfy 0 <= min <= max")
        lo, hi = self.io_range_bytes
        if not 0 <= lo <= hi:
            raise InvalidSpec("io_range_bytes must satisfy 0 <= min <= max")
        if not self.cores_choices or any(c < 1 for c in self.cores_choices):
            raise InvalidSpec("cores_choices must be non-empty positive integers")
        if not self.interarrival_mean_s > 0:
            raise InvalidSpec("interarrival_mean_s must be positive")
        if self.memory_per_core_mb < 0:
            raise InvalidSpec("memory_per_core_mb must be >= 0")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _opt_float(raw: str) -> float | None:
    return float(raw) if raw.strip() else None


def _parse_int(raw: str) -> int:
    # ids and core counts may be written as "8" or "8.0"
    try:
        return int(raw)
    except ValueError:
        f = float(raw)
        if not f.is_integer():
            raise
        return int(f)


def parse_trace(path) -> list[Job]:
    """Read a trace CSV, returning jobs sorted by (submit_time_s, id)."""
    p = Path(path)
    if not p.is_file():
        raise MissingTrace(p)
    jobs: list[Job] = []
    seen: set[int] = set()
    with p.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != TRACE_COLUMNS:
            raise MalformedRow(1, f"header must be {','.join(TRACE_COLUMNS)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(TRACE_COLUMNS):
                raise MalformedRow(line_no, f"expected {len(TRACE_COLUMNS)} columns, got {len(row)}")
            try:
                job = Job(
                    id=_parse_int(row[0]),
                    submit_time_s=float(row[1]),
                    work=float(row[2]),
                    cores=_parse_int(row[3]),
                    memory_mb=float(row[4]),
                    input_bytes=float(row[5]),
                    output_bytes=float(row[6]),
                    target_site=row[7].strip() or None,
                    truth_walltime_s=_opt_float(row[8]),
                    truth_queue_time_s=_opt_float(row[9]),
                )
            except (ValueError, InvalidSpec) as exc:
                raise MalformedRow(line_no, str(exc)) from exc
            if not math.isfinite(job.submit_time_s) or not math.isfinite(job.work):
                raise MalformedRow(line_no, "non-finite value")
            if job.id in seen:
                raise DuplicateJobId(job.id)
            seen.add(job.id)
            jobs.append(job)
    jobs.sort(key=lambda j: (j.submit_time_s, j.id))
    return jobs


def write_trace(jobs: Iterable[Job], path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for j in jobs:
            w.writerow([
                j.id, _fmt(j.submit_time_s), _fmt(j.work), j.cores, _fmt(j.memory_mb),
                _fmt(j.input_bytes), _fmt(j.output_bytes), j.target_site or "",
                _fmt(j.truth_walltime_s), _fmt(j.truth_queue_time_s),
            ])


def generate_workload(spec: WorkloadGenSpec) -> list[Job]:
    """Seeded synthetic workload of ``n_sites * jobs_per_site`` jobs.

    Arrivals form one Poisson stream; work and I/O sizes are uniform over
    their ranges, cores uniform over ``cores_choices``. Sites are left
    unassigned.
    """
    spec.validate()
    n = spec.n_sites * spec.jobs_per_site
    rng = np.random.default_rng(spec.seed)
    gaps = rng.exponential(spec.interarrival_mean_s, size=n)
    arrivals = np.cumsum(gaps) - gaps[0]  # first job at t=0
    work = rng.uniform(spec.work_range[0], spec.work_range[1], size=n)
    cores = rng.choice(np.asarray(spec.cores_choices, dtype=np.int64), size=n)
    io_lo, io_hi = spec.io_range_bytes
    inp = np.floor(rng.uniform(io_lo, io_hi, size=n))
    out = np.floor(rng.uniform(io_lo, io_hi, size=n))
    return [
        Job(
            id=i + 1,
            submit_time_s=float(arrivals[i]),
            work=float(work[i]),
            cores=int(cores[i]),
            memory_mb=float(cores[i]) * spec.memory_per_core_mb,
            input_bytes=float(inp[i]),
            output_bytes=float(out[i]),
        )
        for i in range(n)
    ]


def synthesize_truth(
    jobs: Sequence[Job],
    platform,
    assignment: Mapping[int, str],
    *,
    walltime_includes_staging: bool = False,
) -> list[Job]:
    """Attach ground-truth timings produced by the simulator itself.

    Each job is pinned to ``assignment[job.id]``; walltime is the analytic
    compute duration and queue time comes from one replay simulation at the
    platform's current parameters.
    """
    from .broker import simulate
    from .kernel import compute_duration
    from .policy import ReplayPolicy

    names = set(platform.site_names)
    pinned = []
    for j in jobs:
        site = assignment.get(j.id)
        if site is None or site not in names:
            raise UnknownSite(str(site))
        pinned.append(replace(j, target_site=site, truth_walltime_s=None, truth_queue_time_s=None))

    result = simulate(platform, pinned, ReplayPolicy(),
                      walltime_includes_staging=walltime_includes_staging)
    out = []
    for j in pinned:
        ts = result.timestamps[j.id]
        if walltime_includes_staging:
            wall = ts.sim_walltime_s
        else:
            wall = compute_duration(j, platform.site(j.target_site))
        out.append(replace(j, truth_walltime_s=wall, truth_queue_time_s=ts.sim_queue_time_s))
    return out


def round_robin_assignment(jobs: Sequence[Job], site_names: Sequence[str]) -> dict[int, str]:
    """Deterministic job -> site map cycling through ``site_names``."""
    return {j.id: site_names[i % len(site_names)] for i, j in enumerate(jobs)}
