"""Exception hierarchy.

Every error carries the CLI exit code of its class so command handlers can
map failures without a lookup table.
"""
from __future__ import annotations


class GridweaveError(Exception):
    exit_code = 3


# -- configuration (exit 1) -------------------------------------------------

class ConfigError(GridweaveError):
    exit_code = 1


class MissingFile(ConfigError):
    def __init__(self, path):
        super().__init__(f"missing file: {path}")
        self.path = path


class SchemaViolation(ConfigError):
    def __init__(self, field: str, reason: str, source=None):
        where = f"{source}: " if source else ""
        super().__init__(f"{where}{field}: {reason}")
        self.field = field
        self.reason = reason


class DuplicateSite(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"duplicate site name {name!r}")
        self.name = name


class UnknownSiteInNetworkFile(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"site {name!r} has no entry in the network file")
        self.name = name


class UnknownPolicy(ConfigError):
    def __init__(self, name: str, known=()):
        super().__init__(f"unknown policy {name!r}; registered: {sorted(known)}")
        self.name = name


class DuplicatePolicyName(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"policy {name!r} already registered")
        self.name = name


class InvalidBounds(ConfigError):
    pass


# -- workload (exit 2) ------------------------------------------------------

class WorkloadError(GridweaveError):
    exit_code = 2


class MissingTrace(WorkloadError):
    def __init__(self, path):
        super().__init__(f"missing trace file: {path}")
        self.path = path


class MalformedRow(WorkloadError):
    def __init__(self, line_no: int, reason: str = ""):
        super().__init__(f"malformed trace row at line {line_no}" + (f": {reason}" if reason else ""))
        self.line_no = line_no


class DuplicateJobId(WorkloadError):
    def __init__(self, job_id: int):
        super().__init__(f"duplicate job id {job_id}")
        self.job_id = job_id


class InvalidSpec(WorkloadError):
    pass


class UnknownSite(WorkloadError):
    def __init__(self, name: str):
        super().__init__(f"unknown site {name!r}")
        self.name = name


class MissingTargetSite(WorkloadError):
    def __init__(self, job_id: int):
        super().__init__(f"job {job_id} has no target_site (required by replay)")
        self.job_id = job_id


class MissingQueueTruth(WorkloadError):
    pass


# -- runtime (exit 3) -------------------------------------------------------

class SimulationError(GridweaveError):
    exit_code = 3


class TimeTravel(SimulationError):
    def __init__(self, time_s: float, now: float):
        super().__init__(f"event at t={time_s!r} scheduled in the past (now={now!r})")


class Deadlock(SimulationError):
    def __init__(self, pending_jobs):
        self.pending_jobs = sorted(pending_jobs)
        head = self.pending_jobs[:10]
        super().__init__(f"event queue drained with {len(self.pending_jobs)} non-terminal jobs: {head}")


class ReleaseUnderflow(SimulationError):
    pass


class PolicyReturnedUnknownSite(SimulationError):
    def __init__(self, name):
        super().__init__(f"policy returned unknown site {name!r}")
        self.name = name


class IllegalTransition(SimulationError):
    def __init__(self, job_id: int, old, new):
        super().__init__(f"job {job_id}: illegal transition {old} -> {new}")


class InvariantViolation(SimulationError):
    pass


class MetricError(SimulationError, ValueError):
    pass


class EmptySite(MetricError):
    pass


class NonPositiveTruth(MetricError):
    pass


class NonPositiveValue(MetricError):
    pass


class InvalidBudget(SimulationError, ValueError):
    pass


class DimensionTooSmall(SimulationError, ValueError):
    pass


# -- io (exit 4) ------------------------------------------------------------

class IoError(GridweaveError):
    exit_code = 4
