"""Calibration problem definition and the simulator-backed objective."""
from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..broker import Simulation
from ..errors import InvalidBounds, MissingQueueTruth, UnknownSite, WorkloadError
from ..policy import ReplayPolicy
from ..telemetry import GEOMEAN_KEY, clamped_geomean, filter_truth, rel_mae


class Parameter(str, enum.Enum):
    SPEED_PER_CORE = "speed_per_core"
    SCHEDULING_OVERHEAD = "scheduling_overhead_s"

    @property
    def log_scale(self) -> bool:
        return self is Parameter.SPEED_PER_CORE


class Objective(str, enum.Enum):
    REL_MAE_WALLTIME = "walltime"
    REL_MAE_QUEUE = "queue"


class Mode(str, enum.Enum):
    PER_SITE = "per_site"
    JOINT = "joint"


DEFAULT_SPEED_FACTOR = 4.0
DEFAULT_OVERHEAD_BOUNDS = (0.0, 600.0)


@dataclass
class CalibrationProblem:
    trace: Sequence
    base_platform: object
    parameter: Parameter = Parameter.SPEED_PER_CORE
    bounds: Mapping[str, tuple[float, float]] | None = None
    objective: Objective | None = None
    mode: Mode = Mode.PER_SITE
    workers: int = 1

    def __post_init__(self):
        self.parameter = Parameter(self.parameter)
        self.mode = Mode(self.mode)
        if self.objective is None:
            self.objective = (Objective.REL_MAE_QUEUE if self.parameter is Parameter.SCHEDULING_OVERHEAD
                              else Objective.REL_MAE_WALLTIME)
        self.objective = Objective(self.objective)
        names = set(self.base_platform.site_names)
        used = []
        for j in self.trace:
            if j.target_site is None:
                raise WorkloadError(f"job {j.id} has no target_site; calibration replays assignments")
            if j.target_site not in names:
                raise UnknownSite(j.target_site)
            if j.target_site not in used:
                used.append(j.target_site)
            if self.objective is Objective.REL_MAE_QUEUE and j.truth_queue_time_s is None:
                raise MissingQueueTruth(f"job {j.id} lacks truth_queue_time_s")
            if self.objective is Objective.REL_MAE_WALLTIME and j.truth_walltime_s is None:
                raise WorkloadError(f"job {j.id} lacks truth_walltime_s")
        if self.bounds is None:
            self.bounds = {name: self._default_bounds(name) for name in self.base_platform.site_names
                           if name in used}
        self.bounds = {k: (float(lo), float(hi)) for k, (lo, hi) in self.bounds.items()}
        for name, (lo, hi) in self.bounds.items():
            if name not in names:
                raise UnknownSite(name)
            if not lo <= hi:
                raise InvalidBounds(f"{name}: low {lo} > high {hi}")
            if self.parameter.log_scale and not lo > 0:
                raise InvalidBounds(f"{name}: speed bounds must be positive")
            if lo < 0:
                raise InvalidBounds(f"{name}: bounds must be non-negative")
        if not self.bounds:
            raise InvalidBounds("no sites to calibrate")

    def _default_bounds(self, name):
        if self.parameter.log_scale:
            v = getattr(self.base_platform.site(name), self.parameter.value)
            return (v / DEFAULT_SPEED_FACTOR, v * DEFAULT_SPEED_FACTOR)
        return DEFAULT_OVERHEAD_BOUNDS

    @property
    def sites(self) -> list[str]:
        # platform order, restricted to the calibrated sites
        return [n for n in self.base_platform.site_names if n in self.bounds]

    def initial_params(self) -> dict[str, float]:
        return {n: float(getattr(self.base_platform.site(n), self.parameter.value)) for n in self.sites}

    # unit-cube coordinates: log-scaled for speeds, linear otherwise

    def to_unit(self, name: str, value: float) -> float:
        lo, hi = self.bounds[name]
        if hi == lo:
            return 0.0
        if self.parameter.log_scale:
            return (math.log(value) - math.log(lo)) / (math.log(hi) - math.log(lo))
        return (value - lo) / (hi - lo)

    def from_unit(self, name: str, u: float) -> float:
        lo, hi = self.bounds[name]
        if u <= 0.0:
            return lo
        if u >= 1.0:
            return hi
        if self.parameter.log_scale:
            return math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
        return lo + u * (hi - lo)

    def platform_for(self, params: Mapping[str, float]):
        return self.base_platform.with_site_values(self.parameter.value, params)


def site_errors(problem: CalibrationProblem, params: Mapping[str, float]) -> dict[str, float]:
    """Run one replay simulation and return rel-MAE per calibrated site."""
    platform = problem.platform_for(params)
    result = Simulation(platform, problem.trace, ReplayPolicy()).run()
    queue = problem.objective is Objective.REL_MAE_QUEUE
    pairs: dict[str, list] = {n: [] for n in problem.sites}
    for j in problem.trace:
        if j.target_site not in pairs:
            continue
        ts = result.timestamps[j.id]
        if queue:
            pairs[j.target_site].append((ts.sim_queue_time_s, j.truth_queue_time_s))
        else:
            pairs[j.target_site].append((ts.sim_walltime_s, j.truth_walltime_s))
    out = {}
    for name, ps in pairs.items():
        kept, _ = filter_truth(ps, name)
        if kept:
            out[name] = rel_mae(kept)
    return out


def aggregate(errors: Mapping[str, float]) -> float:
    return clamped_geomean(list(errors.values()))[0] if errors else 0.0


def evaluate(problem: CalibrationProblem, params: Mapping[str, float]) -> float:
    """Geometric-mean rel-MAE across sites for one parameter vector."""
    for name, v in params.items():
        lo, hi = problem.bounds[name]
        if not lo <= v <= hi:
            raise InvalidBounds(f"{name}: {v} outside [{lo}, {hi}]")
    return aggregate(site_errors(problem, params))


_WORKER_PROBLEM: CalibrationProblem | None = None


def _init_worker(problem):
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = problem


def _worker_errors(params):
    return site_errors(_WORKER_PROBLEM, params)


class Evaluator:
    """Counts simulator invocations; optionally fans batches out to processes."""

    def __init__(self, problem: CalibrationProblem) -> None:
        self.problem = problem
        self.evaluations = 0

    def errors(self, params: Mapping[str, float]) -> dict[str, float]:
        self.evaluations += 1
        return site_errors(self.problem, params)

    def batch(self, candidates: Sequence[Mapping[str, float]]) -> list[dict[str, float]]:
        self.evaluations += len(candidates)
        if self.problem.workers <= 1 or len(candidates) < 2:
            return [site_errors(self.problem, c) for c in candidates]
        with ProcessPoolExecutor(self.problem.workers, initializer=_init_worker,
                                 initargs=(self.problem,)) as pool:
            # map preserves candidate order regardless of completion order
            return list(pool.map(_worker_errors, candidates, chunksize=max(1, len(candidates) // 32)))


@dataclass
class CalibrationResult:
    params: dict[str, float]
    objective_before: float
    objective_after: float
    evaluations_used: int
    per_site_error: dict[str, float]
    per_site_error_before: dict[str, float] = field(default_factory=dict)
    params_before: dict[str, float] = field(default_factory=dict)
    optimizer: str = ""
    settings: dict = field(default_factory=dict)
    history: list[float] = field(default_factory=list)

    def write_report(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["site", "param_before", "param_after", "rel_mae_before", "rel_mae_after"])
            for name, after in self.params.items():
                w.writerow([name, repr(self.params_before.get(name)), repr(after),
                            _fmt(self.per_site_error_before.get(name)),
                            _fmt(self.per_site_error.get(name))])
            w.writerow([GEOMEAN_KEY, "", "", repr(self.objective_before), repr(self.objective_after)])


def _fmt(v):
    return "" if v is None else repr(v)


def stratified_unit_samples(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` draws on [0, 1): one uniform point per equal-width stratum, shuffled.

    Each draw is marginally uniform; the stratification bounds the largest
    gap between neighbouring samples by two stratum widths.
    """
    return (rng.permutation(n) + rng.random(n)) / n
