"""Allocation policies and the name -> constructor registry.

A policy sees one job at a time together with a read-only snapshot of the
grid and answers with a site name, or ``None`` to leave the job on the
broker's pending list. Policies never reserve resources themselves.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Mapping

from .errors import DuplicatePolicyName, MissingTargetSite, UnknownPolicy


@dataclass(frozen=True)
class SiteView:
    name: str
    total_cores: int
    free_cores: int
    free_memory_mb: float
    speed_per_core: float
    uplink_bandwidth_bps: float
    local_queue_length: int
    pending_global: int

    def fits(self, job) -> bool:
        return self.free_cores >= job.cores and self.free_memory_mb >= job.memory_mb


class ResourceView(Mapping[str, SiteView]):
    """Immutable per-site snapshot, iterated in lexicographic site order."""

    __slots__ = ("_sites", "_order", "time_s", "pending_global")

    def __init__(self, sites: Mapping[str, SiteView], time_s: float = 0.0,
                 pending_global: int = 0, order: tuple[str, ...] | None = None) -> None:
        self._sites = MappingProxyType(dict(sites))
        self._order = order if order is not None else tuple(sorted(self._sites))
        self.time_s = time_s
        self.pending_global = pending_global

    def __getitem__(self, name: str) -> SiteView:
        return self._sites[name]

    def __iter__(self):
        return iter(self._order)

    def __len__(self) -> int:
        return len(self._order)

    def __repr__(self) -> str:
        return f"ResourceView(t={self.time_s!r}, sites={len(self)}, pending={self.pending_global})"


class AllocationPolicy(ABC):
    """Base class for allocation policies.

    Subclasses must implement :meth:`assign_job`. The remaining hooks are
    optional notifications and default to no-ops.
    """

    name = "abstract"

    def __init__(self, seed: int = 0, platform=None) -> None:
        self.seed = seed
        self.platform = platform
        self.topology: ResourceView | None = None

    def get_resource_information(self, view: ResourceView) -> None:
        self.topology = view

    @abstractmethod
    def assign_job(self, job, view: ResourceView) -> str | None:
        ...

    def on_job_finished(self, job, site: str) -> None:
        pass

    def on_simulation_start(self, view: ResourceView) -> None:
        pass

    def on_simulation_end(self, view: ResourceView) -> None:
        pass


class FirstFitPolicy(AllocationPolicy):
    name = "first_fit"

    def assign_job(self, job, view):
        for name in view:
            if view[name].fits(job):
                return name
        return None


class LeastLoadedPolicy(AllocationPolicy):
    name = "least_loaded"

    def assign_job(self, job, view):
        best, best_ratio = None, -1.0
        for name in view:
            s = view[name]
            if not s.fits(job):
                continue
            ratio = s.free_cores / s.total_cores
            if ratio > best_ratio:
                best, best_ratio = name, ratio
        return best


class ReplayPolicy(AllocationPolicy):
    """Send every job to the site recorded in its trace."""

    name = "replay"

    def assign_job(self, job, view):
        if job.target_site is None:
            raise MissingTargetSite(job.id)
        return job.target_site


class RoundRobinPolicy(AllocationPolicy):
    """Cycle over sites in name order, skipping those that cannot fit the job.

    The cursor starts at ``seed mod n_sites`` and moves to just past the
    chosen site, so a skipped site is passed over once and is first in line
    on the next call.
    """

    name = "round_robin"

    def __init__(self, seed: int = 0, platform=None) -> None:
        super().__init__(seed, platform)
        self._counter = seed

    def assign_job(self, job, view):
        names = list(view)
        n = len(names)
        if n == 0:
            return None
        start = self._counter % n
        for k in range(n):
            idx = (start + k) % n
            if view[names[idx]].fits(job):
                self._counter = idx + 1
                return names[idx]
        return None


PolicyFactory = Callable[..., AllocationPolicy]


class PolicyRegistry:
    def __init__(self) -> None:
        self._factories: dict[str, PolicyFactory] = {}

    def register(self, name: str, factory: PolicyFactory) -> None:
        if name in self._factories:
            raise DuplicatePolicyName(name)
        self._factories[name] = factory

    def __contains__(self, name: object) -> bool:
        return name in self._factories

    def names(self) -> list[str]:
        return sorted(self._factories)

    def create(self, name: str, seed: int = 0, platform=None) -> AllocationPolicy:
        try:
            factory = self._factories[name]
        except KeyError:
            raise UnknownPolicy(name, self._factories) from None
        return factory(seed=seed, platform=platform)


def default_registry() -> PolicyRegistry:
    reg = PolicyRegistry()
    for cls in (FirstFitPolicy, LeastLoadedPolicy, ReplayPolicy, RoundRobinPolicy):
        reg.register(cls.name, cls)
    return reg
