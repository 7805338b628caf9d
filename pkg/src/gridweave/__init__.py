"""Discrete-event simulation of distributed computing grids."""
from .broker import JobTimestamps, Simulation, SimulationResult, simulate
from .platform import ExecutionParams, PlatformSpec, SiteSpec, load_execution_params, load_platform
from .policy import AllocationPolicy, PolicyRegistry, ResourceView, default_registry
from .workload import Job, JobState, WorkloadGenSpec, generate_workload, parse_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "AllocationPolicy",
    "ExecutionParams",
    "Job",
    "JobState",
    "JobTimestamps",
    "PlatformSpec",
    "PolicyRegistry",
    "ResourceView",
    "Simulation",
    "SimulationResult",
    "SiteSpec",
    "WorkloadGenSpec",
    "default_registry",
    "generate_workload",
    "load_execution_params",
    "load_platform",
    "parse_trace",
    "simulate",
    "write_trace",
]
