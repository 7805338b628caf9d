"""Input files and the static grid model.

A platform is a star: every site owns one uplink to the central broker.
Hosts inside a site are homogeneous, so a site is fully described by one
``SiteSpec``.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import (
    DuplicateSite,
    MissingFile,
    SchemaViolation,
    UnknownPolicy,
    UnknownSiteInNetworkFile,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_INFRA_SITE_FIELDS = (
    "name",
    "host_count",
    "cores_per_host",
    "speed_per_core",
    "memory_per_host_mb",
    "disk_capacity_gb",
)
_INFRA_SITE_OPTIONAL = ("scheduling_overhead_s",)
_LINK_FIELDS = ("bandwidth_bps", "latency_s")
_EXEC_FIELDS = (
    "policy",
    "seed",
    "snapshot_mode",
    "snapshot_interval_s",
    "output_dir",
    "stop_time_s",
    "walltime_includes_staging",
)


@dataclass(frozen=True)
class SiteSpec:
    name: str
    host_count: int
    cores_per_host: int
    speed_per_core: float
    memory_per_host_mb: float
    disk_capacity_gb: float
    uplink_bandwidth_bps: float
    uplink_latency_s: float
    scheduling_overhead_s: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise SchemaViolation("name", "must be non-empty")
        if self.host_count <= 0:
            raise SchemaViolation(f"{self.name}.host_count", "must be positive")
        if self.cores_per_host <= 0:
            raise SchemaViolation(f"{self.name}.cores_per_host", "must be positive")
        if not self.speed_per_core > 0:
            raise SchemaViolation(f"{self.name}.speed_per_core", "must be > 0")
        if self.memory_per_host_mb < 0:
            raise SchemaViolation(f"{self.name}.memory_per_host_mb", "must be >= 0")
        if self.disk_capacity_gb < 0:
            raise SchemaViolation(f"{self.name}.disk_capacity_gb", "must be >= 0")
        if not self.uplink_bandwidth_bps > 0:
            raise SchemaViolation(f"{self.name}.bandwidth_bps", "must be > 0")
        if not self.uplink_latency_s >= 0:
            raise SchemaViolation(f"{self.name}.latency_s", "must be >= 0")
        if not self.scheduling_overhead_s >= 0:
            raise SchemaViolation(f"{self.name}.scheduling_overhead_s", "must be >= 0")

    @property
    def total_cores(self) -> int:
        return self.host_count * self.cores_per_host

    @property
    def total_memory_mb(self) -> float:
        return self.host_count * self.memory_per_host_mb


@dataclass(frozen=True)
class PlatformSpec:
    sites: tuple[SiteSpec, ...]
    broker_link_latency_s: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if not self.sites:
            raise SchemaViolation("sites", "at least one site required")
        seen = set()
        for s in self.sites:
            if s.name in seen:
                raise DuplicateSite(s.name)
            seen.add(s.name)

    @property
    def site_names(self) -> list[str]:
        return [s.name for s in self.sites]

    def site(self, name: str) -> SiteSpec:
        for s in self.sites:
            if s.name == name:
                return s
        raise KeyError(name)

    def with_site_values(self, attr: str, values: Mapping[str, float]) -> "PlatformSpec":
        """Copy of the platform with ``attr`` overridden on the named sites."""
        sites = tuple(
            replace(s, **{attr: float(values[s.name])}) if s.name in values else s
            for s in self.sites
        )
        return replace(self, sites=sites)


@dataclass(frozen=True)
class ExecutionParams:
    policy_name: str
    seed: int = 0
    snapshot_mode: str = "on_transition"
    snapshot_interval_s: float | None = None
    output_dir: str = "output"
    stop_time_s: float | None = None
    walltime_includes_staging: bool = False
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.snapshot_mode not in ("on_transition", "periodic"):
            raise SchemaViolation("snapshot_mode", "must be 'on_transition' or 'periodic'")
        if self.snapshot_mode == "periodic":
            if self.snapshot_interval_s is None or not self.snapshot_interval_s > 0:
                raise SchemaViolation("snapshot_interval_s", "periodic mode needs a positive interval")
        if not 0 <= self.seed < 2**64:
            raise SchemaViolation("seed", "must be a 64-bit unsigned integer")
        if self.stop_time_s is not None and self.stop_time_s < 0:
            raise SchemaViolation("stop_time_s", "must be >= 0")


# -- parsing helpers ----------------------------------------------------------

def _read_json(path) -> Any:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(p)
    try:
        with p.open() as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaViolation("<file>", f"not valid JSON ({exc})", source=p) from exc


def _number(obj: Mapping, key: str, where: str, *, default=None, required=True) -> float:
    if key not in obj or (obj[key] is None and not required):
        if required:
            raise SchemaViolation(f"{where}.{key}", "missing")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaViolation(f"{where}.{key}", f"expected a number, got {type(v).__name__}")
    return v


def _integer(obj: Mapping, key: str, where: str, **kw) -> int:
    v = _number(obj, key, where, **kw)
    if v is None:
        return v
    if isinstance(v, float):
        if not v.is_integer():
            raise SchemaViolation(f"{where}.{key}", "expected an integer")
        v = int(v)
    return v


def _warn_unknown(obj: Mapping, known, where: str, warnings: list | None):
    for key in obj:
        if key not in known:
            msg = f"{where}: unknown field {key!r} ignored"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)


def load_platform(infrastructure_path, network_path, warnings: list | None = None) -> PlatformSpec:
    """Load and cross-validate the infrastructure and network files."""
    infra = _read_json(infrastructure_path)
    net = _read_json(network_path)
    if not isinstance(infra, dict):
        raise SchemaViolation("<root>", "expected an object", source=infrastructure_path)
    if not isinstance(net, dict):
        raise SchemaViolation("<root>", "expected an object", source=network_path)

    _warn_unknown(infra, ("schema_version", "sites"), "infrastructure", warnings)
    version = _integer(infra, "schema_version", "infrastructure")
    if version != SCHEMA_VERSION:
        raise SchemaViolation("schema_version", f"unsupported version {version}")
    raw_sites = infra.get("sites")
    if not isinstance(raw_sites, list):
        raise SchemaViolation("sites", "expected a list", source=infrastructure_path)

    _warn_unknown(net, ("links", "broker_latency_s"), "network", warnings)
    links = net.get("links")
    if not isinstance(links, dict):
        raise SchemaViolation("links", "expected an object", source=network_path)
    broker_latency = _number(net, "broker_latency_s", "network", default=0.0, required=False)

    names = []
    for i, raw in enumerate(raw_sites):
        if not isinstance(raw, dict):
            raise SchemaViolation(f"sites[{i}]", "expected an object")
        name = raw.get("name")
        if not isinstance(name, str) or not name:
            raise SchemaViolation(f"sites[{i}].name", "must be a non-empty string")
        if name in names:
            raise DuplicateSite(name)
        names.append(name)
    for name in names:
        if name not in links:
            raise UnknownSiteInNetworkFile(name)
    for name in links:
        if name not in names:
            raise SchemaViolation(f"links.{name}", "no such site in the infrastructure file")

    sites = []
    for raw in raw_sites:
        name = raw["name"]
        where = f"sites[{name}]"
        _warn_unknown(raw, _INFRA_SITE_FIELDS + _INFRA_SITE_OPTIONAL, where, warnings)
        link = links[name]
        if not isinstance(link, dict):
            raise SchemaViolation(f"links.{name}", "expected an object")
        _warn_unknown(link, _LINK_FIELDS, f"links.{name}", warnings)
        sites.append(SiteSpec(
            name=name,
            host_count=_integer(raw, "host_count", where),
            cores_per_host=_integer(raw, "cores_per_host", where),
            speed_per_core=float(_number(raw, "speed_per_core", where)),
            memory_per_host_mb=float(_number(raw, "memory_per_host_mb", where)),
            disk_capacity_gb=float(_number(raw, "disk_capacity_gb", where)),
            uplink_bandwidth_bps=float(_number(link, "bandwidth_bps", f"links.{name}")),
            uplink_latency_s=float(_number(link, "latency_s", f"links.{name}")),
            scheduling_overhead_s=float(_number(raw, "scheduling_overhead_s", where,
                                                default=0.0, required=False)),
        ))
    return PlatformSpec(sites=tuple(sites), broker_link_latency_s=float(broker_latency),
                        schema_version=version)


def dump_platform(spec: PlatformSpec) -> tuple[dict, dict]:
    """Inverse of :func:`load_platform`: (infrastructure, network) documents."""
    infra = {
        "schema_version": spec.schema_version,
        "sites": [
            {
                "name": s.name,
                "host_count": s.host_count,
                "cores_per_host": s.cores_per_host,
                "speed_per_core": s.speed_per_core,
                "memory_per_host_mb": s.memory_per_host_mb,
                "disk_capacity_gb": s.disk_capacity_gb,
                "scheduling_overhead_s": s.scheduling_overhead_s,
            }
            for s in spec.sites
        ],
    }
    network = {
        "links": {
            s.name: {"bandwidth_bps": s.uplink_bandwidth_bps, "latency_s": s.uplink_latency_s}
            for s in spec.sites
        },
        "broker_latency_s": spec.broker_link_latency_s,
    }
    return infra, network


def write_platform(spec: PlatformSpec, infrastructure_path, network_path) -> None:
    infra, network = dump_platform(spec)
    for path, doc in ((infrastructure_path, infra), (network_path, network)):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


def load_execution_params(path, registry) -> ExecutionParams:
    """Load the execution file, resolving the policy name eagerly."""
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise SchemaViolation("<root>", "expected an object", source=path)
    _warn_unknown(doc, _EXEC_FIELDS, "execution", None)
    notes = []

    policy = doc.get("policy")
    if not isinstance(policy, str) or not policy:
        raise SchemaViolation("policy", "must be a non-empty string")
    if policy not in registry:
        raise UnknownPolicy(policy, registry.names())

    seed = _integer(doc, "seed", "execution", default=None, required=False)
    if seed is None:
        seed = 0
        notes.append("seed omitted; defaulted to 0")
        log.warning("execution file %s: seed omitted, defaulting to 0", path)

    mode = doc.get("snapshot_mode", "on_transition")
    if not isinstance(mode, str):
        raise SchemaViolation("snapshot_mode", "expected a string")
    interval = _number(doc, "snapshot_interval_s", "execution", default=None, required=False)
    stop = _number(doc, "stop_time_s", "execution", default=None, required=False)
    output_dir = doc.get("output_dir", "output")
    if not isinstance(output_dir, str):
        raise SchemaViolation("output_dir", "expected a string")
    flip = doc.get("walltime_includes_staging", False)
    if not isinstance(flip, bool):
        raise SchemaViolation("walltime_includes_staging", "expected a boolean")

    return ExecutionParams(
        policy_name=policy,
        seed=seed,
        snapshot_mode=mode,
        snapshot_interval_s=None if interval is None else float(interval),
        output_dir=output_dir,
        stop_time_s=None if stop is None else float(stop),
        walltime_includes_staging=flip,
        notes=tuple(notes),
    )


def dump_execution_params(params: ExecutionParams) -> dict:
    return {
        "policy": params.policy_name,
        "seed": params.seed,
        "snapshot_mode": params.snapshot_mode,
        "snapshot_interval_s": params.snapshot_interval_s,
        "output_dir": params.output_dir,
        "stop_time_s": params.stop_time_s,
        "walltime_includes_staging": params.walltime_includes_staging,
    }


def resolve_output_dir(params: ExecutionParams) -> str:
    return os.environ.get("GRIDWEAVE_OUTPUT_DIR") or params.output_dir


def synthetic_platform(
    n_sites: int,
    seed: int = 0,
    core_range: tuple[int, int] = (100, 2000),
    cores_per_host: int = 4,
    speed_per_core: float = 1e9,
    memory_per_core_mb: float = 2000.0,
    bandwidth_bps: float = 1.25e9,
    latency_s: float = 0.01,
) -> PlatformSpec:
    """Seeded random platform with site core counts drawn from ``core_range``.

    Core counts are rounded down to a multiple of ``cores_per_host``.
    """
    if n_sites <= 0:
        raise SchemaViolation("n_sites", "must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = core_range
    sites = []
    for i in range(n_sites):
        cores = int(rng.integers(lo, hi + 1))
        hosts = max(1, cores // cores_per_host)
        sites.append(SiteSpec(
            name=f"SITE-{i:03d}",
            host_count=hosts,
            cores_per_host=cores_per_host,
            speed_per_core=speed_per_core,
            memory_per_host_mb=memory_per_core_mb * cores_per_host,
            disk_capacity_gb=1000.0,
            uplink_bandwidth_bps=bandwidth_bps,
            uplink_latency_s=latency_s,
        ))
    return PlatformSpec(sites=tuple(sites))


def site_as_dict(site: SiteSpec) -> dict:
    return asdict(site)
