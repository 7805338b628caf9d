from __future__ import annotations

import json

import pytest

from gridweave.platform import PlatformSpec, SiteSpec
from gridweave.workload import Job


def make_site(name, hosts=1, cores=4, speed=1e9, memory=1e6, bw=1e8, lat=0.0, overhead=0.0):
    return SiteSpec(name=name, host_count=hosts, cores_per_host=cores, speed_per_core=speed,
                    memory_per_host_mb=memory, disk_capacity_gb=100.0, uplink_bandwidth_bps=bw,
                    uplink_latency_s=lat, scheduling_overhead_s=overhead)


def make_platform(*sites):
    return PlatformSpec(sites=tuple(sites))


def make_job(id, submit=0.0, work=1e9, cores=1, memory=0.0, inp=0.0, out=0.0, target=None, **kw):
    return Job(id=id, submit_time_s=submit, work=work, cores=cores, memory_mb=memory,
               input_bytes=inp, output_bytes=out, target_site=target, **kw)


def six_job_fixture():
    """Two sites, six jobs, first-fit; timestamps traced by hand (see test_broker)."""
    platform = make_platform(
        make_site("A", cores=4, speed=1e9, bw=1e8),
        make_site("B", cores=2, speed=2e9, bw=1e8, overhead=10.0),
    )
    jobs = [
        make_job(1, 0.0, 4e11, 4),
        make_job(2, 10.0, 2e11, 2, inp=1e9),
        make_job(3, 20.0, 1e11, 1),
        make_job(4, 30.0, 1e11, 1),
        make_job(5, 40.0, 2e11, 4, out=5e8),
        make_job(6, 50.0, 1e11, 2),
    ]
    # id: (site, submitted, assigned, running, finished)
    expected = {
        1: ("A", 0.0, 0.0, 0.0, 100.0),
        2: ("B", 10.0, 10.0, 30.0, 80.0),
        3: ("B", 20.0, 20.0, 80.0, 130.0),
        4: ("B", 30.0, 30.0, 80.0, 130.0),
        5: ("A", 40.0, 100.0, 100.0, 155.0),
        6: ("A", 50.0, 100.0, 150.0, 200.0),
    }
    return platform, jobs, expected


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def config_files(tmp_path):
    """Infrastructure, network and execution files for a two-site grid."""
    infra = write_json(tmp_path / "infra.json", {
        "schema_version": 1,
        "sites": [
            {"name": "BNL", "host_count": 500, "cores_per_host": 8, "speed_per_core": 1e9,
             "memory_per_host_mb": 16000, "disk_capacity_gb": 1000},
            {"name": "CERN", "host_count": 100, "cores_per_host": 4, "speed_per_core": 2e9,
             "memory_per_host_mb": 8000, "disk_capacity_gb": 500},
        ],
    })
    net = write_json(tmp_path / "network.json", {
        "links": {"BNL": {"bandwidth_bps": 1e9, "latency_s": 0.01},
                  "CERN": {"bandwidth_bps": 5e8, "latency_s": 0.02}},
        "broker_latency_s": 0.005,
    })
    exe = write_json(tmp_path / "exec.json", {
        "policy": "first_fit", "seed": 42, "snapshot_mode": "on_transition",
        "output_dir": str(tmp_path / "out"),
    })
    return infra, net, exe


def speed_truth_fixture(n_sites, jobs_per_site=20, seed=5, platform_seed=3):
    """Zero-I/O trace with walltime truth synthesized at known speeds.

    Returns ``(true_platform, truth_jobs, misconfigured_platform)`` where the
    misconfigured platform has every speed halved.
    """
    from gridweave.platform import synthetic_platform
    from gridweave.workload import WorkloadGenSpec, generate_workload, round_robin_assignment, synthesize_truth

    plat = synthetic_platform(n_sites, seed=platform_seed)
    jobs = generate_workload(WorkloadGenSpec(n_sites=n_sites, jobs_per_site=jobs_per_site, seed=seed,
                                             io_range_bytes=(0, 0)))
    truth = synthesize_truth(jobs, plat, round_robin_assignment(jobs, plat.site_names))
    mis = plat.with_site_values("speed_per_core", {s.name: s.speed_per_core / 2 for s in plat.sites})
    return plat, truth, mis


def overhead_truth_fixture(overheads=(30.0, 120.0, 300.0), jobs_per_site=20, seed=4):
    """Zero-contention trace whose queue-time truth reflects known overheads.

    Arrivals are ~600 s apart and every job fits, so no job ever waits for cores.
    Returns ``(base_platform_with_zero_overhead, truth_jobs, true_overheads)``.
    """
    from gridweave.platform import synthetic_platform
    from gridweave.workload import WorkloadGenSpec, generate_workload, round_robin_assignment, synthesize_truth

    plat = synthetic_platform(len(overheads), seed=2)
    true = dict(zip(plat.site_names, overheads))
    jobs = generate_workload(WorkloadGenSpec(n_sites=len(overheads), jobs_per_site=jobs_per_site, seed=seed,
                                             io_range_bytes=(0, 0), interarrival_mean_s=600.0))
    truth = synthesize_truth(jobs, plat.with_site_values("scheduling_overhead_s", true),
                             round_robin_assignment(jobs, plat.site_names))
    return plat, truth, true


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
