"""Command-line entry point: run, calibrate, gen-workload, report, scale-bench."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .broker import Simulation
from .calibrate import CalibrationProblem, Mode, Parameter, run_optimizer
from .errors import ConfigError, GridweaveError, InvalidBounds, IoError
from .platform import (
    dump_platform,
    load_execution_params,
    load_platform,
    synthetic_platform,
    write_platform,
)
from .policy import default_registry
from .telemetry import (
    export_log,
    export_snapshots,
    import_log,
    incomplete_jobs,
    job_times_from_log,
    utilization_series,
)
from .workload import (
    WorkloadGenSpec,
    generate_workload,
    parse_trace,
    round_robin_assignment,
    synthesize_truth,
    write_trace,
)

log = logging.getLogger("gridweave")

OUTPUT_ENV = "GRIDWEAVE_OUTPUT_DIR"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    # bad flags are configuration errors (exit 1), not argparse's default 2
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _int_list(text: str) -> list[int]:
    if not text.strip():
        return []
    return [_positive_int(t) for t in text.split(",")]


# -- shared plumbing ---------------------------------------------------------------

def _output_dir(flag: str | None, fallback: str = "output") -> Path:
    return Path(flag or os.environ.get(OUTPUT_ENV) or fallback)


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return path


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _inputs(**paths) -> dict:
    return {k: {"path": str(v), "sha256": _sha256(v)} for k, v in paths.items() if v is not None}


def write_manifest(out_dir: Path, doc: dict) -> Path:
    """Write ``manifest.json`` atomically; every listed output must exist."""
    missing = [p for p in doc.get("outputs", []) if not (out_dir / p).is_file()]
    if missing:
        raise IoError(f"manifest lists missing outputs: {missing}")
    final = out_dir / "manifest.json"
    tmp = out_dir / ".manifest.json.tmp"
    try:
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, final)
    except OSError as exc:
        raise IoError(f"cannot write {final}: {exc}") from exc
    return final


# -- run ---------------------------------------------------------------------------------

def cmd_run(args) -> int:
    started = time.perf_counter()
    warnings: list[str] = []
    registry = default_registry()
    platform = load_platform(args.infra, args.network, warnings)
    params = load_execution_params(args.exec, registry)
    jobs = parse_trace(args.trace)
    out_dir = _mkdir(_output_dir(args.output_dir, params.output_dir))

    policy = registry.create(params.policy_name, seed=params.seed, platform=platform)
    sim = Simulation(
        platform, jobs, policy,
        snapshot_mode=params.snapshot_mode,
        snapshot_interval_s=params.snapshot_interval_s,
        stop_time_s=params.stop_time_s,
        walltime_includes_staging=params.walltime_includes_staging,
        check_invariants=args.check_invariants,
    )
    result = sim.run()

    outputs = []
    events_name = f"events.{args.format}"
    export_log(result.log.records, args.format, out_dir / events_name)
    outputs.append(events_name)
    result.summary(platform).write_csv(out_dir / "summary.csv")
    outputs.append("summary.csv")
    if params.snapshot_mode == "periodic":
        export_snapshots(result.log.snapshots, out_dir / "snapshots.csv")
        outputs.append("snapshots.csv")

    write_manifest(out_dir, {
        "command": "run",
        "version": __version__,
        "inputs": _inputs(infrastructure=args.infra, network=args.network, execution=args.exec, trace=args.trace),
        "seed": params.seed,
        "policy": params.policy_name,
        "runtime_s": time.perf_counter() - started,
        "outputs": outputs,
        "truncated": result.truncated,
        "final_time_s": result.final_time_s,
        "events_processed": result.events_processed,
        "jobs": len(jobs),
        "notes": list(params.notes) + warnings,
    })
    log.info("run finished at t=%.3f s (%d jobs%s); outputs in %s", result.final_time_s, len(jobs),
             ", truncated" if result.truncated else "", out_dir)
    return 0


# -- calibrate ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    started = time.perf_counter()
    platform = load_platform(args.infra, args.network)
    jobs = parse_trace(args.trace)
    parameter = Parameter.SPEED_PER_CORE if args.parameter == "speed" else Parameter.SCHEDULING_OVERHEAD
    mode = Mode(args.mode) if args.mode else (Mode.JOINT if args.optimizer == "cma" else Mode.PER_SITE)

    bounds = None
    if (args.low is None) != (args.high is None):
        raise InvalidBounds("--low and --high must be given together")
    if args.low is not None:
        if args.low > args.high:
            raise InvalidBounds(f"--low {args.low} > --high {args.high}")
        sites = sorted({j.target_site for j in jobs if j.target_site is not None})
        bounds = {s: (args.low, args.high) for s in sites}
    problem = CalibrationProblem(jobs, platform, parameter=parameter, bounds=bounds, mode=mode,
                                 workers=args.workers)

    if args.optimizer == "random":
        kw = {"n_samples": args.samples, "seed": args.seed}
    elif args.optimizer == "grid":
        kw = {"points_per_site": args.points}
    else:
        kw = {"population": args.population, "generations": args.generations, "seed": args.seed,
              "sigma0": args.sigma0}
    result = run_optimizer(problem, args.optimizer, **kw)

    out_dir = _mkdir(_output_dir(args.output_dir))
    outputs = ["calibration_report.csv"]
    result.write_report(out_dir / "calibration_report.csv")
    if args.emit_infra:
        patched = platform.with_site_values(parameter.value, result.params)
        infra_doc, _ = dump_platform(patched)
        with open(out_dir / "infrastructure.calibrated.json", "w") as fh:
            json.dump(infra_doc, fh, indent=2)
            fh.write("\n")
        outputs.append("infrastructure.calibrated.json")

    write_manifest(out_dir, {
        "command": "calibrate",
        "version": __version__,
        "inputs": _inputs(infrastructure=args.infra, network=args.network, trace=args.trace),
        "optimizer": args.optimizer,
        "parameter": parameter.value,
        "objective": problem.objective.value,
        "mode": mode.value,
        "settings": result.settings,
        "seed": args.seed,
        "bounds": {k: list(v) for k, v in problem.bounds.items()},
        "evaluations_used": result.evaluations_used,
        "objective_before": result.objective_before,
        "objective_after": result.objective_after,
        "runtime_s": time.perf_counter() - started,
        "outputs": outputs,
    })
    print(f"objective_before={result.objective_before:.6g} objective_after={result.objective_after:.6g} "
          f"evaluations={result.evaluations_used}")
    return 0


# -- gen-workload -------------------------------------------------------------------------

def cmd_gen_workload(args) -> int:
    spec = WorkloadGenSpec(
        n_sites=args.sites,
        jobs_per_site=args.jobs_per_site,
        seed=args.seed,
        work_range=(args.work_min, args.work_max),
        interarrival_mean_s=args.interarrival,
        io_range_bytes=(args.io_min, args.io_max),
    )
    try:
        spec.validate()
    except GridweaveError as exc:
        raise UsageError(str(exc)) from exc
    jobs = generate_workload(spec)
    out = Path(args.out) if args.out else _output_dir(None) / "trace.csv"

    if args.emit_platform or args.with_truth:
        platform = synthetic_platform(args.sites, seed=args.seed)
        assignment = round_robin_assignment(jobs, platform.site_names)
        if args.with_truth:
            jobs = synthesize_truth(jobs, platform, assignment)
        else:
            jobs = [j.__class__(**{**j.__dict__, "target_site": assignment[j.id]}) for j in jobs]
        if args.emit_platform:
            d = _mkdir(Path(args.emit_platform))
            write_platform(platform, d / "infrastructure.json", d / "network.json")
    try:
        write_trace(jobs, out)
    except OSError as exc:
        raise IoError(f"cannot write {out}: {exc}") from exc
    log.info("wrote %d jobs to %s", len(jobs), out)
    return 0


# -- report -------------------------------------------------------------------------------

def render_svg(series: dict[str, list[tuple[float, float]]], path, width: int = 800, height: int = 300) -> None:
    """Self-contained line chart of utilization over time, one polyline per site."""
    pad = 40
    t_max = max((pts[-1][0] for pts in series.values() if pts), default=1.0) or 1.0
    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{pad - 8}" font-size="12">utilization</text>',
        f'<text x="{width - pad}" y="{height - 10}" font-size="12" text-anchor="end">t = {t_max:.0f} s</text>',
    ]
    sx = (width - 2 * pad) / t_max
    sy = height - 2 * pad
    for i, (site, pts) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{pad + t * sx:.2f},{height - pad - u * sy:.2f}" for t, u in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" points="{coords}"><title>{site}</title></polyline>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="10" fill="{color}">{site}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def cmd_report(args) -> int:
    platform = load_platform(args.infra, args.network)
    records = import_log(args.log)
    sites = [args.site] if args.site else platform.site_names
    out_dir = _mkdir(_output_dir(args.output_dir))
    end = max((r.sim_time_s for r in records), default=0.0)

    series = {}
    outputs = []
    for name in sites:
        total = platform.site(name).total_cores if name in platform.site_names else 0
        pts = utilization_series(records, name, args.bucket, total, end_time_s=end, known_sites=platform.site_names)
        series[name] = pts
        fname = f"utilization_{name}.csv"
        with open(out_dir / fname, "w") as fh:
            fh.write("t_s,utilization\n")
            for t, u in pts:
                fh.write(f"{t!r},{u!r}\n")
        outputs.append(fname)

    jobs = job_times_from_log(records)
    states: dict[str, int] = {}
    for d in jobs.values():
        states[d["state"].value] = states.get(d["state"].value, 0) + 1
    incomplete = incomplete_jobs(records)
    summary = {
        "records": len(records),
        "jobs": len(jobs),
        "final_states": dict(sorted(states.items())),
        "incomplete_jobs": len(incomplete),
        "end_time_s": end,
        "bucket_s": args.bucket,
        "mean_utilization": {
            s: (sum(u * (min(t + args.bucket, end) - t) for t, u in pts) / end if end > 0 else 0.0)
            for s, pts in series.items()
        },
    }
    with open(out_dir / "report_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append("report_summary.json")
    if args.svg:
        render_svg(series, out_dir / "utilization.svg")
        outputs.append("utilization.svg")
    if incomplete:
        log.warning("log contains %d incomplete jobs (truncated run?)", len(incomplete))
    print(f"{len(sites)} site(s) reported; incomplete jobs: {len(incomplete)}")
    return 0


# -- scale-bench --------------------------------------------------------------------------

BENCH_INTERARRIVAL_S = 10.0
BENCH_CORE_RANGE = (1000, 2000)


def bench_case(n_sites: int, n_jobs: int, seed: int, policy: str = "least_loaded"):
    """Build one benchmark instance; arrival rate grows with the site count so per-site load is fixed."""
    platform = synthetic_platform(n_sites, seed=seed, core_range=BENCH_CORE_RANGE)
    spec = WorkloadGenSpec(n_sites=n_sites, jobs_per_site=math.ceil(n_jobs / n_sites), seed=seed,
                           interarrival_mean_s=BENCH_INTERARRIVAL_S / n_sites)
    jobs = generate_workload(spec)[:n_jobs]
    return platform, jobs, policy


def time_case(n_sites: int, n_jobs: int, seed: int, repeats: int) -> list[float]:
    platform, jobs, policy = bench_case(n_sites, n_jobs, seed)
    registry = default_registry()
    times = []
    for _ in range(repeats):
        pol = registry.create(policy, seed=seed, platform=platform)
        t0 = time.perf_counter()
        Simulation(platform, jobs, pol).run()
        times.append(time.perf_counter() - t0)
    return times


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


def _write_timing(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("sites,jobs,runtime_s_min,runtime_s_median,runtime_s_max\n")
        for sites, jobs, ts in rows:
            fh.write(f"{sites},{jobs},{min(ts)!r},{statistics.median(ts)!r},{max(ts)!r}\n")


def cmd_scale_bench(args) -> int:
    out_dir = _mkdir(_output_dir(args.output_dir))
    site_rows = []
    for n in range(1, args.max_sites + 1):
        ts = time_case(n, n * args.jobs_per_site, args.seed, args.repeats)
        site_rows.append((n, n * args.jobs_per_site, ts))
        log.info("sites=%d jobs=%d median=%.4f s", n, n * args.jobs_per_site, statistics.median(ts))
    _write_timing(out_dir / "scale_sites.csv", site_rows)

    job_rows = []
    for n_jobs in args.job_counts:
        ts = time_case(1, n_jobs, args.seed, args.repeats)
        job_rows.append((1, n_jobs, ts))
        log.info("sites=1 jobs=%d median=%.4f s", n_jobs, statistics.median(ts))
    outputs = ["scale_sites.csv"]
    if job_rows:
        _write_timing(out_dir / "scale_jobs.csv", job_rows)
        outputs.append("scale_jobs.csv")

    summary = {"repeats": args.repeats, "seed": args.seed, "jobs_per_site": args.jobs_per_site,
               "site_slope": None, "job_slope": None}
    if len(site_rows) >= 2:
        summary["site_slope"] = loglog_slope([r[0] for r in site_rows],
                                             [statistics.median(r[2]) for r in site_rows])
    if len(job_rows) >= 2:
        summary["job_slope"] = loglog_slope([r[1] for r in job_rows],
                                            [statistics.median(r[2]) for r in job_rows])
    with open(out_dir / "scale_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append("scale_summary.json")
    write_manifest(out_dir, {"command": "scale-bench", "version": __version__, "seed": args.seed,
                             "outputs": outputs, **{k: v for k, v in summary.items() if k.endswith("slope")}})
    print(f"site slope: {summary['site_slope']}  job slope: {summary['job_slope']}")
    return 0


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridweave", description="Discrete-event simulator for distributed computing grids.")
    p.add_argument("--version", action="version", version=f"gridweave {__version__}")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate a trace on a platform")
    r.add_argument("--infra", required=True, help="infrastructure JSON file")
    r.add_argument("--network", required=True, help="network JSON file")
    r.add_argument("--exec", required=True, help="execution parameters JSON file")
    r.add_argument("--trace", required=True, help="job trace CSV")
    r.add_argument("--output-dir", help=f"overrides the execution file and ${OUTPUT_ENV}")
    r.add_argument("--format", choices=("csv", "jsonl"), default="csv", help="event-log format")
    r.add_argument("--check-invariants", action="store_true", help="assert conservation laws after every event")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="fit per-site parameters to trace truth")
    c.add_argument("--infra", required=True)
    c.add_argument("--network", required=True)
    c.add_argument("--trace", required=True, help="trace with target_site and truth columns")
    c.add_argument("--optimizer", choices=("random", "grid", "cma"), default="random")
    c.add_argument("--mode", choices=[m.value for m in Mode], help="default: joint for cma, per_site otherwise")
    c.add_argument("--parameter", choices=("speed", "overhead"), default="speed")
    c.add_argument("--samples", type=_positive_int, default=200, help="random search candidates per site")
    c.add_argument("--points", type=_positive_int, default=50, help="grid points per site")
    c.add_argument("--population", type=_positive_int, default=8)
    c.add_argument("--generations", type=_positive_int, default=50)
    c.add_argument("--sigma0", type=_positive_float, default=0.3, help="initial CMA-ES step in unit coordinates")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--low", type=float, help="lower bound for every site")
    c.add_argument("--high", type=float, help="upper bound for every site")
    c.add_argument("--workers", type=_positive_int, default=1, help="parallel evaluation processes")
    c.add_argument("--emit-infra", action="store_true", help="write a patched infrastructure file")
    c.add_argument("--output-dir")
    c.set_defaults(func=cmd_calibrate)

    g = sub.add_parser("gen-workload", help="write a seeded synthetic trace")
    g.add_argument("--sites", type=_positive_int, required=True)
    g.add_argument("--jobs-per-site", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--work-min", type=float, default=1e11)
    g.add_argument("--work-max", type=float, default=1e13)
    g.add_argument("--interarrival", type=_positive_float, default=10.0, help="mean seconds between arrivals")
    g.add_argument("--io-min", type=float, default=1e6)
    g.add_argument("--io-max", type=float, default=1e9)
    g.add_argument("--out", help="trace path (default <output_dir>/trace.csv)")
    g.add_argument("--emit-platform", metavar="DIR",
                   help="also write a matching synthetic platform and assign jobs round-robin")
    g.add_argument("--with-truth", action="store_true",
                   help="assign round-robin and fill truth columns by simulating the synthetic platform")
    g.set_defaults(func=cmd_gen_workload)

    rep = sub.add_parser("report", help="utilization CSVs and a summary from an event log")
    rep.add_argument("--log", required=True, help="event log (csv or jsonl)")
    rep.add_argument("--infra", required=True)
    rep.add_argument("--network", required=True)
    rep.add_argument("--site", help="report a single site")
    rep.add_argument("--bucket", type=_positive_float, default=60.0, help="bucket width in seconds")
    rep.add_argument("--svg", action="store_true", help="also render utilization.svg")
    rep.add_argument("--output-dir")
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("scale-bench", help="runtime vs sites and vs jobs")
    s.add_argument("--max-sites", type=_positive_int, default=20)
    s.add_argument("--jobs-per-site", type=_positive_int, default=200)
    s.add_argument("--job-counts", type=_int_list, default=[1000, 2000, 4000, 8000],
                   help="comma-separated job counts for the one-site sweep ('' to skip)")
    s.add_argument("--repeats", type=_positive_int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_scale_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except GridweaveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GridweaveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IoError.exit_code


if __name__ == "__main__":
    sys.exit(main())
