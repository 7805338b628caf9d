"""Sampling-based calibrators: random search and grid search."""
from __future__ import annotations

import logging
import numpy as np

from ..errors import InvalidBudget, MissingQueueTruth
from .problem import (
    CalibrationProblem,
    CalibrationResult,
    Evaluator,
    Mode,
    Objective,
    Parameter,
    aggregate,
    stratified_unit_samples,
)

log = logging.getLogger(__name__)


def _finish_per_site(problem, ev: Evaluator, candidates, errs, tie_key, name, settings):
    """Per-site argmin over evaluated candidate vectors, then one confirming run."""
    init = candidates[0]
    before_errs = errs[0]
    chosen = {}
    for site in problem.sites:
        best_k = None
        for k, e in enumerate(errs):
            if site not in e:
                continue
            if best_k is None or tie_key(e[site], candidates[k][site]) < tie_key(errs[best_k][site], candidates[best_k][site]):
                best_k = k
        chosen[site] = candidates[best_k][site] if best_k is not None else init[site]

    before = aggregate(before_errs)
    if chosen == init:
        after_errs = before_errs
    else:
        after_errs = ev.errors(chosen)
        # queue objectives only decompose without cross-site contention
        if aggregate(after_errs) > before:
            log.warning("%s: composed per-site optimum is worse than the start; keeping start", name)
            chosen, after_errs = dict(init), before_errs
    return CalibrationResult(
        params=chosen,
        objective_before=before,
        objective_after=aggregate(after_errs),
        evaluations_used=ev.evaluations,
        per_site_error=after_errs,
        per_site_error_before=before_errs,
        params_before=dict(init),
        optimizer=name,
        settings=settings,
    )


def _finish_joint(problem, ev, candidates, errs, name, settings):
    scores = [aggregate(e) for e in errs]
    best = min(range(len(candidates)), key=lambda k: (scores[k], k))
    return CalibrationResult(
        params=dict(candidates[best]),
        objective_before=scores[0],
        objective_after=scores[best],
        evaluations_used=ev.evaluations,
        per_site_error=errs[best],
        per_site_error_before=errs[0],
        params_before=dict(candidates[0]),
        optimizer=name,
        settings=settings,
        history=scores,
    )


def random_search(problem: CalibrationProblem, n_samples: int, seed: int = 0,
                  sampling: str = "stratified") -> CalibrationResult:
    """Random-search calibration; the starting parameters are candidate 0.

    ``n_samples`` counts candidate vectors including the start. Draws are
    uniform in unit coordinates (log-uniform for speeds). ``sampling`` is
    ``"stratified"`` (one draw per stratum, per site) or ``"iid"``.
    """
    if n_samples < 1:
        raise InvalidBudget("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    init = problem.initial_params()
    m = n_samples - 1
    draws = {}
    for site in problem.sites:
        u = stratified_unit_samples(rng, m) if sampling == "stratified" else rng.random(m)
        draws[site] = [problem.from_unit(site, x) for x in u]
    candidates = [init] + [{s: draws[s][k] for s in problem.sites} for k in range(m)]
    ev = Evaluator(problem)
    errs = ev.batch(candidates)
    settings = {"n_samples": n_samples, "seed": seed, "sampling": sampling, "mode": problem.mode.value}
    if problem.mode is Mode.PER_SITE:
        # earliest candidate wins ties
        return _finish_per_site(problem, ev, candidates, errs, lambda err, value: err,
                                "random", settings)
    return _finish_joint(problem, ev, candidates, errs, "random", settings)


def grid_points(problem: CalibrationProblem, site: str, points: int) -> list[float]:
    return [problem.from_unit(site, u) for u in np.linspace(0.0, 1.0, points)]


def grid_search(problem: CalibrationProblem, points_per_site: int) -> CalibrationResult:
    """Evaluate a per-site grid (log-spaced for speeds); ties go to the lower value."""
    if points_per_site < 2:
        raise InvalidBudget("points_per_site must be >= 2")
    if problem.mode is not Mode.PER_SITE:
        raise ValueError("grid search runs in per-site mode only")
    init = problem.initial_params()
    grids = {s: grid_points(problem, s, points_per_site) for s in problem.sites}
    candidates = [init] + [{s: grids[s][k] for s in problem.sites} for k in range(points_per_site)]
    ev = Evaluator(problem)
    errs = ev.batch(candidates)
    settings = {"points_per_site": points_per_site}
    return _finish_per_site(problem, ev, candidates, errs, lambda err, value: (err, value),
                            "grid", settings)


def calibrate_queue_time(problem: CalibrationProblem, optimizer: str = "random", **kwargs) -> CalibrationResult:
    """Fit per-site scheduling overheads against truth queue times.

    Run after the walltime pass: ``problem.base_platform`` should already
    carry calibrated speeds.
    """
    if problem.parameter is not Parameter.SCHEDULING_OVERHEAD:
        raise ValueError("queue-time calibration tunes scheduling_overhead_s")
    if problem.objective is not Objective.REL_MAE_QUEUE:
        raise ValueError("queue-time calibration needs the queue objective")
    if any(j.truth_queue_time_s is None for j in problem.trace):
        raise MissingQueueTruth("trace lacks truth_queue_time_s")
    return run_optimizer(problem, optimizer, **kwargs)


def run_optimizer(problem: CalibrationProblem, optimizer: str, **kwargs) -> CalibrationResult:
    if optimizer == "random":
        return random_search(problem, **kwargs)
    if optimizer == "grid":
        return grid_search(problem, **kwargs)
    if optimizer == "cma":
        from .cmaes import cma_es
        return cma_es(problem, **kwargs)
    raise ValueError(f"unknown optimizer {optimizer!r}")
