"""Fit per-site platform parameters so simulated times match a truth trace."""
from __future__ import annotations

from .cmaes import CMAES, cma_es, cma_minimize
from .problem import (
    CalibrationProblem,
    CalibrationResult,
    Evaluator,
    Mode,
    Objective,
    Parameter,
    evaluate,
    site_errors,
)
from .search import calibrate_queue_time, grid_points, grid_search, random_search, run_optimizer

__all__ = [
    "CMAES",
    "CalibrationProblem",
    "CalibrationResult",
    "Evaluator",
    "Mode",
    "Objective",
    "Parameter",
    "calibrate_queue_time",
    "cma_es",
    "cma_minimize",
    "evaluate",
    "grid_points",
    "grid_search",
    "random_search",
    "run_optimizer",
    "site_errors",
]
