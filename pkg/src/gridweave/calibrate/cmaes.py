"""Covariance-matrix-adaptation evolution strategy for joint calibration.

The optimizer core (:class:`CMAES`) is problem-agnostic; :func:`cma_es`
wires it to a :class:`CalibrationProblem` in unit-normalized coordinates.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionTooSmall, InvalidBudget
from .problem import CalibrationProblem, CalibrationResult, Evaluator, Mode, aggregate

MAX_RESAMPLES = 100


class CMAES:
    """(mu/mu_w, lambda)-CMA-ES with cumulative step-size adaptation.

    Uses rank-one and rank-mu covariance updates with the usual default
    learning rates. Box constraints are handled by resampling infeasible
    candidates, falling back to clipping after ``MAX_RESAMPLES`` tries.
    """

    def __init__(self, x0, sigma0: float, popsize: int | None = None, seed: int = 0,
                 lower=None, upper=None) -> None:
        self.mean = np.asarray(x0, dtype=float).copy()
        n = self.n = self.mean.size
        self.sigma = float(sigma0)
        self.lam = popsize or 4 + int(3 * math.log(n))
        self.mu = self.lam // 2
        w = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / float(np.sum(self.weights ** 2))
        self.lower = None if lower is None else np.asarray(lower, dtype=float)
        self.upper = None if upper is None else np.asarray(upper, dtype=float)

        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.C = np.eye(n)
        self.generation = 0
        self.rng = np.random.default_rng(seed)
        self.best_x = self.mean.copy()
        self.best_f = math.inf

    def _feasible(self, x) -> bool:
        if self.lower is not None and np.any(x < self.lower):
            return False
        if self.upper is not None and np.any(x > self.upper):
            return False
        return True

    def ask(self) -> np.ndarray:
        out = np.empty((self.lam, self.n))
        for i in range(self.lam):
            for _ in range(MAX_RESAMPLES):
                x = self.mean + self.sigma * (self.B @ (self.D * self.rng.standard_normal(self.n)))
                if self._feasible(x):
                    break
            else:
                x = np.clip(x, self.lower, self.upper)
            out[i] = x
        return out

    def tell(self, xs: np.ndarray, fs: Sequence[float]) -> None:
        n = self.n
        fs = np.asarray(fs, dtype=float)
        order = np.argsort(fs, kind="stable")
        if fs[order[0]] < self.best_f:
            self.best_f = float(fs[order[0]])
            self.best_x = xs[order[0]].copy()
        old = self.mean
        ys = (xs[order[: self.mu]] - old) / self.sigma
        yw = self.weights @ ys
        self.mean = old + self.sigma * yw

        c_inv_sqrt = self.B @ np.diag(1 / self.D) @ self.B.T
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * (c_inv_sqrt @ yw)
        self.generation += 1
        ps_norm = float(np.linalg.norm(self.ps))
        hsig = ps_norm / math.sqrt(1 - (1 - self.cs) ** (2 * self.generation)) / self.chi_n < 1.4 + 2 / (n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * yw

        rank_mu = (ys.T * self.weights) @ ys
        self.C = ((1 - self.c1 - self.cmu) * self.C
                  + self.c1 * (np.outer(self.pc, self.pc) + (1 - hsig) * self.cc * (2 - self.cc) * self.C)
                  + self.cmu * rank_mu)
        self.sigma *= math.exp((self.cs / self.damps) * (ps_norm / self.chi_n - 1))

        self.C = (self.C + self.C.T) / 2
        evals, self.B = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(evals, 1e-300))


def cma_minimize(f: Callable[[np.ndarray], float], x0, sigma0: float, popsize: int,
                 generations: int, seed: int = 0, lower=None, upper=None):
    """Minimize ``f``; returns ``(best_x, best_f, evaluations)``."""
    es = CMAES(x0, sigma0, popsize, seed, lower, upper)
    x0 = np.asarray(x0, dtype=float)
    es.best_x, es.best_f = x0.copy(), float(f(x0))
    evals = 1
    for _ in range(generations):
        xs = es.ask()
        es.tell(xs, [f(x) for x in xs])
        evals += len(xs)
    return es.best_x, es.best_f, evals


def cma_es(problem: CalibrationProblem, population: int = 8, generations: int = 50,
           seed: int = 0, sigma0: float = 0.3) -> CalibrationResult:
    """Joint calibration of all site parameters.

    Search happens in unit coordinates (log-scaled for speeds) so that every
    dimension has comparable scale. The start point is evaluated first and
    the best vector ever seen is returned.
    """
    if problem.mode is not Mode.JOINT:
        raise ValueError("CMA-ES calibrates in joint mode")
    sites = problem.sites
    if len(sites) < 2:
        raise DimensionTooSmall("CMA-ES needs at least two parameters")
    if population < 4:
        raise InvalidBudget("population must be >= 4")
    if generations < 1:
        raise InvalidBudget("generations must be >= 1")

    init = problem.initial_params()
    x0 = np.clip([problem.to_unit(s, init[s]) for s in sites], 0.0, 1.0)
    ev = Evaluator(problem)

    def decode(x):
        return {s: problem.from_unit(s, float(u)) for s, u in zip(sites, x)}

    before_errs = ev.errors(init)
    best_params, best_errs, best_f = dict(init), before_errs, aggregate(before_errs)
    history = [best_f]
    es = CMAES(x0, sigma0, population, seed, np.zeros(len(sites)), np.ones(len(sites)))
    for _ in range(generations):
        xs = es.ask()
        cands = [decode(x) for x in xs]
        errs = ev.batch(cands)
        fs = [aggregate(e) for e in errs]
        es.tell(xs, fs)
        k = int(np.argmin(fs))
        if fs[k] < best_f:
            best_params, best_errs, best_f = cands[k], errs[k], fs[k]
        history.append(best_f)

    return CalibrationResult(
        params=best_params,
        objective_before=history[0],
        objective_after=best_f,
        evaluations_used=ev.evaluations,
        per_site_error=best_errs,
        per_site_error_before=before_errs,
        params_before=dict(init),
        optimizer="cma",
        settings={"population": population, "generations": generations, "seed": seed, "sigma0": sigma0},
        history=history,
    )
