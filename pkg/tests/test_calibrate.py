import csv
import math

import numpy as np
import pytest

from conftest import make_job, make_platform, make_site, overhead_truth_fixture, speed_truth_fixture
from gridweave.calibrate import (
    CalibrationProblem,
    Mode,
    Objective,
    Parameter,
    calibrate_queue_time,
    cma_es,
    cma_minimize,
    evaluate,
    grid_points,
    grid_search,
    random_search,
    site_errors,
)
from gridweave.calibrate import problem as problem_mod
from gridweave.errors import DimensionTooSmall, InvalidBounds, InvalidBudget, MissingQueueTruth, UnknownSite
from gridweave.telemetry import GEOMEAN_KEY


@pytest.fixture(scope="module")
def three_sites():
    return speed_truth_fixture(3)


def test_true_speeds_give_zero_error(three_sites):
    plat, truth, _ = three_sites
    prob = CalibrationProblem(truth, plat)
    errs = site_errors(prob, prob.initial_params())
    assert errs == {n: 0.0 for n in plat.site_names}
    assert evaluate(prob, prob.initial_params()) == pytest.approx(1e-6)  # clamped geomean of zeros


def test_halved_speeds_give_unit_error(three_sites):
    plat, truth, mis = three_sites
    prob = CalibrationProblem(truth, mis)
    errs = site_errors(prob, prob.initial_params())
    for v in errs.values():
        assert v == pytest.approx(1.0, abs=1e-12)


def test_perturbing_one_site_changes_only_that_site(three_sites):
    plat, truth, _ = three_sites
    prob = CalibrationProblem(truth, plat)
    base = prob.initial_params()
    moved = dict(base, **{"SITE-001": base["SITE-001"] * 1.25})
    e0, e1 = site_errors(prob, base), site_errors(prob, moved)
    assert e1["SITE-000"] == e0["SITE-000"] and e1["SITE-002"] == e0["SITE-002"]
    assert e1["SITE-001"] == pytest.approx(0.2)  # |1/1.25 - 1|


def test_evaluate_rejects_out_of_bounds(three_sites):
    plat, truth, _ = three_sites
    prob = CalibrationProblem(truth, plat)
    p = prob.initial_params()
    p["SITE-000"] = prob.bounds["SITE-000"][1] * 2
    with pytest.raises(InvalidBounds):
        evaluate(prob, p)


def test_problem_validation(three_sites):
    plat, truth, _ = three_sites
    with pytest.raises(InvalidBounds):
        CalibrationProblem(truth, plat, bounds={"SITE-000": (2e9, 1e9)})
    with pytest.raises(InvalidBounds):
        CalibrationProblem(truth, plat, bounds={"SITE-000": (0.0, 1e9)})
    with pytest.raises(InvalidBounds):
        CalibrationProblem(truth, plat, parameter=Parameter.SCHEDULING_OVERHEAD, bounds={"SITE-000": (-1.0, 10.0)},
                           objective=Objective.REL_MAE_WALLTIME)
    with pytest.raises(UnknownSite):
        CalibrationProblem(truth, plat, bounds={"NOPE": (1e8, 1e10)})
    bare = [make_job(1, target="SITE-000", truth_walltime_s=1.0)]
    with pytest.raises(MissingQueueTruth):
        CalibrationProblem(bare, plat, parameter=Parameter.SCHEDULING_OVERHEAD)


def test_default_bounds_cover_sites_with_jobs():
    plat = make_platform(make_site("A"), make_site("B"))
    jobs = [make_job(1, work=4e9, target="A", truth_walltime_s=4.0)]
    prob = CalibrationProblem(jobs, plat)
    assert prob.sites == ["A"]
    assert prob.bounds["A"] == (2.5e8, 4e9)


def test_random_search_recovers_speed():
    # truth at 1e9, bounds [1e8, 1e10], 200 samples
    plat = make_platform(make_site("A", cores=8))
    jobs = [make_job(i, submit=10.0 * i, work=1e11 * i, cores=1 + i % 4, target="A") for i in range(1, 21)]
    from gridweave.workload import synthesize_truth
    truth = synthesize_truth(jobs, plat, {j.id: "A" for j in jobs})
    start = plat.with_site_values("speed_per_core", {"A": 3e9})
    prob = CalibrationProblem(truth, start, bounds={"A": (1e8, 1e10)})
    r = random_search(prob, 200, seed=1)
    assert abs(r.params["A"] / 1e9 - 1) < 0.02
    assert r.objective_after < r.objective_before


def test_random_search_single_sample_is_initial_point(three_sites):
    _, truth, mis = three_sites
    prob = CalibrationProblem(truth, mis)
    r = random_search(prob, 1, seed=0)
    assert r.params == prob.initial_params()
    assert r.objective_after == r.objective_before == evaluate(prob, prob.initial_params())
    assert r.evaluations_used == 1


def test_random_search_deterministic(three_sites):
    _, truth, mis = three_sites
    prob = CalibrationProblem(truth, mis)
    a, b = random_search(prob, 30, seed=4), random_search(prob, 30, seed=4)
    assert a == b
    assert random_search(prob, 30, seed=5).params != a.params


def test_random_search_iid_sampling_also_improves(three_sites):
    _, truth, mis = three_sites
    r = random_search(CalibrationProblem(truth, mis), 50, seed=2, sampling="iid")
    assert r.objective_after < r.objective_before


def test_random_search_invalid_budget(three_sites):
    _, truth, mis = three_sites
    with pytest.raises(InvalidBudget):
        random_search(CalibrationProblem(truth, mis), 0, seed=0)


def test_budget_accounting_counts_simulations(three_sites, monkeypatch):
    _, truth, mis = three_sites
    calls = []
    real = problem_mod.Simulation

    class Counting(real):
        def run(self):
            calls.append(1)
            return super().run()

    monkeypatch.setattr(problem_mod, "Simulation", Counting)
    prob = CalibrationProblem(truth, mis)
    r = random_search(prob, 25, seed=0)
    assert r.evaluations_used == len(calls) == 26  # 25 candidates + confirming run
    calls.clear()
    r = grid_search(prob, 6)
    assert r.evaluations_used == len(calls) == 8
    calls.clear()
    r = cma_es(CalibrationProblem(truth, mis, mode=Mode.JOINT), population=4, generations=3, seed=0)
    assert r.evaluations_used == len(calls) == 13


def test_grid_exact_recovery_on_grid_point():
    base = make_platform(make_site("A", cores=8), make_site("B", cores=8))
    jobs = [make_job(i, submit=5.0 * i, work=2e11, cores=2, target="AB"[i % 2]) for i in range(1, 11)]
    probe = CalibrationProblem([j.__class__(**{**j.__dict__, "truth_walltime_s": 1.0}) for j in jobs], base,
                               bounds={"A": (1e8, 1e10), "B": (1e8, 1e10)})
    truth_speed = {"A": grid_points(probe, "A", 7)[2], "B": grid_points(probe, "B", 7)[5]}
    from gridweave.workload import synthesize_truth
    truth = synthesize_truth(jobs, base.with_site_values("speed_per_core", truth_speed),
                             {j.id: j.target_site for j in jobs})
    prob = CalibrationProblem(truth, base, bounds={"A": (1e8, 1e10), "B": (1e8, 1e10)})
    r = grid_search(prob, 7)
    assert r.params == truth_speed
    assert r.per_site_error == {"A": 0.0, "B": 0.0}


def test_grid_two_points_pick_nearer_in_objective():
    plat = make_platform(make_site("A", cores=4, speed=3e9))  # start is worse than both grid points
    jobs = [make_job(1, work=4e11, target="A", truth_walltime_s=400.0)]  # truth speed 1e9
    prob = CalibrationProblem(jobs, plat, bounds={"A": (5e8, 1.5e9)})
    r = grid_search(prob, 2)
    # rel_mae at 5e8 is |800/400 - 1| = 1; at 1.5e9 it is |266.67/400 - 1| = 1/3
    assert r.params["A"] == 1.5e9
    assert r.per_site_error["A"] == pytest.approx(1 / 3)


def test_grid_ties_go_to_lower_value():
    plat = make_platform(make_site("A", cores=4))
    jobs = [make_job(1, target="A", truth_walltime_s=1.0, truth_queue_time_s=100.0)]
    prob = CalibrationProblem(jobs, plat, parameter=Parameter.SCHEDULING_OVERHEAD, bounds={"A": (50.0, 150.0)})
    # both grid points miss the 100 s truth by exactly 50%
    r = grid_search(prob, 2)
    assert r.per_site_error["A"] == 0.5
    assert r.params["A"] == 50.0


def test_grid_invalid_budget_and_mode(three_sites):
    _, truth, mis = three_sites
    with pytest.raises(InvalidBudget):
        grid_search(CalibrationProblem(truth, mis), 1)
    with pytest.raises(ValueError):
        grid_search(CalibrationProblem(truth, mis, mode=Mode.JOINT), 4)


def test_dense_grid_at_least_as_good_as_random(three_sites):
    _, truth, mis = three_sites
    prob = CalibrationProblem(truth, mis)
    g = grid_search(prob, 400)
    r = random_search(prob, 100, seed=3)
    assert g.objective_after <= r.objective_after


def test_cma_sphere_converges():
    x_star = np.array([0.2, 0.35, 0.5, 0.65, 0.8])
    f = lambda x: float(np.sum((x - x_star) ** 2))  # noqa: E731
    x, fx, evals = cma_minimize(f, np.full(5, 0.5), 0.3, 8, 150, seed=0, lower=np.zeros(5), upper=np.ones(5))
    assert np.linalg.norm(x - x_star) < 1e-6
    assert evals == 1 + 8 * 150


def test_cma_respects_bounds():
    seen = []

    def f(x):
        seen.append(x.copy())
        return float(np.sum((x - 2.0) ** 2))  # optimum outside the box

    x, _, _ = cma_minimize(f, np.full(3, 0.5), 0.5, 6, 30, seed=1, lower=np.zeros(3), upper=np.ones(3))
    assert all(np.all(s >= 0) and np.all(s <= 1) for s in seen)
    assert np.allclose(x, 1.0, atol=1e-2)


def test_cma_joint_calibration(three_sites):
    _, truth, mis = three_sites
    prob = CalibrationProblem(truth, mis, mode=Mode.JOINT)
    r = cma_es(prob, population=8, generations=40, seed=0)
    assert r.objective_before == pytest.approx(1.0)
    assert r.objective_after < 0.05
    assert r.history == sorted(r.history, reverse=True)
    again = cma_es(prob, population=8, generations=40, seed=0)
    assert again == r


def test_cma_preconditions(three_sites):
    plat, truth, mis = three_sites
    with pytest.raises(ValueError):
        cma_es(CalibrationProblem(truth, mis), population=8, generations=2)
    with pytest.raises(InvalidBudget):
        cma_es(CalibrationProblem(truth, mis, mode=Mode.JOINT), population=3, generations=2)
    one = [j for j in truth if j.target_site == "SITE-000"]
    with pytest.raises(DimensionTooSmall):
        cma_es(CalibrationProblem(one, mis, mode=Mode.JOINT), population=8, generations=2)


def test_parallel_matches_serial(three_sites):
    _, truth, mis = three_sites
    serial = random_search(CalibrationProblem(truth, mis), 12, seed=9)
    parallel = random_search(CalibrationProblem(truth, mis, workers=2), 12, seed=9)
    assert serial == parallel


def test_queue_time_recovery():
    plat, truth, true = overhead_truth_fixture(overheads=(120.0, 120.0))
    prob = CalibrationProblem(truth, plat, parameter=Parameter.SCHEDULING_OVERHEAD,
                              bounds={n: (0.0, 600.0) for n in plat.site_names})
    assert prob.objective is Objective.REL_MAE_QUEUE
    r = calibrate_queue_time(prob, "random", n_samples=100, seed=0)
    for name, v in r.params.items():
        assert abs(v - true[name]) < 5.0


def test_zero_contention_queue_is_overhead_plus_staging():
    plat, truth, true = overhead_truth_fixture()
    for j in truth:
        lat = plat.site(j.target_site).uplink_latency_s
        assert j.truth_queue_time_s == pytest.approx(true[j.target_site] + lat, abs=1e-9)


def test_queue_time_requires_truth():
    plat = make_platform(make_site("A"), make_site("B"))
    jobs = [make_job(1, target="A", truth_walltime_s=1.0)]
    with pytest.raises(MissingQueueTruth):
        CalibrationProblem(jobs, plat, parameter=Parameter.SCHEDULING_OVERHEAD)


def test_queue_time_rejects_speed_problem(three_sites):
    _, truth, mis = three_sites
    with pytest.raises(ValueError):
        calibrate_queue_time(CalibrationProblem(truth, mis), "random", n_samples=3)


def test_report_csv(three_sites, tmp_path):
    _, truth, mis = three_sites
    r = random_search(CalibrationProblem(truth, mis), 20, seed=0)
    path = tmp_path / "report.csv"
    r.write_report(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["site", "param_before", "param_after", "rel_mae_before", "rel_mae_after"]
    assert [row[0] for row in rows[1:]] == ["SITE-000", "SITE-001", "SITE-002", GEOMEAN_KEY]
    assert float(rows[-1][3]) == pytest.approx(1.0)
    assert math.isclose(float(rows[-1][4]), r.objective_after)
