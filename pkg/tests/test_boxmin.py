"""Derivative-free box minimizer: accuracy, constraints, determinism."""

import numpy as np
import pytest

from pairlmm.boxmin import BoxminError, BoxProblem, minimize


def rosenbrock(x):
    return float((1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2)


def test_quadratic_bowl():
    p = BoxProblem(lambda x: float(np.sum((x - 0.3) ** 2)),
                   np.zeros(2), np.ones(2), np.array([0.9, 0.1]))
    r = minimize(p)
    assert r.converged
    assert np.max(np.abs(r.x - 0.3)) < 1e-6


def test_active_bound_is_exact():
    p = BoxProblem(lambda x: float(np.sum(x ** 2)),
                   np.full(3, 0.5), np.ones(3), np.full(3, 0.8))
    r = minimize(p)
    assert np.array_equal(r.x, np.full(3, 0.5))


def test_rosenbrock_within_budget():
    # published minimum (1, 1); a coarse grid over the box confirms no
    # competing basin before trusting the optimizer's answer
    grid = np.linspace(-2, 2, 41)
    vals = np.array([[rosenbrock(np.array([a, b])) for b in grid]
                     for a in grid])
    ia, ib = np.unravel_index(np.argmin(vals), vals.shape)
    assert abs(grid[ia] - 1) <= 0.1 and abs(grid[ib] - 1) <= 0.1

    p = BoxProblem(rosenbrock, np.full(2, -2.0), np.full(2, 2.0),
                   np.array([-1.2, 1.0]), rho_end=1e-8)
    r = minimize(p)
    assert r.converged
    assert r.evaluations <= 2000
    assert np.max(np.abs(r.x - 1.0)) < 1e-4


def test_every_evaluation_is_feasible_and_best_is_monotone():
    seen = []

    def f(x):
        seen.append(x.copy())
        return rosenbrock(x)

    p = BoxProblem(f, np.full(2, -2.0), np.full(2, 2.0),
                   np.array([-1.2, 1.0]))
    r = minimize(p)
    arr = np.asarray(seen)
    assert np.all(arr >= -2.0) and np.all(arr <= 2.0)
    vals = [rosenbrock(x) for x in seen]
    best = np.minimum.accumulate(vals)
    assert r.value == best[-1]
    assert np.all(np.diff(best) <= 0)


def test_deterministic_iterate_sequence():
    runs = []
    for _ in range(2):
        seen = []

        def f(x):
            seen.append(x.copy())
            return rosenbrock(x)

        minimize(BoxProblem(f, np.full(2, -2.0), np.full(2, 2.0),
                            np.array([-1.2, 1.0])))
        runs.append(np.asarray(seen))
    assert runs[0].shape == runs[1].shape
    assert np.array_equal(runs[0], runs[1])


def test_value_never_exceeds_start():
    p = BoxProblem(rosenbrock, np.full(2, -2.0), np.full(2, 2.0),
                   np.array([-1.2, 1.0]))
    r = minimize(p)
    assert r.value <= rosenbrock(np.array([-1.2, 1.0]))


def test_nonfinite_region_is_avoided():
    def f(x):
        if x[0] > 0.8:
            return float("nan")
        return float((x[0] - 0.5) ** 2 + x[1] ** 2)

    p = BoxProblem(f, np.zeros(2), np.ones(2), np.array([0.2, 0.5]))
    r = minimize(p)
    assert r.converged
    assert np.max(np.abs(r.x - [0.5, 0.0])) < 1e-6


def test_persistent_nonfinite_fails_with_trace():
    p = BoxProblem(lambda x: float("nan"), np.zeros(2), np.ones(2),
                   np.full(2, 0.5))
    with pytest.raises(BoxminError, match="non-finite"):
        minimize(p)


def test_problem_invariants():
    with pytest.raises(ValueError, match="inside the box"):
        BoxProblem(lambda x: 0.0, np.zeros(2), np.ones(2),
                   np.array([2.0, 0.5]))
    with pytest.raises(ValueError, match="rho_end"):
        BoxProblem(lambda x: 0.0, np.zeros(2), np.ones(2),
                   np.full(2, 0.5), rho_begin=1e-7)
    with pytest.raises(ValueError, match="2d\\+1"):
        BoxProblem(lambda x: 0.0, np.zeros(2), np.ones(2),
                   np.full(2, 0.5), max_evals=3)


def test_budget_exhaustion_reports_not_converged():
    p = BoxProblem(rosenbrock, np.full(2, -2.0), np.full(2, 2.0),
                   np.array([-1.2, 1.0]), max_evals=6)
    r = minimize(p)
    assert not r.converged
    assert r.evaluations <= 6
