import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import linear_problem, rosenbrock_problem
from jetpose.solver import (
    NumericFailure, ResidualBlock, ResidualProblem, SolverOptions, Termination, finite_diff_jacobian, solve_nlls,
)


@pytest.mark.parametrize("consistent", [True, False])
def test_linear_problem_one_accepted_iteration(consistent):
    prob, sol = linear_problem(0, consistent=consistent)
    mu = SolverOptions().initial_damping
    rep = solve_nlls(prob, np.zeros(4), SolverOptions(max_iters=1))
    assert rep.iterations == 1
    # the single damped Gauss-Newton step contracts the error by about mu
    assert np.linalg.norm(rep.p_opt - sol) <= 10 * mu * np.linalg.norm(sol)
    rep = solve_nlls(prob, np.zeros(4))
    # with a non-zero residual the accepted-cost test cannot resolve changes
    # below eps * cost, which bounds the attainable accuracy near 1e-8
    np.testing.assert_allclose(rep.p_opt, sol, rtol=0, atol=1e-8 if consistent else 1e-7)


def test_rosenbrock_minimum():
    rep = solve_nlls(rosenbrock_problem(), [-1.2, 1.0], SolverOptions(max_iters=200))
    np.testing.assert_allclose(rep.p_opt, [1.0, 1.0], atol=1e-6)
    assert rep.termination == Termination.CONVERGED


@given(st.integers(0, 1000), st.floats(0.01, 100.0))
def test_scale_invariance_on_linear_problem(seed, c):
    a, sol = linear_problem(seed, consistent=True)
    b, _ = linear_problem(seed, c, consistent=True)
    pa = solve_nlls(a, np.zeros(4)).p_opt
    pb = solve_nlls(b, np.zeros(4)).p_opt
    np.testing.assert_allclose(pa, pb, rtol=0, atol=1e-10)


def test_cost_trace_strictly_decreasing_and_deterministic():
    r1 = solve_nlls(rosenbrock_problem(), [-1.2, 1.0])
    r2 = solve_nlls(rosenbrock_problem(), [-1.2, 1.0])
    assert np.all(np.diff(r1.cost_trace) < 0)
    assert r1.final_cost <= r1.initial_cost
    np.testing.assert_array_equal(r1.p_opt, r2.p_opt)
    assert r1.cost_trace == r2.cost_trace


def test_rejected_steps_do_not_move_iterate():
    seen = []

    def fn(p):
        seen.append(p.copy())
        return np.array([1 - p[0], 10 * (p[1] - p[0] ** 2)])

    prob = ResidualProblem(2, [ResidualBlock(fn, lambda p: np.array([[-1.0, 0.0], [-20 * p[0], 10.0]]))])
    rep = solve_nlls(prob, [-1.2, 1.0], SolverOptions(max_iters=5, initial_damping=1e-8))
    # the returned point is the last point whose cost entered the trace
    visited = [p for p in seen]
    assert any(np.array_equal(p, rep.p_opt) for p in visited)
    r = np.array([1 - rep.p_opt[0], 10 * (rep.p_opt[1] - rep.p_opt[0] ** 2)])
    assert float(r @ r) == rep.final_cost == rep.cost_trace[-1]
    assert len(visited) > rep.iterations + 1  # some trial points were rejected


def test_non_finite_start_rejected():
    prob = ResidualProblem(1, [ResidualBlock(lambda p: np.array([np.nan]))])
    with pytest.raises(ValueError):
        solve_nlls(prob, [0.0])


def test_numeric_failure_reported():
    prob = ResidualProblem(1, [ResidualBlock(lambda p: np.array([p[0]]), lambda p: np.array([[np.nan]]))])
    rep = solve_nlls(prob, [1.0])
    assert rep.termination == Termination.NUMERIC_FAILURE
    assert issubclass(NumericFailure, ArithmeticError)


def test_finite_difference_examples():
    J = finite_diff_jacobian(lambda p: p**2, np.array([3.0]))
    assert J[0, 0] == pytest.approx(6.0, abs=1e-6)
    M = np.array([[1.0, 2.0], [3.0, -4.0], [0.5, 0.0]])
    np.testing.assert_allclose(finite_diff_jacobian(lambda p: M @ p, np.array([0.3, -0.7])), M, atol=1e-9)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_finite_difference_matches_analytic(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3))
    p = rng.normal(size=3)
    fn = lambda q: np.array([np.sin(a @ q), np.exp(0.3 * b @ q), (a @ q) * (b @ q)])
    Ja = np.array([np.cos(a @ p) * a, 0.3 * np.exp(0.3 * b @ p) * b, (b @ p) * a + (a @ p) * b])
    Jn = finite_diff_jacobian(fn, p)
    assert np.linalg.norm(Jn - Ja) <= 1e-5 * np.linalg.norm(Ja)


def test_multiple_blocks_stack():
    prob = ResidualProblem(2, [ResidualBlock(lambda p: p - 1.0, lambda p: np.eye(2)),
                               ResidualBlock(lambda p: 2 * (p + 1.0))])
    rep = solve_nlls(prob, [5.0, -3.0])
    np.testing.assert_allclose(rep.p_opt, [-0.6, -0.6], atol=1e-7)
