import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from roboadvisor.linalg import random_psd
from roboadvisor.qp import (INFEASIBLE, OPTIMAL, QpBuildError, QuadraticProgram, solve_qp)


def scipy_oracle(qp):
    """Independent reference solution via SLSQP."""
    cons = []
    if qp.A_eq.shape[0]:
        cons.append({"type": "eq", "fun": lambda x: qp.A_eq @ x - qp.b_eq, "jac": lambda x: qp.A_eq})
    if qp.G_in.shape[0]:
        cons.append({"type": "ineq", "fun": lambda x: qp.h_in - qp.G_in @ x, "jac": lambda x: -qp.G_in})
    x0 = np.full(qp.n, 1.0 / qp.n)
    res = minimize(qp.objective, x0, jac=lambda x: qp.Q @ x + qp.c, constraints=cons,
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 1000})
    return res.x


def simplex_qp(Q, c):
    n = c.shape[0]
    return QuadraticProgram(Q, c, np.ones((1, n)), np.ones(1), -np.eye(n), np.zeros(n))


def test_equality_forces_solution():
    sol = solve_qp(QuadraticProgram(np.array([[2.0]]), np.zeros(1), np.ones((1, 1)), np.ones(1)))
    assert sol.status == OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.objective == pytest.approx(1.0, abs=1e-8)


def test_two_asset_kkt_example():
    # substitute x2 = 1 - x1: derivative 2 x1 - 1.2 = 0
    sol = solve_qp(simplex_qp(np.eye(2), np.array([-0.2, 0.0])))
    assert sol.ok
    np.testing.assert_allclose(sol.x, [0.6, 0.4], atol=1e-8)


def test_contradictory_bounds_infeasible():
    qp = QuadraticProgram(np.eye(1), np.zeros(1), G_in=np.array([[1.0], [-1.0]]),
                          h_in=np.array([0.0, -1.0]))
    assert solve_qp(qp).status == INFEASIBLE


def test_inconsistent_equalities_infeasible():
    A = np.array([[1.0, 1.0], [2.0, 2.0]])
    qp = QuadraticProgram(np.eye(2), np.zeros(2), A, np.array([1.0, 3.0]))
    assert solve_qp(qp).status == INFEASIBLE


def test_redundant_equalities_are_tolerated():
    A = np.array([[1.0, 1.0], [2.0, 2.0]])
    qp = QuadraticProgram(np.eye(2), np.array([-0.2, 0.0]), A, np.array([1.0, 2.0]),
                          -np.eye(2), np.zeros(2))
    np.testing.assert_allclose(solve_qp(qp).x, [0.6, 0.4], atol=1e-8)


def test_build_errors():
    with pytest.raises(QpBuildError):
        QuadraticProgram(np.eye(3), np.zeros(2))
    with pytest.raises(QpBuildError):
        QuadraticProgram(np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(QpBuildError):
        QuadraticProgram(np.eye(2), np.zeros(2), np.ones((1, 3)), np.ones(1))
    with pytest.raises(QpBuildError):
        QuadraticProgram(np.eye(2), np.zeros(2), np.ones((1, 2)), None)


def test_postconditions_on_optimal(rng):
    n = 6
    qp = simplex_qp(random_psd(rng, n), rng.normal(size=n))
    sol = solve_qp(qp)
    assert sol.ok
    assert np.abs(qp.A_eq @ sol.x - qp.b_eq).max() <= 1e-8
    assert (qp.G_in @ sol.x - qp.h_in).max() <= 1e-8
    assert sol.kkt_residual <= 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_matches_independent_solver(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    Q = random_psd(rng, n, cond=30.0)
    c = rng.normal(size=n)
    G = np.vstack([-np.eye(n), rng.normal(size=(2, n))])
    h = np.concatenate([np.zeros(n), rng.uniform(0.5, 1.5, 2)])
    qp = QuadraticProgram(Q, c, np.ones((1, n)), np.ones(1), G, h)
    sol = solve_qp(qp)
    ref = scipy_oracle(qp)
    assert sol.ok
    assert sol.objective <= qp.objective(ref) + 1e-7
    np.testing.assert_allclose(sol.x, ref, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7))
def test_row_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    Q = random_psd(rng, n)
    c = rng.normal(size=n)
    G = np.vstack([-np.eye(n), rng.normal(size=(3, n))])
    h = np.concatenate([np.zeros(n), rng.uniform(0.5, 2.0, 3)])
    perm = rng.permutation(G.shape[0])
    a = solve_qp(QuadraticProgram(Q, c, np.ones((1, n)), np.ones(1), G, h))
    b = solve_qp(QuadraticProgram(Q, c, np.ones((1, n)), np.ones(1), G[perm], h[perm]))
    np.testing.assert_allclose(a.x, b.x, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_objective_scaling_keeps_argmin(seed, scale):
    rng = np.random.default_rng(seed)
    n = 5
    Q = random_psd(rng, n)
    c = rng.normal(size=n)
    a = solve_qp(simplex_qp(Q, c))
    b = solve_qp(simplex_qp(scale * Q, scale * c))
    np.testing.assert_allclose(a.x, b.x, atol=1e-6)


def test_repeat_solves_bit_identical(rng):
    qp = simplex_qp(random_psd(rng, 5), rng.normal(size=5))
    np.testing.assert_array_equal(solve_qp(qp).x, solve_qp(qp).x)
