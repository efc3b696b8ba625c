import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from downstep.qp import ActiveSetQP, INFEASIBLE, MAX_ITERATIONS, OPTIMAL, QpError, QpProblem, solve
from oracles import enumerate_qp, random_qp


def test_unconstrained_identity():
    sol = solve(QpProblem(np.eye(3), np.zeros(3)))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.u, 0.0, atol=1e-12)


def test_active_upper_bound():
    # (u - 2)^2 = u^2 - 4u + 4  ->  H = 2, f = -4
    sol = solve(QpProblem([[2.0]], [-4.0], A_in=[[1.0]], b_in=[1.0]))
    assert sol.status == OPTIMAL
    assert sol.u[0] == pytest.approx(1.0, abs=1e-10)
    assert sol.active_set == (0,)
    assert sol.multipliers_in[0] == pytest.approx(2.0, abs=1e-6)


def test_variable_bounds_are_inequalities():
    sol = solve(QpProblem(np.eye(2), [-5.0, 5.0], lb=[-1, -1], ub=[1, 1]))
    np.testing.assert_allclose(sol.u, [1.0, -1.0], atol=1e-10)


def test_dimension_and_definiteness_errors():
    with pytest.raises(QpError):
        QpProblem(np.eye(2), np.zeros(3))
    with pytest.raises(QpError):
        QpProblem(np.diag([1.0, -1.0]), np.zeros(2))
    with pytest.raises(QpError):
        QpProblem([[1.0, 2.0], [0.0, 1.0]], np.zeros(2))
    with pytest.raises(QpError):
        QpProblem(np.eye(2), np.zeros(2), A_in=np.ones((1, 3)), b_in=[0.0])


def test_infeasible_returns_farkas_certificate():
    A = np.array([[1.0, 0.0], [-1.0, 0.0]])
    b = np.array([-1.0, -1.0])  # u0 <= -1 and u0 >= 1
    sol = solve(QpProblem(np.eye(2), np.zeros(2), A_in=A, b_in=b))
    assert sol.status == INFEASIBLE
    y = sol.certificate["inequality_weights"]
    assert np.all(y >= -1e-9)
    np.testing.assert_allclose(A.T @ y, 0.0, atol=1e-6)
    assert y @ b < 0


def test_max_iterations_status():
    rng = np.random.default_rng(3)
    H, f, A_eq, b_eq, A_in, b_in = random_qp(rng, n=6, m=12, n_eq=0)
    f = f * 100
    sol = ActiveSetQP(max_iter=1).solve(QpProblem(H, f, A_eq, b_eq, A_in, b_in))
    assert sol.status in (MAX_ITERATIONS, OPTIMAL)


def test_random_against_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(100):
        H, f, A_eq, b_eq, A_in, b_in = random_qp(rng)
        sol = solve(QpProblem(H, f, A_eq, b_eq, A_in, b_in))
        _, obj = enumerate_qp(H, f, A_eq, b_eq, A_in, b_in)
        assert sol.status == OPTIMAL
        assert sol.objective == pytest.approx(obj, abs=1e-6)
        assert max(sol.stationarity, sol.primal_residual, sol.complementarity) < 1e-6


def _feasible_directions(rng, sol, A_eq, A_in, b_in, k=20):
    n = sol.u.size
    dirs = []
    tight = np.flatnonzero(A_in @ sol.u - b_in > -1e-7) if A_in.size else []
    while len(dirs) < k:
        d = rng.normal(size=n)
        if A_eq.shape[0]:
            N = np.linalg.svd(A_eq)[2][A_eq.shape[0]:].T
            d = N @ (N.T @ d)
        if len(tight) and np.any(A_in[tight] @ d > 0):
            d = -d
            if np.any(A_in[tight] @ d > 0):
                continue
        if np.linalg.norm(d) < 1e-12:
            break
        dirs.append(d / np.linalg.norm(d))
    return dirs


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_local_optimality_probe(seed):
    rng = np.random.default_rng(seed)
    H, f, A_eq, b_eq, A_in, b_in = random_qp(rng)
    p = QpProblem(H, f, A_eq, b_eq, A_in, b_in)
    sol = solve(p)
    assert sol.ok
    for d in _feasible_directions(rng, sol, A_eq, A_in, b_in):
        for s in (1e-4, -1e-4):
            v = sol.u + s * d
            if A_in.size and np.any(A_in @ v - b_in > 0):
                continue
            assert p.objective(v) >= sol.objective - 1e-8


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_warm_start_matches_cold(seed):
    rng = np.random.default_rng(seed)
    p = QpProblem(*random_qp(rng))
    cold = solve(p)
    warm = solve(p, warm_start=cold.active_set)
    np.testing.assert_allclose(warm.u, cold.u, atol=1e-8)
    # wrong guess still converges to the same point
    guess = tuple(range(min(2, p.A_in.shape[0])))
    np.testing.assert_allclose(solve(p, warm_start=guess).u, cold.u, atol=1e-8)


def test_deterministic():
    rng = np.random.default_rng(11)
    p = QpProblem(*random_qp(rng, n=8, m=12))
    a, b = solve(p), solve(p)
    assert a.u.tobytes() == b.u.tobytes()
    assert a.active_set == b.active_set
