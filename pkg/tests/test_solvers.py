from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarouting.num import feasibility_check
from sarouting.oracle import oracle_solve
from sarouting.solvers import (
    SOLVERS,
    RoutingProblem,
    SolverDivergence,
    SolverState,
    SolverTrajectory,
    admm_block,
    admm_iteration,
    admm_solve,
    dual_descent_solve,
    mom_solve,
    project_capacity_simplex,
    solve,
)
from sarouting.topology import gen_random_geometric
from sarouting.traffic import make_flows, sample_arrivals


def path3(A: float = 0.1) -> RoutingProblem:
    cap = np.zeros((3, 3))
    cap[0, 1] = cap[1, 0] = cap[1, 2] = cap[2, 1] = 1.0
    return RoutingProblem(cap, np.array([[A], [A], [0.0]]), [2])


def single_link() -> tuple[RoutingProblem, SolverState]:
    """Two nodes, one unit link, node 0 sending to node 1, started at the optimum."""
    cap = np.array([[0.0, 1.0], [1.0, 0.0]])
    p = RoutingProblem(cap, np.array([[0.2], [0.0]]), [1])
    s = SolverState.initial(p)
    s.a = np.array([[1.0], [0.0]])
    s.x = p.edges_of(np.array([[[0.0], [1.0]], [[0.0], [0.0]]]))
    return p, s


def random_problem(n: int, K: int, seed: int, k: int = 3, rate: float = 0.1) -> RoutingProblem:
    t = gen_random_geometric(n, min(k, n - 1), seed)
    f = make_flows(n, K, rate, seed)
    return RoutingProblem.from_flows(t, f, sample_arrivals(f, seed, 0))


def bisection_projection(v: np.ndarray, cap: float) -> np.ndarray:
    """Projection onto {x >= 0, sum x <= cap} by bisection on the KKT threshold."""
    clipped = np.maximum(v, 0)
    if clipped.sum() <= cap:
        return clipped
    lo, hi = 0.0, float(v.max())
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.maximum(v - mid, 0).sum() > cap:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - hi, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6), st.floats(0.0, 3.0))
def test_capacity_projection_matches_bisection(seed, K, cap):
    v = np.random.default_rng(seed).normal(0, 2, size=(1, K))
    out = project_capacity_simplex(v, np.array([cap]))
    assert np.all(out >= 0) and out.sum() <= cap + 1e-12
    np.testing.assert_allclose(out[0], bisection_projection(v[0], cap), atol=1e-9)
    np.testing.assert_allclose(project_capacity_simplex(out, np.array([cap])), out, atol=1e-12)


def test_dual_descent_zero_dual_step_keeps_duals_and_climbs():
    p = random_problem(5, 2, 1)
    _, mu, traj = dual_descent_solve(p, iters=50, eta_dual=0.0)
    assert np.all(mu == 0)
    assert np.all(traj.column("dual_norm") == 0)
    assert np.all(np.diff(traj.utility) >= -1e-12)


@pytest.mark.parametrize("name", ["dd", "mom"])
def test_feasible_stationary_point_is_fixed(name):
    p, s = single_link()
    s.mu = np.array([[1.0 / (1.0 + 1e-6)], [0.0]])
    before = s.copy()
    _, mu, traj = solve(p, name, iters=5, state=s)
    np.testing.assert_allclose(traj.state.a, before.a)
    np.testing.assert_allclose(traj.state.x, before.x)
    np.testing.assert_allclose(mu, before.mu)


def test_admm_fixed_point_at_optimum():
    p, s = single_link()
    s.z = p.slack(s.a, s.x)
    assert np.all(s.z == 0)
    before = s.copy()
    admm_iteration(p, s, 0.5, 20, 0.02)
    for name in ("a", "x", "mu", "z"):
        np.testing.assert_allclose(getattr(s, name), getattr(before, name))


def test_admm_z_update_closed_form():
    p = random_problem(5, 2, 4)
    s = SolverState.initial(p, 0.5)
    s.mu = np.random.default_rng(0).uniform(0, 1, (5, 2)) * p.mask
    mu_old = s.mu.copy()
    admm_iteration(p, s, 0.5, 5, 0.02)
    # recompute the block alone from the same start
    t = SolverState.initial(p, 0.5)
    t.mu = mu_old.copy()
    admm_block(p, t, 0.5, 5, 0.02)
    e = p.slack(t.a, t.x)
    np.testing.assert_array_equal(s.z, np.maximum(0.0, e - mu_old))


def test_admm_complementarity():
    p = path3()
    _, _, traj = admm_solve(p, iters=100)
    assert np.abs(np.minimum(traj.state.z, traj.state.mu)).max() < 1e-3


def test_mom_small_rho_matches_dual_descent():
    p = random_problem(5, 2, 3, k=2)
    _, _, tm = mom_solve(p, iters=100, rho=1e-3, inner_iters=50)
    _, _, td = dual_descent_solve(p, iters=100, eta_dual=1e-3, inner_iters=50)
    assert abs(tm.utility[-1] - td.utility[-1]) <= 0.02 * abs(td.utility[-1])


@pytest.mark.parametrize("name", sorted(SOLVERS))
def test_path_graph_matches_oracle(name):
    p = path3()
    _, u_star = oracle_solve(p)
    _, _, traj = solve(p, name)
    assert abs(traj.delivered_utility[-1] - u_star) <= 0.01 * max(abs(u_star), 1.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(sorted(SOLVERS)), st.integers(3, 7), st.integers(1, 3))
def test_iterates_feasible_and_duals_nonnegative(seed, name, n, K):
    p = random_problem(n, K, seed)
    state = None
    for _ in range(8):
        decision, mu, traj = solve(p, name, iters=1, inner_iters=5, state=state)
        state = traj.state
        rep = feasibility_check(decision, p.arrivals, p.capacity, destinations=p.destinations)
        assert rep.minimum <= 1e-9 and rep.capacity <= 1e-9 and rep.support <= 1e-9
        assert np.all(mu >= 0) and np.all(state.mu >= 0)
        if name == "admm":
            assert np.all(state.z >= 0)


def test_trajectory_records_and_csv(tmp_path):
    _, _, traj = mom_solve(path3(), iters=7)
    assert traj.column("iteration").tolist() == list(range(1, 8))
    traj.write_csv(tmp_path / "t.csv")
    traj.write_csv(tmp_path / "n.csv", timing=False)
    with open(tmp_path / "t.csv") as fh:
        assert next(csv.reader(fh))[-1] == "wall_ms"
    with open(tmp_path / "n.csv") as fh:
        rows = list(csv.reader(fh))
    assert "wall_ms" not in rows[0] and len(rows) == 8


def test_trajectory_rejects_non_monotone():
    t = SolverTrajectory("x")
    t.append(iteration=2)
    with pytest.raises(ValueError):
        t.append(iteration=2)


def test_solvers_deterministic():
    p = random_problem(6, 2, 9)
    for name in SOLVERS:
        a = solve(p, name, iters=5)[2]
        b = solve(p, name, iters=5)[2]
        assert np.array_equal(a.utility, b.utility)


def test_invalid_parameters_rejected():
    p = path3()
    with pytest.raises(ValueError):
        mom_solve(p, rho=0.0)
    with pytest.raises(ValueError):
        admm_solve(p, inner_iters=0)
    with pytest.raises(ValueError):
        dual_descent_solve(p, eta_primal=-1)
    with pytest.raises(ValueError, match="newton"):
        solve(p, "newton")


def test_problem_shape_validation():
    with pytest.raises(ValueError):
        RoutingProblem(np.zeros((3, 3)), np.zeros((2, 1)), [0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    p = path3()
    with pytest.raises(SolverDivergence):
        dual_descent_solve(p, iters=3, eta_primal=math.inf)
