from __future__ import annotations

import math

import numpy as np
import pytest

from sarouting.num import LOG_FLOOR, feasibility_check
from sarouting.oracle import InfeasibleProblem, cut_feasible, grid_oracle, oracle_solve
from sarouting.solvers import RoutingProblem
from sarouting.topology import gen_random_geometric
from sarouting.traffic import make_flows, sample_arrivals


def path3(c01: float = 1.0, c12: float = 1.0, A: float = 0.1) -> RoutingProblem:
    cap = np.zeros((3, 3))
    cap[0, 1] = cap[1, 0] = c01
    cap[1, 2] = cap[2, 1] = c12
    return RoutingProblem(cap, np.array([[A], [A], [0.0]]), [2])


def tiny(seed: int) -> RoutingProblem:
    t = gen_random_geometric(3, 1, seed)
    f = make_flows(3, 1, 0.1, seed)
    return RoutingProblem.from_flows(t, f, sample_arrivals(f, seed, 0))


def test_isolated_source_with_zero_minimum():
    p = RoutingProblem(np.zeros((2, 2)), np.zeros((2, 1)), [1])
    d, u = oracle_solve(p)
    assert d.a[0, 0] == pytest.approx(0.0, abs=1e-7)
    assert u == pytest.approx(math.log(LOG_FLOOR), abs=1e-3)


def test_isolated_source_with_positive_minimum_is_infeasible():
    p = RoutingProblem(np.zeros((2, 2)), np.array([[1.0], [0.0]]), [1])
    with pytest.raises(InfeasibleProblem):
        oracle_solve(p)


@pytest.mark.parametrize("C", [0.5, 1.0, 2.5])
def test_single_link_saturates(C):
    p = RoutingProblem(np.array([[0.0, C], [C, 0.0]]), np.zeros((2, 1)), [1])
    d, u = oracle_solve(p)
    assert d.a[0, 0] == pytest.approx(C, rel=1e-6)
    assert u == pytest.approx(math.log(C + LOG_FLOOR), abs=1e-6)


def test_path_closed_form():
    # both nodes share the last link: a0 + a1 <= c12, a0 <= c01
    d, u = oracle_solve(path3(1.0, 1.0))
    np.testing.assert_allclose(d.a[:2, 0], [0.5, 0.5], atol=1e-4)
    assert u == pytest.approx(2 * math.log(0.5 + LOG_FLOOR), abs=1e-6)


def test_path_grid_and_oracle_agree():
    p = path3(1.0, 1.0)
    _, u_grid = grid_oracle(p)
    _, u_star = oracle_solve(p)
    assert abs(u_grid - u_star) <= 0.01


@pytest.mark.parametrize("seed", range(6))
def test_grid_cross_check(seed):
    p = tiny(seed)
    a_grid, u_grid = grid_oracle(p, refine=2)
    d, u_star = oracle_solve(p)
    assert cut_feasible(p, a_grid)
    assert cut_feasible(p, d.a, tol=1e-7)
    # the grid value is a lower bound within the final resolution's rounding gap
    pos = a_grid[p.mask > 0]
    gap = float(np.sum(np.log(pos / (pos - 1e-4))))
    assert u_star >= u_grid - 1e-7
    assert u_star - u_grid <= gap + 1e-7


@pytest.mark.parametrize("seed", [0, 2])
def test_penalty_method_matches_conic(seed):
    t = gen_random_geometric(5, 2, seed)
    f = make_flows(5, 2, 0.1, seed)
    p = RoutingProblem.from_flows(t, f, sample_arrivals(f, seed, 0))
    _, u_conic = oracle_solve(p)
    _, u_pen = oracle_solve(p, method="penalty")
    # the penalty path approaches from below at its default budget
    assert u_pen <= u_conic + 1e-6
    assert u_conic - u_pen <= 5e-3 * max(abs(u_conic), 1.0)


def test_oracle_solution_feasible():
    t = gen_random_geometric(8, 3, 2)
    f = make_flows(8, 3, 0.1, 2)
    A = sample_arrivals(f, 2, 0)
    p = RoutingProblem.from_flows(t, f, A)
    d, _ = oracle_solve(p)
    rep = feasibility_check(d, A, t.capacity, tol=1e-6, destinations=f.destinations)
    assert rep.feasible


def test_size_cap():
    t = gen_random_geometric(11, 3, 0)
    f = make_flows(11, 1, 0.1, 0)
    with pytest.raises(ValueError):
        oracle_solve(RoutingProblem.from_flows(t, f))
    with pytest.raises(ValueError):
        grid_oracle(RoutingProblem.from_flows(gen_random_geometric(4, 2, 0), make_flows(4, 1, 0.1, 0)))


def test_unknown_method():
    with pytest.raises(ValueError):
        oracle_solve(path3(), method="simplex")


def test_cut_feasibility():
    p = path3(1.0, 1.0)
    assert cut_feasible(p, np.array([[0.4], [0.6], [0.0]]))
    assert not cut_feasible(p, np.array([[0.6], [0.6], [0.0]]))
    assert not cut_feasible(path3(0.3, 2.0), np.array([[0.4], [0.1], [0.0]]))
