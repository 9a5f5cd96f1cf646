"""Independent reference solutions for small routing problems.

Three routes, sharing nothing with the iterative solvers beyond the problem
data:

* ``conic``: the exact convex program handed to an interior-point solver,
* ``penalty``: long projected gradient ascent on a quadratically penalized
  problem with diminishing steps,
* :func:`grid_oracle`: exhaustive search over admission vectors for one flow
  on at most three nodes, with feasibility decided by enumerating every cut.
"""

from __future__ import annotations

import itertools

import numpy as np

from .num import LOG_FLOOR, RoutingDecision
from .solvers import RoutingProblem, project_capacity_simplex

MAX_NODES, MAX_FLOWS = 10, 5


class InfeasibleProblem(ValueError):
    """The minimum admissions cannot be carried by the network."""


def _check_size(problem: RoutingProblem, max_nodes: int = MAX_NODES, max_flows: int = MAX_FLOWS) -> None:
    if problem.n > max_nodes or problem.K > max_flows:
        raise ValueError(
            f"oracle is limited to n <= {max_nodes}, K <= {max_flows}; got n={problem.n}, K={problem.K}"
        )


def oracle_solve(problem: RoutingProblem, seed: int = 0, method: str = "conic", **kwargs) -> tuple[RoutingDecision, float]:
    """Reference optimum ``(decision, utility)`` of a small problem.

    Args:
        method: ``"conic"`` (default) or ``"penalty"``.
        seed: unused; both methods are deterministic.
    """
    _check_size(problem)
    if method == "conic":
        return _conic(problem, **kwargs)
    if method == "penalty":
        return _penalty(problem, **kwargs)
    raise ValueError(f"unknown oracle method {method!r}")


def _conic(problem: RoutingProblem, solver: str = "CLARABEL") -> tuple[RoutingDecision, float]:
    import cvxpy as cp

    n, K = problem.n, problem.K
    mask = problem.mask
    a = cp.Variable((n, K))
    cons = [a >= problem.arrivals]
    if problem.m:
        x = cp.Variable((problem.m, K), nonneg=True)
        net = problem.incidence @ x
        cons += [cp.sum(x, axis=1) <= problem.edge_capacity]
    else:
        x, net = None, np.zeros((n, K))
    cons += [cp.multiply(mask, net - a) >= 0]
    # destination admissions carry no utility; pin them to zero
    cons += [cp.multiply(1 - mask, a) == 0]
    objective = cp.sum(cp.multiply(mask, cp.log(a + LOG_FLOOR)))
    prob = cp.Problem(cp.Maximize(objective), cons)
    prob.solve(solver=solver)
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        raise InfeasibleProblem("minimum admissions exceed what the network can carry")
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"conic oracle failed with status {prob.status}")
    a_val = problem.project_a(np.asarray(a.value))
    x_val = np.zeros((problem.m, K)) if x is None else project_capacity_simplex(x.value, problem.edge_capacity)
    return problem.decision(a_val, x_val), problem.utility(a_val)


def _penalty(
    problem: RoutingProblem, iters: int = 100_000, weight: float = 1e3, offset: float = 1e3
) -> tuple[RoutingDecision, float]:
    """Maximize ``U(a) - weight/2 * ||[-g]^+||^2`` with steps ``1 / (offset + m)``.

    The returned admissions are shrunk onto the carried flow so the reported
    utility is that of a point satisfying conservation.
    """
    a = problem.arrivals.copy()
    x = np.zeros((problem.m, problem.K))
    for m in range(iters):
        eta = 1.0 / (offset + m)
        psi = weight * np.maximum(-problem.slack(a, x), 0.0)
        a = problem.project_a(a + eta * (problem.mask / (LOG_FLOOR + a) - psi))
        x = problem.project_x(x + eta * (psi[problem.src] - psi[problem.dst]))
    a = problem.delivered(a, x)
    return problem.decision(a, x), problem.utility(a)


def cut_feasible(problem: RoutingProblem, a: np.ndarray, tol: float = 1e-12) -> bool:
    """Whether single-flow admissions ``a`` can be routed to the destination.

    Every set ``U`` of non-destination nodes must be able to push its total
    admission across its outgoing cut (max-flow / min-cut).
    """
    if problem.K != 1:
        raise ValueError("cut enumeration is implemented for a single flow")
    dest = int(problem.destinations[0])
    nodes = [i for i in range(problem.n) if i != dest]
    cap = problem.capacity
    for size in range(1, len(nodes) + 1):
        for U in itertools.combinations(nodes, size):
            inside = np.zeros(problem.n, dtype=bool)
            inside[list(U)] = True
            if a[list(U), 0].sum() > cap[np.ix_(inside, ~inside)].sum() + tol:
                return False
    return True


def grid_oracle(problem: RoutingProblem, resolution: float = 0.01, refine: int = 0) -> tuple[np.ndarray, float]:
    """Best admissions on a grid of spacing ``resolution`` for ``n <= 3``, ``K = 1``.

    Each of the ``refine`` extra passes searches a ten times finer grid
    around the incumbent. The result is a lower bound on the optimum; rounding
    the optimum down onto the grid stays feasible, so the gap is at most
    ``sum_i log(a_i / (a_i - resolution))`` for the final resolution.
    """
    _check_size(problem, 3, 1)
    dest = int(problem.destinations[0])
    nodes = [i for i in range(problem.n) if i != dest]
    lo = problem.arrivals[nodes, 0]
    hi = problem.a_max[nodes, 0]
    if np.any(hi < lo):
        raise InfeasibleProblem("a node cannot send its minimum admission")
    cuts = []
    for size in range(1, len(nodes) + 1):
        for U in itertools.combinations(range(len(nodes)), size):
            inside = np.zeros(problem.n, dtype=bool)
            inside[[nodes[u] for u in U]] = True
            cuts.append((list(U), problem.capacity[np.ix_(inside, ~inside)].sum()))
    best = None
    for _ in range(refine + 1):
        if best is None:
            start, stop = lo, hi
        else:
            start = np.maximum(lo, best - 10 * resolution)
            stop = np.minimum(hi, best + 10 * resolution)
        axes = [s + resolution * np.arange(int(np.floor((e - s) / resolution + 1e-9)) + 1) for s, e in zip(start, stop)]
        grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        ok = np.ones(len(grid), dtype=bool)
        for U, cap in cuts:
            ok &= grid[:, U].sum(axis=1) <= cap + 1e-12
        if not ok.any():
            raise InfeasibleProblem("no grid point is feasible")
        util = np.log(LOG_FLOOR + grid).sum(axis=1)
        util[~ok] = -np.inf
        best = grid[np.argmax(util)]
        resolution /= 10
    a = np.zeros((problem.n, 1))
    a[nodes, 0] = best
    return a, problem.utility(a)
