"""Unparameterized baselines: dual descent, Method of Multipliers, scaled ADMM.

All three solvers share one projected-gradient primal engine working on an
edge list: routing rates are stored as ``x`` with shape ``(m, K)`` (one row per
directed edge) and scattered to the dense ``(n, n, K)`` tensor only on output.
The implicit constraints are kept by exact projection after every step:

* ``A <= a <= out_capacity`` (the upper bound is implied by flow conservation
  and keeps plain dual descent bounded),
* ``x >= 0`` and ``sum_k x[e, k] <= C[e]`` per edge (capacity simplex).

Each solver differs only in the *price* ``psi = dL/dg`` the primal step sees:
``mu`` for dual descent, ``[mu - rho g]^+`` for the Method of Multipliers and
``rho (mu + z - g)`` for the scaled ADMM block.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .num import LOG_FLOOR, RoutingDecision
from .topology import Topology
from .traffic import FlowSet, destination_mask

TRAJECTORY_FIELDS = ("iteration", "utility", "delivered_utility", "violation", "dual_norm", "wall_ms")


class SolverDivergence(ArithmeticError):
    """Raised when an iterate's utility stops being finite."""


@dataclass(frozen=True, eq=False)
class RoutingProblem:
    """One time window of the routing problem.

    Attributes:
        capacity: ``(n, n)`` link capacities, zero off the edge set.
        arrivals: ``(n, K)`` minimum admissions ``A``.
        destinations: ``(K,)`` destination of each flow.
    """

    capacity: np.ndarray
    arrivals: np.ndarray
    destinations: np.ndarray

    def __post_init__(self) -> None:
        cap = np.asarray(self.capacity, dtype=float)
        arr = np.asarray(self.arrivals, dtype=float)
        dest = np.asarray(self.destinations, dtype=np.int64).reshape(-1)
        n, K = arr.shape
        if cap.shape != (n, n) or dest.size != K:
            raise ValueError(f"inconsistent shapes: capacity {cap.shape}, arrivals {arr.shape}, {dest.size} flows")
        if np.any(arr < 0) or np.any(cap < 0):
            raise ValueError("arrivals and capacities must be nonnegative")
        mask = destination_mask(n, dest)
        src, dst = np.nonzero(cap > 0)
        out_inc = np.zeros((n, src.size))
        in_inc = np.zeros((n, src.size))
        out_inc[src, np.arange(src.size)] = 1.0
        in_inc[dst, np.arange(src.size)] = 1.0
        for name, v in (
            ("capacity", cap),
            ("arrivals", arr * mask),
            ("destinations", dest),
            ("mask", mask),
            ("src", src),
            ("dst", dst),
            ("edge_capacity", cap[src, dst]),
            ("incidence", out_inc - in_inc),
            ("a_max", cap.sum(axis=1)[:, None] * mask),
        ):
            object.__setattr__(self, name, v)

    @classmethod
    def from_flows(cls, topology: Topology, flows: FlowSet, arrivals: np.ndarray | None = None) -> "RoutingProblem":
        """Problem on ``topology``; ``arrivals`` default to the mean rates."""
        A = flows.mean_rates if arrivals is None else arrivals
        return cls(topology.capacity, A, flows.destinations)

    @property
    def n(self) -> int:
        return self.arrivals.shape[0]

    @property
    def K(self) -> int:
        return self.arrivals.shape[1]

    @property
    def m(self) -> int:
        return self.src.size

    # -- edge-list helpers -------------------------------------------------------

    def dense(self, x: np.ndarray) -> np.ndarray:
        """Scatter edge rates ``(m, K)`` into an ``(n, n, K)`` tensor."""
        r = np.zeros((self.n, self.n, self.K))
        r[self.src, self.dst] = x
        return r

    def edges_of(self, r: np.ndarray) -> np.ndarray:
        return np.asarray(r, dtype=float)[self.src, self.dst]

    def net(self, x: np.ndarray) -> np.ndarray:
        """Outflow minus inflow per (node, flow)."""
        return self.incidence @ x

    def slack(self, a: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.mask * (self.net(x) - a)

    def utility(self, a: np.ndarray) -> float:
        return float(np.sum(self.mask * np.log(LOG_FLOOR + a)))

    def delivered(self, a: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Admissions the routing carries: ``max(A, min(a, out - in))``."""
        return self.mask * np.maximum(self.arrivals, np.minimum(a, self.net(x)))

    def project_a(self, a: np.ndarray) -> np.ndarray:
        return self.mask * np.maximum(np.minimum(a, self.a_max), self.arrivals)

    def project_x(self, x: np.ndarray) -> np.ndarray:
        return project_capacity_simplex(x, self.edge_capacity)

    def decision(self, a: np.ndarray, x: np.ndarray) -> RoutingDecision:
        return RoutingDecision(self.dense(x), a.copy())


def project_capacity_simplex(v: np.ndarray, cap: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto ``{x >= 0, sum(x) <= cap}``.

    Rows whose clipped sum fits the budget are just clipped; the others are
    projected onto the scaled simplex ``{x >= 0, sum(x) = cap}`` by the
    sort-and-threshold rule.
    """
    v = np.asarray(v, dtype=float)
    cap = np.asarray(cap, dtype=float)
    out = np.maximum(v, 0.0)
    over = out.sum(axis=1) > cap
    if not np.any(over):
        return out
    w, c = v[over], cap[over]
    u = -np.sort(-w, axis=1)
    css = np.cumsum(u, axis=1) - c[:, None]
    idx = np.arange(1, w.shape[1] + 1)
    cond = u - css / idx > 0
    last = w.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(w.shape[0]), last] / (last + 1)
    proj = np.maximum(w - theta[:, None], 0.0)
    # guard the budget against round-off
    s = proj.sum(axis=1)
    proj *= np.where(s > c, c / np.where(s > 0, s, 1.0), 1.0)[:, None]
    out[over] = proj
    return out


@dataclass
class SolverState:
    """Iterate shared by all solvers; ``z`` is only used by ADMM.

    ``x`` holds routing rates per directed edge, ``(m, K)``.
    """

    a: np.ndarray
    x: np.ndarray
    mu: np.ndarray
    z: np.ndarray
    rho: float = 0.0

    @classmethod
    def initial(cls, problem: RoutingProblem, rho: float = 0.0) -> "SolverState":
        """``a = A``, ``r = 0``, ``mu = 0``, ``z = 0``."""
        shape = (problem.n, problem.K)
        return cls(
            problem.arrivals.copy(), np.zeros((problem.m, problem.K)), np.zeros(shape), np.zeros(shape), rho
        )

    def copy(self) -> "SolverState":
        return replace(self, a=self.a.copy(), x=self.x.copy(), mu=self.mu.copy(), z=self.z.copy())


AdmmState = SolverState


@dataclass
class SolverTrajectory:
    """Per-iteration records of a solve plus its final iterate."""

    solver: str
    records: list[dict] = field(default_factory=list)
    state: SolverState | None = None

    def append(self, **row) -> None:
        if self.records and row["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("iteration indices must increase")
        self.records.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    @property
    def utility(self) -> np.ndarray:
        return self.column("utility")

    @property
    def delivered_utility(self) -> np.ndarray:
        return self.column("delivered_utility")

    def write_csv(self, path: str | Path, timing: bool = True) -> None:
        """Write the records; ``timing=False`` drops ``wall_ms`` for reproducible files."""
        fields = [f for f in TRAJECTORY_FIELDS if timing or f != "wall_ms"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(fields)
            for rec in self.records:
                w.writerow([rec["iteration"], *(repr(float(rec[f])) for f in fields[1:])])


# -- primal engine -----------------------------------------------------------------


def primal_step(problem: RoutingProblem, s: SolverState, psi: np.ndarray, eta: float, pull: np.ndarray | None = None) -> None:
    """One projected gradient-ascent step on ``(a, x)`` in place.

    ``psi`` is the derivative of the objective with respect to the slack ``g``;
    ``pull`` is an extra additive term for ``dL/da`` (zero if omitted).
    """
    psi = problem.mask * psi
    grad_a = problem.mask / (LOG_FLOOR + s.a) - psi
    if pull is not None:
        grad_a = grad_a + pull
    grad_x = psi[problem.src] - psi[problem.dst]
    s.a = problem.project_a(s.a + eta * grad_a)
    s.x = problem.project_x(s.x + eta * grad_x)


def mom_price(problem: RoutingProblem, s: SolverState, rho: float) -> np.ndarray:
    """``dL_rho/dg = [mu - rho g]^+`` with the slack variable maximized out."""
    return np.maximum(s.mu - rho * problem.slack(s.a, s.x), 0.0)


def admm_block(problem: RoutingProblem, s: SolverState, rho: float, inner_iters: int, eta: float) -> None:
    """Approximately maximize ``U(a) - rho/2 ||g - z - mu||^2`` over ``(a, x)``."""
    for _ in range(inner_iters):
        resid = problem.slack(s.a, s.x) - s.z - s.mu
        primal_step(problem, s, -rho * resid, eta)


def admm_iteration(problem: RoutingProblem, s: SolverState, rho: float, inner_iters: int, eta: float) -> None:
    """One full scaled-ADMM iteration in place: ``(a, r)`` block, ``z``, dual."""
    admm_block(problem, s, rho, inner_iters, eta)
    g = problem.slack(s.a, s.x)
    s.z = np.maximum(g - s.mu, 0.0)
    s.mu = problem.mask * np.maximum(s.mu - (g - s.z), 0.0)


def _run(
    name: str,
    problem: RoutingProblem,
    iters: int,
    step: Callable[[SolverState], None],
    state: SolverState,
    dual_scale: float = 1.0,
) -> tuple[RoutingDecision, np.ndarray, SolverTrajectory]:
    traj = SolverTrajectory(name)
    start = time.perf_counter()
    for m in range(1, iters + 1):
        step(state)
        u = problem.utility(state.a)
        if not math.isfinite(u) or not np.all(np.isfinite(state.x)):
            raise SolverDivergence(f"{name}: non-finite iterate at iteration {m} (utility {u})")
        g = problem.slack(state.a, state.x)
        traj.append(
            iteration=m,
            utility=u,
            delivered_utility=problem.utility(problem.delivered(state.a, state.x)),
            violation=float(np.maximum(-g, 0.0).max(initial=0.0)),
            dual_norm=float(np.linalg.norm(dual_scale * state.mu)),
            wall_ms=1e3 * (time.perf_counter() - start),
        )
    traj.state = state
    return problem.decision(state.a, state.x), dual_scale * state.mu, traj


def _check_positive(**values: float) -> None:
    for name, v in values.items():
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")


# -- solvers -------------------------------------------------------------------------


def dual_descent_solve(
    problem: RoutingProblem,
    iters: int = 3000,
    eta_primal: float = 0.02,
    eta_dual: float = 0.05,
    seed: int = 0,
    inner_iters: int = 1,
    state: SolverState | None = None,
) -> tuple[RoutingDecision, np.ndarray, SolverTrajectory]:
    """Projected primal ascent on the Lagrangian alternated with ``mu <- [mu - eta g]^+``.

    The iteration is deterministic; ``seed`` is accepted for interface parity.
    ``inner_iters`` primal steps are taken per dual step and ``state``
    warm-starts from a previous iterate.
    """
    _check_positive(eta_primal=eta_primal)
    if eta_dual < 0:
        raise ValueError("eta_dual must be nonnegative")
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    s = SolverState.initial(problem) if state is None else state.copy()

    def step(s: SolverState) -> None:
        for _ in range(inner_iters):
            primal_step(problem, s, s.mu, eta_primal)
        s.mu = problem.mask * np.maximum(s.mu - eta_dual * problem.slack(s.a, s.x), 0.0)

    return _run("dual_descent", problem, iters, step, s)


def mom_solve(
    problem: RoutingProblem,
    iters: int = 100,
    rho: float = 2.0,
    inner_iters: int = 50,
    eta_primal: float = 0.02,
    seed: int = 0,
    dual_step: float | None = None,
    rho_decay: float = 1.0,
    state: SolverState | None = None,
) -> tuple[RoutingDecision, np.ndarray, SolverTrajectory]:
    """Method of Multipliers with an inexact (projected-gradient) inner solve.

    Args:
        dual_step: step of the dual update; defaults to ``rho`` (standard MoM).
        rho_decay: per-iteration multiplicative factor on ``rho`` (1 keeps it constant).
    """
    _check_positive(rho=rho, eta_primal=eta_primal, rho_decay=rho_decay)
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    s = SolverState.initial(problem, rho) if state is None else state.copy()
    s.rho = rho

    def step(s: SolverState) -> None:
        for _ in range(inner_iters):
            primal_step(problem, s, mom_price(problem, s, s.rho), eta_primal)
        eta = s.rho if dual_step is None else dual_step
        s.mu = problem.mask * np.maximum(s.mu - eta * problem.slack(s.a, s.x), 0.0)
        s.rho *= rho_decay

    return _run("mom", problem, iters, step, s)


def admm_solve(
    problem: RoutingProblem,
    iters: int = 100,
    rho: float = 0.5,
    inner_iters: int = 50,
    eta_primal: float = 0.02,
    seed: int = 0,
    state: SolverState | None = None,
) -> tuple[RoutingDecision, np.ndarray, SolverTrajectory]:
    """Scaled ADMM: ``(a, r)`` block ascent, closed-form ``z``, unit-step scaled dual.

    The returned dual is the unscaled multiplier ``rho * mu``; the scaled one
    stays in ``trajectory.state.mu``.
    """
    _check_positive(rho=rho, eta_primal=eta_primal)
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    s = SolverState.initial(problem, rho) if state is None else state.copy()
    s.rho = rho
    return _run("admm", problem, iters, lambda s: admm_iteration(problem, s, rho, inner_iters, eta_primal), s, rho)


SOLVERS = {"dd": dual_descent_solve, "mom": mom_solve, "admm": admm_solve}


def solve(problem: RoutingProblem, solver: str, **kwargs) -> tuple[RoutingDecision, np.ndarray, SolverTrajectory]:
    """Dispatch by short name: ``dd``, ``mom`` or ``admm``."""
    try:
        fn = SOLVERS[solver]
    except KeyError:
        raise ValueError(f"unknown solver {solver!r}; choose from {sorted(SOLVERS)}") from None
    return fn(problem, **kwargs)
