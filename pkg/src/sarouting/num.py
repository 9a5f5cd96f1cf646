"""Utility, constraints and (augmented) Lagrangians of the routing problem.

The problem, for flows ``k`` and nodes ``i`` other than the flow's destination::

    maximize    sum_{i,k} log(a[i,k])
    subject to  out[i,k] - in[i,k] - a[i,k] >= 0     (flow conservation)
                a[i,k] >= A[i,k]                       (minimum admission)
                sum_k r[i,j,k] <= C[i,j]               (link capacity)

Only flow conservation is dualized. Its slack ``g`` is called the *slack*
throughout. Destination entries are excluded everywhere: packets reaching a
destination leave the network.

The scalar functions here are written with :mod:`sarouting.tape` ops, so the
same code evaluates plain arrays or builds a differentiable trace.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tape as tp
from .traffic import destination_mask

LOG_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class RoutingDecision:
    """Routing rates ``r`` (``(n, n, K)``) and admissions ``a`` (``(n, K)``)."""

    r: np.ndarray
    a: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.r, dtype=float)
        a = np.asarray(self.a, dtype=float)
        n, K = a.shape
        if r.shape != (n, n, K):
            raise ValueError(f"routing must be ({n}, {n}, {K}), got {r.shape}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "a", a)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def K(self) -> int:
        return self.a.shape[1]

    @classmethod
    def zeros(cls, n: int, K: int) -> "RoutingDecision":
        return cls(np.zeros((n, n, K)), np.zeros((n, K)))


@dataclass
class SlackReport:
    """Per-(node, flow) conservation slack and its violation summary."""

    g: np.ndarray
    max_violation: float
    total_violation: float

    def to_dict(self) -> dict:
        return {
            "g": self.g.tolist(),
            "max_violation": self.max_violation,
            "total_violation": self.total_violation,
        }


@dataclass
class FeasibilityReport:
    """Largest violation per constraint family; ``support`` covers off-edge or negative rates."""

    flow: float
    minimum: float
    capacity: float
    support: float
    tol: float

    @property
    def feasible(self) -> bool:
        return max(self.flow, self.minimum, self.capacity, self.support) <= self.tol

    def to_dict(self) -> dict:
        return {**asdict(self), "feasible": self.feasible}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _mask(a, destinations: Sequence[int] | None) -> np.ndarray:
    shape = tp.value(a).shape
    if destinations is None:
        return np.ones(shape[-2:])
    return destination_mask(shape[-2], destinations)


# -- array-level building blocks (tape-aware) ------------------------------------


def utility_value(a_avg, mask):
    """``sum mask * log(LOG_FLOOR + a_avg)`` over the trailing ``(n, K)`` axes."""
    return tp.tsum(tp.mul(mask, tp.log(tp.add(a_avg, LOG_FLOOR))), axis=(-2, -1))


def slack_value(r, a, mask):
    """Conservation slack ``out - in - a`` masked at destinations.

    ``r`` is ``(..., n, n, K)`` and ``a`` is ``(..., n, K)``.
    """
    outflow = tp.tsum(r, axis=-2)
    inflow = tp.tsum(r, axis=-3)
    return tp.mul(mask, tp.sub(tp.sub(outflow, inflow), a))


def augmented_value(utility, g_avg, mu, rho: float):
    """``utility + sum mu * d - rho/2 * sum d^2`` with ``d = min(g_avg, mu / rho)``.

    ``d`` is the equality residual after maximizing out the nonnegative slack
    variable in closed form (its optimum is ``max(0, g_avg - mu / rho)``).
    """
    mu = np.asarray(mu, dtype=float)
    d = tp.minimum(g_avg, mu / rho)
    dual = tp.tsum(tp.mul(mu, d), axis=(-2, -1))
    penalty = tp.tsum(tp.square(d), axis=(-2, -1))
    return tp.sub(tp.add(utility, dual), tp.mul(penalty, 0.5 * rho))


def delivered_admissions(r: np.ndarray, a: np.ndarray, arrivals: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Admissions the routing can actually carry: ``clip(a, A, max(A, out - in))``."""
    net = r.sum(axis=-2) - r.sum(axis=-3)
    return mask * np.maximum(arrivals, np.minimum(a, net))


# -- decision-level API ------------------------------------------------------------


def utility(a_avg: np.ndarray, destinations: Sequence[int] | None = None) -> float:
    """Sum of ``log(LOG_FLOOR + a_avg)`` over non-destination (node, flow) pairs."""
    a_avg = np.asarray(a_avg, dtype=float)
    if np.any(a_avg < 0):
        raise ValueError("admissions must be nonnegative")
    return float(utility_value(a_avg, _mask(a_avg, destinations)))


def flow_slack(d: RoutingDecision, destinations: Sequence[int] | None = None) -> SlackReport:
    g = slack_value(d.r, d.a, _mask(d.a, destinations))
    viol = np.maximum(-g, 0.0)
    return SlackReport(g=g, max_violation=float(viol.max(initial=0.0)), total_violation=float(viol.sum()))


def lagrangian(d: RoutingDecision, mu: np.ndarray, destinations: Sequence[int] | None = None) -> float:
    """Utility plus ``sum mu * g`` (single time step)."""
    g = flow_slack(d, destinations).g
    return utility(d.a, destinations) + float(np.sum(np.asarray(mu) * g))


def augmented_lagrangian(
    decisions: RoutingDecision | Sequence[RoutingDecision],
    mu: np.ndarray,
    rho: float,
    destinations: Sequence[int] | None = None,
) -> float:
    """Augmented Lagrangian of the time-averaged admissions and slack.

    ``decisions`` is one decision or the window of decisions to average over.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if isinstance(decisions, RoutingDecision):
        decisions = [decisions]
    if not decisions:
        raise ValueError("need at least one decision")
    mask = _mask(decisions[0].a, destinations)
    a_avg = np.mean([d.a for d in decisions], axis=0)
    g_avg = np.mean([slack_value(d.r, d.a, mask) for d in decisions], axis=0)
    return float(augmented_value(utility_value(a_avg, mask), g_avg, mu, rho))


def feasibility_check(
    d: RoutingDecision,
    arrivals: np.ndarray,
    capacity: np.ndarray,
    tol: float = 1e-9,
    destinations: Sequence[int] | None = None,
) -> FeasibilityReport:
    """Largest violation of each constraint family, plus off-edge routing."""
    mask = _mask(d.a, destinations)
    g = slack_value(d.r, d.a, mask)
    capacity = np.asarray(capacity, dtype=float)
    off_edge = capacity <= 0
    load = d.r.sum(axis=-1)
    return FeasibilityReport(
        flow=float(np.maximum(-g, 0).max(initial=0.0)),
        minimum=float((mask * np.maximum(np.asarray(arrivals) - d.a, 0)).max(initial=0.0)),
        capacity=float(np.maximum(load - capacity, 0).max(initial=0.0)),
        support=max(float(np.abs(d.r[off_edge]).max(initial=0.0)), float(np.maximum(-d.r, 0).max(initial=0.0))),
        tol=tol,
    )
