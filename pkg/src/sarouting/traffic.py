"""Packet arrivals and per-node, per-flow queue dynamics.

All matrices are laid out ``(n, K)``: one row per node, one column per flow.
Arrivals are fluid: ``A[i, k](t) ~ Uniform[0, 2 * mean[i, k]]``, i.i.d. over
nodes, flows and time, so the mean is exact and the support bounded.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class FlowSet:
    """Flow destinations and mean arrival rates.

    Attributes:
        destinations: ``(K,)`` destination node of each flow.
        mean_rates: ``(n, K)`` mean arrivals per step; zero at each flow's destination.
    """

    destinations: np.ndarray
    mean_rates: np.ndarray

    def __post_init__(self) -> None:
        dest = np.array(self.destinations, dtype=np.int64).reshape(-1)
        rates = np.array(self.mean_rates, dtype=np.float64)
        if rates.ndim != 2 or rates.shape[1] != dest.size:
            raise ValueError(f"mean_rates must be (n, {dest.size}), got {rates.shape}")
        n = rates.shape[0]
        if np.any((dest < 0) | (dest >= n)):
            raise ValueError(f"destinations must lie in [0, {n})")
        if np.any(rates < 0):
            raise ValueError("mean rates must be nonnegative")
        if np.any(rates[dest, np.arange(dest.size)] != 0):
            raise ValueError("a flow's destination must have zero mean rate for that flow")
        dest.setflags(write=False)
        rates.setflags(write=False)
        object.__setattr__(self, "destinations", dest)
        object.__setattr__(self, "mean_rates", rates)

    @property
    def n(self) -> int:
        return self.mean_rates.shape[0]

    @property
    def K(self) -> int:
        return self.destinations.size

    @property
    def source_mask(self) -> np.ndarray:
        """``(n, K)`` float mask, 0 at each flow's destination and 1 elsewhere."""
        return destination_mask(self.n, self.destinations)

    def with_rate(self, rate: float) -> "FlowSet":
        return FlowSet(self.destinations, self.source_mask * rate)

    def to_dict(self) -> dict:
        return {"destinations": self.destinations.tolist(), "mean_rates": self.mean_rates.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "FlowSet":
        return cls(np.asarray(doc["destinations"]), np.asarray(doc["mean_rates"], dtype=float))


def destination_mask(n: int, destinations: Sequence[int]) -> np.ndarray:
    dest = np.asarray(destinations, dtype=np.int64)
    mask = np.ones((n, dest.size))
    mask[dest, np.arange(dest.size)] = 0.0
    return mask


def make_flows(n: int, K: int, rate: float, seed: int, spread: float = 0.0) -> FlowSet:
    """Random destinations (distinct while ``K <= n``) and mean rates.

    Every non-destination mean rate equals ``rate``, or is drawn from
    ``Uniform[rate * (1 - spread), rate * (1 + spread)]`` when ``spread > 0``.
    """
    if rate < 0 or not 0 <= spread <= 1:
        raise ValueError("rate must be >= 0 and spread in [0, 1]")
    rng = np.random.default_rng([seed, 0xF10])
    dest = rng.choice(n, size=K, replace=K > n)
    rates = np.full((n, K), float(rate))
    if spread > 0:
        rates *= rng.uniform(1 - spread, 1 + spread, size=(n, K))
    return FlowSet(dest, rates * destination_mask(n, dest))


def sample_arrivals(flows: FlowSet, seed: int, t: int) -> np.ndarray:
    """Arrival matrix for step ``t``; identical for identical ``(seed, t)``."""
    rng = np.random.default_rng([seed, t])
    return 2.0 * flows.mean_rates * rng.uniform(size=flows.mean_rates.shape)


def sample_arrival_sequence(flows: FlowSet, seed: int, T: int) -> np.ndarray:
    """``(T, n, K)`` stack of :func:`sample_arrivals` for ``t = 0 .. T-1``."""
    if T == 0:
        return np.zeros((0, flows.n, flows.K))
    return np.stack([sample_arrivals(flows, seed, t) for t in range(T)])


def _check_shapes(q: np.ndarray, a: np.ndarray, r: np.ndarray) -> None:
    n, K = q.shape
    if a.shape != (n, K) or r.shape != (n, n, K):
        raise ValueError(f"shape mismatch: queue {q.shape}, arrivals {a.shape}, routing {r.shape}")


def queue_update(
    q: np.ndarray, arrivals: np.ndarray, r: np.ndarray, destinations: Sequence[int]
) -> np.ndarray:
    """One step of the queue recursion.

    ``q'[i,k] = max(0, q[i,k] + A[i,k] + sum_j r[j,i,k] - sum_j r[i,j,k])``,
    with each flow's destination queue reset to zero (delivered packets leave).

    Args:
        q: ``(n, K)`` current queues.
        arrivals: ``(n, K)`` packets generated this step.
        r: ``(n, n, K)`` routing rates; ``r[i, j, k]`` is sent from i to j.
        destinations: ``(K,)`` destination of each flow.
    """
    q, arrivals, r = (np.asarray(x, dtype=float) for x in (q, arrivals, r))
    _check_shapes(q, arrivals, r)
    inflow = r.sum(axis=0)
    outflow = r.sum(axis=1)
    nxt = np.maximum(q + arrivals + inflow - outflow, 0.0)
    return nxt * destination_mask(q.shape[0], destinations)


def rollout_queues(
    q0: np.ndarray,
    arrivals: Sequence[np.ndarray],
    decisions: Sequence[np.ndarray],
    destinations: Sequence[int],
) -> list[np.ndarray]:
    """Iterate :func:`queue_update`; returns all ``T + 1`` states."""
    if len(arrivals) != len(decisions):
        raise ValueError(f"{len(arrivals)} arrival matrices but {len(decisions)} routing decisions")
    states = [np.asarray(q0, dtype=float)]
    for a, r in zip(arrivals, decisions):
        states.append(queue_update(states[-1], a, r, destinations))
    return states


def write_queue_csv(path: str | Path, queues: Sequence[np.ndarray]) -> None:
    """Write queue trajectories as rows ``(t, node, flow, queue_length)``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "flow", "queue_length"])
        for t, q in enumerate(queues):
            for i, k in np.ndindex(q.shape):
                w.writerow([t, i, k, repr(float(q[i, k]))])
