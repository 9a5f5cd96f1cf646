"""State-augmented learning: offline training over random duals, online execution.

Training maximizes the batch mean of the augmented Lagrangian of a rollout,
where each batch element pairs a random network realization with duals drawn
from ``U(0, 1)``. The duals enter the policy as a second node feature next to
the mean arrival rates. Execution starts from zero duals and updates them
every ``T0`` steps from the window-averaged conservation slack.

Because the channel is constant within a rollout and the features only
change when the duals do, the network is evaluated once per dual window; the
admissions still follow each step's arrivals through the admission head.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tape as tp
from .gnn import AdamState, GnnParams, adam_step, init_params, policy, policy_gradient
from .num import LOG_FLOOR, augmented_value, slack_value, utility_value
from .topology import Topology, gen_random_geometric
from .traffic import FlowSet, make_flows, queue_update, sample_arrival_sequence

# separates the seed streams of training and test realizations
TEST_STREAM = 1_000_003


@dataclass
class TrainConfig:
    """Hyper-parameters of training and execution.

    Attributes:
        epochs: passes over the training samples.
        batch_size: realizations per gradient step.
        horizon: rollout length ``T``.
        window: dual update period ``T0``.
        eta_theta: Adam learning rate.
        rho0, rho_decay: penalty ``rho0 * rho_decay**epoch``.
        dual_low, dual_high: support of the uniform training duals.
        eta_mu: dual step during execution.
        train_samples, test_samples: realizations per split.
        nodes, flows, k, rate: network family (``rate`` is the mean arrival).
        features, taps: network architecture.
        seed: master seed.
    """

    epochs: int = 40
    batch_size: int = 16
    horizon: int = 100
    window: int = 5
    eta_theta: float = 0.005
    rho0: float = 0.005
    rho_decay: float = 0.97
    dual_low: float = 0.0
    dual_high: float = 1.0
    eta_mu: float = 0.5
    train_samples: int = 128
    test_samples: int = 16
    nodes: int = 10
    flows: int = 5
    k: int = 4
    rate: float = 0.1
    features: tuple[int, ...] = (2, 32, 8)
    taps: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        self.features = tuple(self.features)
        if self.window < 1 or self.horizon % self.window:
            raise ValueError(f"window {self.window} must divide horizon {self.horizon}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        for name in ("eta_theta", "rho0", "rho_decay", "eta_mu"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.dual_high > self.dual_low >= 0:
            raise ValueError("need 0 <= dual_low < dual_high")
        if self.features[0] != 2:
            raise ValueError("the policy takes two input features (mean rate, dual)")

    def rho(self, epoch: int) -> float:
        return self.rho0 * self.rho_decay**epoch

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["features"] = list(self.features)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class Realization:
    """One network state: topology, flows and the seed of its arrival stream."""

    topology: Topology
    flows: FlowSet
    arrival_seed: int


TopologySource = Callable[[int], Topology]


def knn_source(n: int, k: int, seed: int) -> TopologySource:
    """Fresh random geometric graph per sample index."""
    return lambda i: gen_random_geometric(n, k, int(np.random.default_rng([seed, i]).integers(2**31)))


def fixed_source(topology: Topology) -> TopologySource:
    return lambda i: topology


def realization(source: TopologySource, index: int, K: int, rate: float, seed: int) -> Realization:
    """Realization ``index`` of the stream ``seed``; depends only on ``(seed, index)``."""
    topo = source(index)
    flow_seed, arrival_seed = np.random.default_rng([seed, index, 7]).integers(2**31, size=2)
    return Realization(topo, make_flows(topo.n, K, rate, int(flow_seed)), int(arrival_seed))


def realizations(source: TopologySource, count: int, K: int, rate: float, seed: int) -> list[Realization]:
    """The first ``count`` realizations of the stream ``seed``."""
    return [realization(source, i, K, rate, seed) for i in range(count)]


def train_realizations(cfg: TrainConfig, source: TopologySource | None = None) -> list[Realization]:
    source = source or knn_source(cfg.nodes, cfg.k, cfg.seed)
    return realizations(source, cfg.train_samples, cfg.flows, cfg.rate, cfg.seed)


def held_out_realizations(cfg: TrainConfig, source: TopologySource | None = None, count: int | None = None) -> list[Realization]:
    seed = cfg.seed + TEST_STREAM
    source = source or knn_source(cfg.nodes, cfg.k, seed)
    return realizations(source, cfg.test_samples if count is None else count, cfg.flows, cfg.rate, seed)


def held_out_realization(cfg: TrainConfig, index: int, source: TopologySource | None = None) -> Realization:
    """Held-out realization ``index``; equals ``held_out_realizations(cfg)[index]``."""
    seed = cfg.seed + TEST_STREAM
    source = source or knn_source(cfg.nodes, cfg.k, seed)
    return realization(source, index, cfg.flows, cfg.rate, seed)


def sample_duals(B: int, n: int, K: int, seed: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """``(B, n, K)`` duals, i.i.d. ``U[low, high)``; element ``b`` depends only on ``(seed, b)``."""
    return np.stack([np.random.default_rng([seed, b]).uniform(low, high, size=(n, K)) for b in range(B)])


def features(flows: FlowSet, mu: np.ndarray) -> np.ndarray:
    """``(n, K, 2)`` node features: mean rate and dual, zero at destinations."""
    mask = flows.source_mask
    return np.stack([flows.mean_rates * mask, np.asarray(mu) * mask], axis=-1)


# -- traces --------------------------------------------------------------------------


@dataclass
class ExecutionTrace:
    """Everything observed during one rollout.

    Attributes:
        arrivals, admissions, net: ``(T, n, K)`` per step; ``net`` is outflow
            minus inflow of the routing in force.
        queues: ``(T + 1, n, K)``.
        duals: ``(M + 1, n, K)``, the dual in force for each window plus the last update.
        window_slack: ``(M, n, K)`` window-averaged conservation slack.
        window_utility: ``(M,)`` utility of the window-averaged admissions.
        routing: per-window ``(n, n, K)`` routing (may be empty).
        destinations: ``(K,)``.
        window: steps per window ``T0``.
    """

    arrivals: np.ndarray
    admissions: np.ndarray
    net: np.ndarray
    queues: np.ndarray
    duals: np.ndarray
    window_slack: np.ndarray
    window_utility: np.ndarray
    routing: list[np.ndarray] = field(default_factory=list)
    destinations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    window: int = 1

    @property
    def T(self) -> int:
        return self.arrivals.shape[0]

    @property
    def M(self) -> int:
        return self.window_slack.shape[0]

    @property
    def mask(self) -> np.ndarray:
        mask = np.ones(self.arrivals.shape[1:])
        mask[self.destinations, np.arange(self.destinations.size)] = 0.0
        return mask

    def delivered(self) -> np.ndarray:
        """Per-step admissions the routing carries: ``max(A, min(a, net))``."""
        return self.mask * np.maximum(self.arrivals, np.minimum(self.admissions, self.net))

    def utility(self) -> float:
        """Utility of the time-averaged admissions."""
        return float(np.sum(self.mask * np.log(LOG_FLOOR + self.admissions.mean(axis=0))))

    def delivered_utility(self) -> float:
        """Utility of the time-averaged delivered admissions."""
        return float(np.sum(self.mask * np.log(LOG_FLOOR + self.delivered().mean(axis=0))))

    def total_queue(self) -> np.ndarray:
        """``(T + 1,)`` total queued packets."""
        return self.queues.sum(axis=(1, 2))

    def mean_total_queue(self) -> float:
        """Time-averaged total queue over steps ``1 .. T``."""
        return float(self.total_queue()[1:].mean()) if self.T else 0.0

    def final_dual_norm(self) -> float:
        return float(np.linalg.norm(self.duals[-1]))

    def dual_changes(self) -> np.ndarray:
        """``(M,)`` max-norm change of the dual at each update."""
        return np.abs(np.diff(self.duals, axis=0)).max(axis=(1, 2))

    def write_csv(self, step_path: str | Path, window_path: str | Path) -> None:
        """Per-step rows ``(t, node, flow, a, queue)``; per-window ``(m, node, flow, mu, slack)``."""
        with open(step_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "node", "flow", "a", "queue"])
            for t in range(self.T):
                for i, k in np.ndindex(self.arrivals.shape[1:]):
                    w.writerow([t, i, k, repr(float(self.admissions[t, i, k])), repr(float(self.queues[t + 1, i, k]))])
        with open(window_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "node", "flow", "mu", "slack"])
            for m in range(self.M):
                for i, k in np.ndindex(self.arrivals.shape[1:]):
                    w.writerow([m, i, k, repr(float(self.duals[m, i, k])), repr(float(self.window_slack[m, i, k]))])


# -- rollouts ------------------------------------------------------------------------


def _stack(reals: Sequence[Realization], mus: np.ndarray, T: int):
    S = np.stack([r.topology.gso for r in reals])
    C = np.stack([r.topology.capacity for r in reals])
    X = np.stack([features(r.flows, mu) for r, mu in zip(reals, mus)])
    mask = np.stack([r.flows.source_mask for r in reals])
    A_bar = np.stack([sample_arrival_sequence(r.flows, r.arrival_seed, T).mean(axis=0) for r in reals])
    return S, C, X, mask, A_bar


def batch_lagrangian(tensors, params: GnnParams, reals: Sequence[Realization], mus: np.ndarray, T: int, rho: float):
    """Batch mean of the rollout augmented Lagrangian (tape-aware in ``tensors``).

    With constant channel and duals the routing is constant over the rollout,
    so the time averages are ``a_bar = mean_t A(t) + increment`` and
    ``g_bar = out - in - a_bar``.
    """
    S, C, X, mask, A_bar = _stack(reals, mus, T)
    out = policy(params, S, C, X, A_bar, mask=mask, tensors=tensors)
    g_bar = slack_value(out.r, out.a, mask)
    values = augmented_value(utility_value(out.a, mask), g_bar, mus * mask, rho)
    return tp.mean(values)


def _run_windows(
    params: GnnParams,
    topology: Topology,
    flows: FlowSet,
    arrivals: np.ndarray,
    window: int,
    next_dual: Callable[[np.ndarray, np.ndarray], np.ndarray],
    mu0: np.ndarray,
) -> ExecutionTrace:
    T, n, K = arrivals.shape
    mask = flows.source_mask
    S, C = topology.gso, topology.capacity
    M = T // window
    q = np.zeros((T + 1, n, K))
    adm = np.zeros((T, n, K))
    net = np.zeros((T, n, K))
    duals = [mu0 * mask]
    slack, util, routing = [], [], []
    for m in range(M):
        out = policy(params, S, C, features(flows, duals[-1]), np.zeros((n, K)), mask=mask)
        r, inc = out.r, out.increment
        flow = r.sum(axis=1) - r.sum(axis=0)
        steps = range(m * window, (m + 1) * window)
        for t in steps:
            adm[t] = arrivals[t] + inc
            net[t] = flow
            q[t + 1] = queue_update(q[t], arrivals[t], r, flows.destinations)
        g_bar = mask * (flow - adm[steps.start : steps.stop].mean(axis=0))
        slack.append(g_bar)
        util.append(float(np.sum(mask * np.log(LOG_FLOOR + adm[steps.start : steps.stop].mean(axis=0)))))
        routing.append(r)
        duals.append(mask * next_dual(duals[-1], g_bar))
    return ExecutionTrace(
        arrivals=arrivals,
        admissions=adm,
        net=net,
        queues=q,
        duals=np.stack(duals),
        window_slack=np.stack(slack) if slack else np.zeros((0, n, K)),
        window_utility=np.array(util),
        routing=routing,
        destinations=flows.destinations.copy(),
        window=window,
    )


def rollout_lagrangian(
    theta: GnnParams, mu: np.ndarray, topology: Topology, flows: FlowSet, T: int, rho: float, seed: int
) -> tuple[float, ExecutionTrace]:
    """Augmented Lagrangian of one ``T``-step rollout at fixed duals, with its trace."""
    if T < 1 or rho <= 0:
        raise ValueError("need T >= 1 and rho > 0")
    arrivals = sample_arrival_sequence(flows, seed, T)
    mu = np.asarray(mu, dtype=float) * flows.source_mask
    trace = _run_windows(theta, topology, flows, arrivals, T, lambda m, g: m, mu)
    a_bar = trace.admissions.mean(axis=0)
    g_bar = trace.window_slack[0]
    value = augmented_value(utility_value(a_bar, flows.source_mask), g_bar, mu, rho)
    return float(value), trace


def dual_update(mu: np.ndarray, g_window: np.ndarray, eta_mu: float) -> np.ndarray:
    """Projected dual step ``[mu - eta_mu * g_window]^+``."""
    return np.maximum(np.asarray(mu, dtype=float) - eta_mu * np.asarray(g_window, dtype=float), 0.0)


def execute(
    theta: GnnParams,
    topology: Topology,
    flows: FlowSet,
    T: int = 100,
    T0: int = 5,
    eta_mu: float = 0.5,
    seed: int = 0,
) -> ExecutionTrace:
    """Online execution: ``mu_0 = 0``, then ``mu <- [mu - eta_mu g_window]^+`` every ``T0`` steps."""
    if T0 < 1 or T % T0:
        raise ValueError(f"T0={T0} must divide T={T}")
    if not eta_mu > 0:
        raise ValueError("eta_mu must be positive")
    arrivals = sample_arrival_sequence(flows, seed, T)
    return _run_windows(
        theta,
        topology,
        flows,
        arrivals,
        T0,
        lambda mu, g: dual_update(mu, g, eta_mu),
        np.zeros((flows.n, flows.K)),
    )


def execute_realization(theta: GnnParams, real: Realization, cfg: TrainConfig) -> ExecutionTrace:
    return execute(theta, real.topology, real.flows, cfg.horizon, cfg.window, cfg.eta_mu, real.arrival_seed)


# -- training ------------------------------------------------------------------------


@dataclass
class TrainResult:
    """Final parameters, optimizer state and one history row per gradient step."""

    params: GnnParams
    adam: AdamState
    history: list[dict]

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "batch", "rho", "lagrangian"])
            for row in self.history:
                w.writerow([row["step"], row["epoch"], row["batch"], repr(row["rho"]), repr(row["lagrangian"])])

    def epoch_means(self) -> np.ndarray:
        epochs = sorted({row["epoch"] for row in self.history})
        return np.array([np.mean([r["lagrangian"] for r in self.history if r["epoch"] == e]) for e in epochs])


def train(
    cfg: TrainConfig,
    source: TopologySource | None = None,
    samples: Sequence[Realization] | None = None,
    params: GnnParams | None = None,
    progress: Callable[[dict], None] | None = None,
    fixed_duals: bool = False,
) -> TrainResult:
    """Adam ascent on the batch-mean augmented Lagrangian over random duals.

    Args:
        cfg: hyper-parameters.
        source: topology per training sample (random k-NN graphs by default).
        samples: explicit training realizations (overrides ``source``).
        params: starting point (fresh initialization by default).
        progress: called with each history row.
        fixed_duals: reuse the first batch's duals every step (overfitting checks).
    """
    reals = list(samples) if samples is not None else train_realizations(cfg, source)
    if not reals:
        raise ValueError("no training samples")
    params = params.copy() if params is not None else init_params(cfg.features, cfg.taps, cfg.seed)
    adam = AdamState.zeros_like(params)
    history: list[dict] = []
    batches = max(1, len(reals) // cfg.batch_size)
    B = min(cfg.batch_size, len(reals))
    n, K = reals[0].topology.n, reals[0].flows.K
    for epoch in range(cfg.epochs):
        rho = cfg.rho(epoch)
        order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(reals))
        for b in range(batches):
            batch = [reals[i] for i in order[b * B : (b + 1) * B]]
            dual_seed = cfg.seed if fixed_duals else int(np.random.default_rng([cfg.seed, epoch, b, 2]).integers(2**31))
            mus = sample_duals(len(batch), n, K, dual_seed, cfg.dual_low, cfg.dual_high)
            value, grads = policy_gradient(
                lambda ts: batch_lagrangian(ts, params, batch, mus, cfg.horizon, rho), params
            )
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite Lagrangian at epoch {epoch}, batch {b}")
            params, adam = adam_step(params, grads, adam, cfg.eta_theta)
            row = {"step": len(history), "epoch": epoch, "batch": b, "rho": rho, "lagrangian": value}
            history.append(row)
            if progress is not None:
                progress(row)
    return TrainResult(params, adam, history)
