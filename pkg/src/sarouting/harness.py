"""Declarative experiment runner: solver comparisons, sweeps, transfer, Zoo graphs.

Each :class:`ExperimentConfig` names one experiment kind. Running it writes a
``metrics.csv`` with one row per (method, setting, seed), per-run traces and
SVG plots into the output directory. Timing lives in a separate
``timings.csv`` so the remaining files are bit-identical across reruns.
"""

from __future__ import annotations

import csv
import json
import math
import time
from importlib import resources
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .gnn import GnnParams, load_checkpoint, save_checkpoint
from .solvers import RoutingProblem, SolverState, admm_iteration, admm_solve, dual_descent_solve, mom_solve
from .state_augmented import (
    ExecutionTrace,
    Realization,
    TrainConfig,
    execute_realization,
    fixed_source,
    knn_source,
    held_out_realization,
    train,
)
from .svg import write_line_plot
from .topology import Topology, gen_random_geometric, load_graphml, perturb
from .traffic import FlowSet, make_flows, queue_update, sample_arrival_sequence, sample_arrivals

KINDS = (
    "solver-compare",
    "sa-vs-admm",
    "node-sweep",
    "flow-sweep",
    "traffic-sweep",
    "perturbation",
    "transfer-nodes",
    "transfer-flows",
    "zoo",
    "dual-trace",
)

METRIC_FIELDS = ("experiment", "method", "setting", "seed", "utility", "delivered_utility", "mean_queue", "final_dual_norm", "status")


@dataclass
class AdmmConfig:
    """Online ADMM baseline: warm-started iterations per time step."""

    iters_per_step: int = 1
    rho: float = 0.5
    inner_iters: int = 50
    eta_primal: float = 0.02


@dataclass
class ExperimentConfig:
    """One experiment.

    Attributes:
        kind: one of :data:`KINDS`.
        name: experiment id used in the metrics table.
        seeds: evaluation seeds; for learned methods seed ``s`` selects test
            realization ``s``, for solver comparisons it seeds the instance.
        out: output directory.
        train_config: optional TrainConfig JSON file used as the base.
        train: :class:`TrainConfig` fields overriding the base.
        admm: :class:`AdmmConfig` fields.
        node_sizes, flow_counts, rates: sweep values.
        iters: solver iterations for ``solver-compare``.
        fraction, shift: perturbation parameters.
        zoo: GraphML files for ``zoo``.
        checkpoint: trained parameters to reuse instead of training.
        matched: also train a size-matched model for each transfer setting.
    """

    kind: str
    name: str = ""
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "results"
    train_config: str | None = None
    train: dict = field(default_factory=dict)
    admm: dict = field(default_factory=dict)
    node_sizes: list[int] = field(default_factory=lambda: [10, 50, 100])
    flow_counts: list[int] = field(default_factory=lambda: [5, 10, 15])
    rates: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.15, 0.2, 0.25])
    iters: int = 100
    fraction: float = 0.5
    shift: float = 0.2
    zoo: list[str] = field(default_factory=list)
    checkpoint: str | None = None
    matched: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; choose from {', '.join(KINDS)}")
        self.name = self.name or self.kind
        self.seeds = [int(s) for s in self.seeds]
        AdmmConfig(**self.admm)
        refs = self.zoo + [p for p in (self.checkpoint, self.train_config) if p]
        missing = [p for p in refs if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"referenced files do not exist: {', '.join(missing)}")
        self.training  # validates the merged training config

    @property
    def training(self) -> TrainConfig:
        """Base TrainConfig file (if any) with ``train`` overrides applied."""
        base = TrainConfig.load(self.train_config).to_dict() if self.train_config else {}
        return TrainConfig.from_dict({**base, **self.train})

    @property
    def admm_config(self) -> AdmmConfig:
        return AdmmConfig(**self.admm)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict, base: str | Path | None = None) -> "ExperimentConfig":
        """Build from JSON; relative file paths resolve against ``base``."""
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        doc = dict(doc)
        if base is not None:
            root = Path(base)
            doc["zoo"] = [str(root / p) for p in doc.get("zoo", [])]
            for key in ("checkpoint", "train_config"):
                if doc.get(key):
                    doc[key] = str(root / doc[key])
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), base=path.parent)


@dataclass
class MetricsRow:
    experiment: str
    method: str
    setting: str
    seed: int
    utility: float = math.nan
    delivered_utility: float = math.nan
    mean_queue: float = math.nan
    final_dual_norm: float = math.nan
    status: str = "ok"
    wall_ms: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.experiment, self.method, self.setting, self.seed)


@dataclass
class MetricsTable:
    """Rows of per-run metrics, kept sorted by ``(experiment, method, setting, seed)``."""

    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, row: MetricsRow) -> None:
        self.rows.append(row)
        self.rows.sort(key=lambda r: r.key)

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, method: str | None = None, setting: str | None = None) -> list[MetricsRow]:
        return [r for r in self.rows if (method is None or r.method == method) and (setting is None or r.setting == setting)]

    def values(self, column: str, method: str | None = None, setting: str | None = None) -> np.ndarray:
        return np.array([getattr(r, column) for r in self.select(method, setting)], dtype=float)

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.rows)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_FIELDS)
            for r in self.rows:
                w.writerow([_cell(getattr(r, f)) for f in METRIC_FIELDS])

    def write_timings(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["experiment", "method", "setting", "seed", "wall_ms"])
            for r in self.rows:
                w.writerow([r.experiment, r.method, r.setting, r.seed, f"{r.wall_ms:.3f}"])

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsTable":
        table = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                table.add(
                    MetricsRow(
                        rec["experiment"],
                        rec["method"],
                        rec["setting"],
                        int(rec["seed"]),
                        *(float(rec[f]) for f in METRIC_FIELDS[4:8]),
                        status=rec["status"],
                    )
                )
        return table


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# -- baselines ------------------------------------------------------------------------


def admm_online(topology: Topology, flows: FlowSet, T: int, seed: int, cfg: AdmmConfig | None = None) -> ExecutionTrace:
    """ADMM tracking each step's problem, warm-started from the previous step.

    At step ``t`` the minimum admissions are that step's arrivals; the
    resulting routing drives the queues exactly as the learned policy's does.
    """
    cfg = cfg or AdmmConfig()
    arrivals = sample_arrival_sequence(flows, seed, T)
    n, K = flows.n, flows.K
    q = np.zeros((T + 1, n, K))
    adm = np.zeros((T, n, K))
    net = np.zeros((T, n, K))
    state = None
    for t in range(T):
        p = RoutingProblem(topology.capacity, arrivals[t], flows.destinations)
        if state is None:
            state = SolverState.initial(p, cfg.rho)
        state.a = p.project_a(state.a)
        for _ in range(cfg.iters_per_step):
            admm_iteration(p, state, cfg.rho, cfg.inner_iters, cfg.eta_primal)
        adm[t], net[t] = state.a, p.net(state.x)
        q[t + 1] = queue_update(q[t], arrivals[t], p.dense(state.x), flows.destinations)
    duals = np.zeros((1, n, K)) if state is None else (cfg.rho * state.mu)[None]
    return ExecutionTrace(
        arrivals, adm, net, q, duals, np.zeros((0, n, K)), np.zeros(0), [], flows.destinations.copy(), 1
    )


# -- runner ----------------------------------------------------------------------------


class _Run:
    """Shared state of one :func:`run_experiment` call."""

    def __init__(self, cfg: ExperimentConfig, log: Callable[[str], None] | None) -> None:
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.table = MetricsTable()
        self.log = log or (lambda msg: None)
        self.models: dict[str, GnnParams | Exception] = {}

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, method: str, setting: str, seed: int, fn: Callable[[], ExecutionTrace | dict]) -> ExecutionTrace | dict | None:
        """Run ``fn`` and add its metrics row; failures become error rows."""
        row = MetricsRow(self.cfg.name, method, setting, seed)
        start = time.perf_counter()
        result = None
        try:
            result = fn()
            metrics = _trace_metrics(result) if isinstance(result, ExecutionTrace) else result
            for k, v in metrics.items():
                setattr(row, k, float(v))
            if not (math.isfinite(row.utility) and math.isfinite(row.delivered_utility)):
                row.status = "error: non-finite utility"
        except Exception as exc:  # recorded per row, the run goes on
            row.status = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
            result = None
        row.wall_ms = 1e3 * (time.perf_counter() - start)
        self.table.add(row)
        self.log(f"{method} {setting} seed={seed}: {row.status}")
        return result

    def model(self, tag: str, tcfg: TrainConfig, source=None) -> GnnParams | Exception:
        """Train (or load) the model for ``tag``, caching and checkpointing it.

        A failure is returned (and cached) instead of raised so that the
        affected rows can record it while the other settings go on.
        """
        if tag in self.models:
            return self.models[tag]
        try:
            params = self._fit(tag, tcfg, source)
        except Exception as exc:  # recorded on the rows that need this model
            self.log(f"training {tag} failed: {exc}")
            params = exc
        self.models[tag] = params
        return params

    def _fit(self, tag: str, tcfg: TrainConfig, source) -> GnnParams:
        if self.cfg.checkpoint and not self.models:
            params, _, _ = load_checkpoint(self.cfg.checkpoint)
        else:
            self.log(f"training {tag}")
            res = train(tcfg, source=source)
            params = res.params
            res.write_history(self.path("training", f"{_safe(tag)}.csv"))
            save_checkpoint(self.path("models", f"{_safe(tag)}.json"), params, res.adam, meta={"train": tcfg.to_dict()})
            epochs = np.arange(len(res.epoch_means()))
            write_line_plot(
                self.path("plots", f"training-{_safe(tag)}.svg"),
                {"lagrangian": (epochs, res.epoch_means())},
                title=f"training {tag}",
                xlabel="epoch",
                ylabel="mean augmented Lagrangian",
            )
        return params


def _trace_metrics(trace: ExecutionTrace) -> dict:
    return {
        "utility": trace.utility(),
        "delivered_utility": trace.delivered_utility(),
        "mean_queue": trace.mean_total_queue(),
        "final_dual_norm": trace.final_dual_norm(),
    }


def _tag(**kv) -> str:
    return ",".join(f"{k}={v}" for k, v in kv.items())


def _test_real(tcfg: TrainConfig, seed: int, source=None) -> Callable[[], Realization]:
    """Deferred held-out realization, so that building it fails inside a row."""
    return lambda: held_out_realization(tcfg, seed, source)


def _run_policy(params: GnnParams | Exception, real: Callable[[], Realization], tcfg: TrainConfig) -> ExecutionTrace:
    if isinstance(params, Exception):
        raise RuntimeError(f"training failed: {type(params).__name__}: {params}")
    return execute_realization(params, real(), tcfg)


def _run_admm(run: _Run, real: Callable[[], Realization], tcfg: TrainConfig) -> ExecutionTrace:
    r = real()
    return admm_online(r.topology, r.flows, tcfg.horizon, r.arrival_seed, run.cfg.admm_config)


def _sa_and_admm(
    run: _Run, setting: str, params: GnnParams | Exception, real: Callable[[], Realization], tcfg: TrainConfig, seed: int
) -> None:
    trace = run.record("sa", setting, seed, lambda: _run_policy(params, real, tcfg))
    if trace is not None and seed == run.cfg.seeds[0]:
        _write_trace(run, f"sa-{setting}-{seed}", trace)
    run.record("admm", setting, seed, lambda: _run_admm(run, real, tcfg))


def _safe(tag: str) -> str:
    """Filename form of a setting tag: ``N=10,K=5`` becomes ``N10_K5``."""
    return tag.replace("=", "").replace(",", "_")


def _write_trace(run: _Run, tag: str, trace: ExecutionTrace) -> None:
    safe = _safe(tag)
    trace.write_csv(run.path("traces", f"{safe}-steps.csv"), run.path("traces", f"{safe}-windows.csv"))
    t = np.arange(trace.T + 1)
    write_line_plot(
        run.path("plots", f"queue-{safe}.svg"),
        {"total queue": (t, trace.total_queue())},
        title=f"queues {tag}",
        xlabel="t",
        ylabel="packets",
    )


def _solver_compare(run: _Run) -> None:
    tcfg = run.cfg.training
    setting = _tag(N=tcfg.nodes, K=tcfg.flows)
    for seed in run.cfg.seeds:
        topo = gen_random_geometric(tcfg.nodes, tcfg.k, seed)
        flows = make_flows(tcfg.nodes, tcfg.flows, tcfg.rate, seed)
        problem = RoutingProblem.from_flows(topo, flows, sample_arrivals(flows, seed, 0))
        curves = {}
        for method, solve in (("dd", dual_descent_solve), ("mom", mom_solve), ("admm", admm_solve)):
            holder = {}

            def fn(solve=solve, holder=holder):
                _, mu, traj = solve(problem, iters=run.cfg.iters, seed=seed)
                holder["traj"] = traj
                return {
                    "utility": traj.utility[-1],
                    "delivered_utility": traj.delivered_utility[-1],
                    "mean_queue": math.nan,
                    "final_dual_norm": float(np.linalg.norm(mu)),
                }

            run.record(method, setting, seed, fn)
            if "traj" in holder:
                holder["traj"].write_csv(run.path("trajectories", f"{method}-seed{seed}.csv"), timing=False)
                curves[method] = (holder["traj"].column("iteration"), holder["traj"].delivered_utility)
        write_line_plot(
            run.path("plots", f"solvers-seed{seed}.svg"),
            curves,
            title=f"solver comparison N={tcfg.nodes} K={tcfg.flows} seed={seed}",
            xlabel="iteration",
            ylabel="delivered utility",
        )


def _replace(tcfg: TrainConfig, **kw) -> TrainConfig:
    return TrainConfig(**{**tcfg.to_dict(), **kw})


def _sweep(run: _Run, key: str, values: Iterable) -> None:
    base = run.cfg.training
    for v in values:
        tcfg = _replace(base, **{key: v})
        setting = _tag(N=tcfg.nodes, K=tcfg.flows, rate=tcfg.rate)
        params = run.model(setting, tcfg)
        for seed in run.cfg.seeds:
            _sa_and_admm(run, setting, params, _test_real(tcfg, seed), tcfg, seed)


def _transfer(run: _Run, key: str, values: Iterable) -> None:
    base = run.cfg.training
    trained = _tag(N=base.nodes, K=base.flows)
    params = run.model(trained, base)
    for v in values:
        tcfg = _replace(base, **{key: v})
        setting = _tag(N=tcfg.nodes, K=tcfg.flows)
        matched = run.model(setting, tcfg) if run.cfg.matched else None
        for seed in run.cfg.seeds:
            real = _test_real(tcfg, seed)
            run.record("transfer", setting, seed, lambda: _run_policy(params, real, tcfg))
            if matched is not None:
                run.record("matched", setting, seed, lambda: _run_policy(matched, real, tcfg))


def _perturbation(run: _Run) -> None:
    tcfg = run.cfg.training
    setting = _tag(N=tcfg.nodes, K=tcfg.flows)
    params = run.model(setting, tcfg)
    for seed in run.cfg.seeds:
        real = _test_real(tcfg, seed)

        def moved(real=real, seed=seed) -> Realization:
            r = real()
            return Realization(perturb(r.topology, run.cfg.fraction, run.cfg.shift, seed), r.flows, r.arrival_seed)

        run.record("original", setting, seed, lambda: _run_policy(params, real, tcfg))
        run.record("perturbed", setting, seed, lambda: _run_policy(params, moved, tcfg))


def _zoo(run: _Run) -> None:
    base = run.cfg.training
    for path in run.cfg.zoo:
        topo = load_graphml(path)
        tcfg = _replace(base, nodes=topo.n)
        setting = topo.name or Path(path).stem
        params = run.model(setting, tcfg, source=fixed_source(topo))
        for seed in run.cfg.seeds:
            _sa_and_admm(run, setting, params, _test_real(tcfg, seed, fixed_source(topo)), tcfg, seed)


def _dual_trace(run: _Run) -> None:
    tcfg = run.cfg.training
    setting = _tag(N=tcfg.nodes, K=tcfg.flows)
    params = run.model(setting, tcfg)
    for seed in run.cfg.seeds:
        real = _test_real(tcfg, seed)
        trace = run.record("sa", setting, seed, lambda: _run_policy(params, real, tcfg))
        if trace is None:
            continue
        _write_trace(run, f"sa-{setting}-{seed}", trace)
        m = np.arange(trace.duals.shape[0])
        node_duals = trace.duals.mean(axis=2)
        write_line_plot(
            run.path("plots", f"duals-seed{seed}.svg"),
            {f"node {i}": (m, node_duals[:, i]) for i in range(node_duals.shape[1])},
            title=f"mean dual per node, seed {seed}",
            xlabel="window",
            ylabel="dual",
        )
        t = np.arange(trace.T + 1)
        node_queues = trace.queues.sum(axis=2)
        write_line_plot(
            run.path("plots", f"node-queues-seed{seed}.svg"),
            {f"node {i}": (t, node_queues[:, i]) for i in range(node_queues.shape[1])},
            title=f"queue per node, seed {seed}",
            xlabel="t",
            ylabel="packets",
        )


def run_experiment(cfg: ExperimentConfig, log: Callable[[str], None] | None = None) -> MetricsTable:
    """Run one experiment; returns its metrics and writes artifacts under ``cfg.out``.

    An empty seed list is a vacuous run: nothing is trained or written.
    """
    run = _Run(cfg, log)
    if not cfg.seeds:
        return run.table
    run.out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.training
    if cfg.kind == "solver-compare":
        _solver_compare(run)
    elif cfg.kind == "sa-vs-admm":
        params = run.model(_tag(N=tcfg.nodes, K=tcfg.flows), tcfg)
        for seed in cfg.seeds:
            _sa_and_admm(run, _tag(N=tcfg.nodes, K=tcfg.flows), params, _test_real(tcfg, seed), tcfg, seed)
    elif cfg.kind == "node-sweep":
        _sweep(run, "nodes", cfg.node_sizes)
    elif cfg.kind == "flow-sweep":
        _sweep(run, "flows", cfg.flow_counts)
    elif cfg.kind == "traffic-sweep":
        _sweep(run, "rate", cfg.rates)
    elif cfg.kind == "perturbation":
        _perturbation(run)
    elif cfg.kind == "transfer-nodes":
        _transfer(run, "nodes", cfg.node_sizes)
    elif cfg.kind == "transfer-flows":
        _transfer(run, "flows", cfg.flow_counts)
    elif cfg.kind == "zoo":
        _zoo(run)
    elif cfg.kind == "dual-trace":
        _dual_trace(run)
    run.table.write_csv(run.path("metrics.csv"))
    run.table.write_timings(run.path("timings.csv"))
    if cfg.kind in ("sa-vs-admm", "node-sweep", "flow-sweep", "traffic-sweep", "zoo"):
        ratios = relative_compare(run.table.select("sa"), run.table.select("admm"))
        write_ratio_csv(run.path("relative.csv"), ratios)
    (run.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return run.table


# -- comparison -------------------------------------------------------------------------


@dataclass
class RatioRow:
    """Across-seed median and interquartile band of SA / ADMM ratios for one setting."""

    setting: str
    metric: str
    median: float
    q25: float
    q75: float
    count: int


def _ratio(a: float, b: float) -> float:
    if a == b:
        return 1.0
    return a / b if b != 0 else math.inf


def relative_compare(sa_rows: Sequence[MetricsRow], admm_rows: Sequence[MetricsRow], utility: str = "delivered_utility") -> list[RatioRow]:
    """Per-setting SA / ADMM ratios of utility and mean queue.

    Both sides must cover the same ``(setting, seed)`` pairs. Utilities are
    usually negative, so a utility ratio above 1 means SA is *worse*.
    """
    sa = {(r.setting, r.seed): r for r in sa_rows}
    ad = {(r.setting, r.seed): r for r in admm_rows}
    for key in sa.keys() ^ ad.keys():
        side = "ADMM" if key in sa else "SA"
        raise ValueError(f"setting {key[0]!r} seed {key[1]} has no {side} result")
    out = []
    for setting in sorted({k[0] for k in sa}):
        keys = sorted(k for k in sa if k[0] == setting)
        for metric, col in (("utility", utility), ("queue", "mean_queue")):
            vals = np.array([_ratio(getattr(sa[k], col), getattr(ad[k], col)) for k in keys])
            q25, med, q75 = np.quantile(vals, [0.25, 0.5, 0.75])
            out.append(RatioRow(setting, metric, float(med), float(q25), float(q75), len(keys)))
    return out


def write_ratio_csv(path: str | Path, rows: Sequence[RatioRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "metric", "median", "q25", "q75", "count"])
        for r in rows:
            w.writerow([r.setting, r.metric, repr(r.median), repr(r.q25), repr(r.q75), r.count])


def minimal_config(kind: str, out: str | Path) -> ExperimentConfig:
    """Smallest meaningful configuration of ``kind`` (used for smoke tests)."""
    train_small = {"epochs": 1, "train_samples": 2, "batch_size": 2, "horizon": 10, "window": 5, "nodes": 5, "flows": 2, "features": [2, 4, 3], "taps": 2}
    return ExperimentConfig(
        kind=kind,
        seeds=[0],
        out=str(out),
        train=train_small,
        node_sizes=[5, 6],
        flow_counts=[2, 3],
        rates=[0.1],
        iters=3,
        admm={"inner_iters": 5},
        zoo=[str(bundled_zoo("Nsfnet"))] if kind == "zoo" else [],
    )


def bundled_zoo(name: str) -> Path:
    """GraphML file of a Topology Zoo network shipped with the package."""
    path = Path(str(resources.files("sarouting") / "data" / "zoo" / f"{name}.graphml"))
    if not path.exists():
        raise FileNotFoundError(f"no bundled Topology Zoo graph named {name!r}")
    return path
