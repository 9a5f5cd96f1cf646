"""Command-line interface: ``sarouting <command> [options]``.

Commands: ``gen`` (random topology JSON), ``train``, ``execute``, ``solve``
(classic solvers or the oracle), ``experiment``, ``plot`` (CSV to SVG) and
``inspect`` (checkpoint summary). ``--seed``, ``--out``, ``--config`` and
``--json`` are accepted before or after the command.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .gnn import load_checkpoint, save_checkpoint
from .harness import ExperimentConfig, run_experiment
from .oracle import oracle_solve
from .solvers import SOLVERS, RoutingProblem, solve
from .state_augmented import TrainConfig, execute, train
from .svg import csv_series, write_line_plot
from .topology import Topology, gen_random_geometric, load_graphml
from .traffic import make_flows, sample_arrivals


class CliError(Exception):
    """User-facing failure: printed without a traceback, exit status 1."""


def bundled(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``paper_default.json``."""
    return Path(str(resources.files("sarouting") / "configs" / name))


def resolve_config(path: str) -> Path:
    """``path`` if it exists, else the bundled config of that name."""
    p = Path(path)
    if p.exists():
        return p
    for candidate in (bundled(path), bundled(f"experiments/{path}")):
        if candidate.exists():
            return candidate
    raise CliError(f"config file not found: {path}")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=default, help="random seed (default 0)")
    p.add_argument("--out", default=default, help="output path (file or directory, per command)")
    p.add_argument("--config", default=default, help="JSON config file (bundled names also accepted)")
    p.add_argument("--json", action="store_true", default=default, help="print a machine-readable JSON result")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarouting", description=__doc__.splitlines()[0], parents=[_global_flags(True)])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = [_global_flags(True)]

    p = sub.add_parser("gen", parents=common, help="write a random k-NN topology as JSON")
    p.add_argument("--nodes", type=int, default=10)
    p.add_argument("--k", type=int, default=4)

    p = sub.add_parser("train", parents=common, help="train the state-augmented policy")
    p.add_argument("--epochs", type=int, help="override the config's epoch count")
    p.add_argument("--nodes", type=int, help="override the config's node count")
    p.add_argument("--flows", type=int, help="override the config's flow count")

    p = sub.add_parser("execute", parents=common, help="run a trained policy online")
    p.add_argument("checkpoint", help="checkpoint written by train")
    p.add_argument("--topology", help="topology JSON or GraphML (random k-NN graph by default)")
    p.add_argument("--nodes", type=int)
    p.add_argument("--flows", type=int)
    p.add_argument("--rate", type=float)
    p.add_argument("--horizon", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--eta-mu", type=float)

    p = sub.add_parser("solve", parents=common, help="solve one routing problem with a classic solver")
    p.add_argument("--solver", choices=sorted(SOLVERS) + ["oracle"], default="mom")
    p.add_argument("--nodes", type=int, default=10)
    p.add_argument("--flows", type=int, default=5)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--topology", help="topology JSON or GraphML instead of a random graph")

    p = sub.add_parser("experiment", parents=common, help="run an experiment config")
    p.add_argument("name", nargs="?", help="experiment config (path or bundled name); same as --config")

    p = sub.add_parser("plot", parents=common, help="render CSV columns as an SVG line plot")
    p.add_argument("csv", help="input CSV")
    p.add_argument("--x", help="x column (default: first column)")
    p.add_argument("--y", help="y column (default: second column)")
    p.add_argument("--group", help="column splitting rows into series")

    p = sub.add_parser("inspect", parents=common, help="summarize a checkpoint")
    p.add_argument("checkpoint")
    return parser


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(resolve_config(args.config)) if args.config else TrainConfig()
    over = {k: getattr(args, k) for k in ("epochs", "nodes", "flows", "rate", "horizon", "window", "eta_mu") if getattr(args, k, None) is not None}
    if args.seed is not None:
        over["seed"] = args.seed
    return TrainConfig.from_dict({**cfg.to_dict(), **over}) if over else cfg


def _load_topology(path: str) -> Topology:
    p = Path(path)
    if not p.exists():
        raise CliError(f"topology file not found: {path}")
    return load_graphml(p) if p.suffix.lower() == ".graphml" else Topology.load(p)


def cmd_gen(args) -> dict:
    seed = args.seed or 0
    topo = gen_random_geometric(args.nodes, args.k, seed)
    out = Path(args.out or f"topology-n{args.nodes}-seed{seed}.json")
    topo.save(out)
    return {"path": str(out), "nodes": topo.n, "edges": len(topo.edges) // 2, "connected": topo.is_connected()}


def cmd_train(args) -> dict:
    cfg = _train_config(args)
    out = Path(args.out or "train-out")
    out.mkdir(parents=True, exist_ok=True)
    log = (lambda row: None) if args.json else (lambda row: print(f"epoch {row['epoch']} batch {row['batch']} lagrangian {row['lagrangian']:.4f}", file=sys.stderr))
    res = train(cfg, progress=log)
    save_checkpoint(out / "checkpoint.json", res.params, res.adam, meta={"train": cfg.to_dict()})
    res.write_history(out / "training.csv")
    cfg.save(out / "config.json")
    means = res.epoch_means()
    return {
        "checkpoint": str(out / "checkpoint.json"),
        "history": str(out / "training.csv"),
        "epochs": len(means),
        "final_lagrangian": float(means[-1]) if len(means) else None,
    }


def cmd_execute(args) -> dict:
    path = Path(args.checkpoint)
    if not path.exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    params, _, meta = load_checkpoint(path)
    # the training config stored in the checkpoint is the default
    base = meta["train"] if not args.config and "train" in meta else _train_config(args).to_dict()
    over = {k: getattr(args, k) for k in ("nodes", "flows", "rate", "horizon", "window", "eta_mu") if getattr(args, k) is not None}
    cfg = TrainConfig.from_dict({**base, **over})
    seed = args.seed or 0
    topo = _load_topology(args.topology) if args.topology else gen_random_geometric(cfg.nodes, cfg.k, seed)
    flows = make_flows(topo.n, cfg.flows, cfg.rate, seed)
    trace = execute(params, topo, flows, cfg.horizon, cfg.window, cfg.eta_mu, seed)
    out = Path(args.out or "execute-out")
    out.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out / "steps.csv", out / "windows.csv")
    return {
        "steps": str(out / "steps.csv"),
        "windows": str(out / "windows.csv"),
        "utility": trace.utility(),
        "delivered_utility": trace.delivered_utility(),
        "mean_queue": trace.mean_total_queue(),
        "final_dual_norm": trace.final_dual_norm(),
    }


def cmd_solve(args) -> dict:
    seed = args.seed or 0
    topo = _load_topology(args.topology) if args.topology else gen_random_geometric(args.nodes, args.k, seed)
    flows = make_flows(topo.n, args.flows, args.rate, seed)
    problem = RoutingProblem.from_flows(topo, flows, sample_arrivals(flows, seed, 0))
    if args.solver == "oracle":
        decision, value = oracle_solve(problem, seed=seed)
        out = Path(args.out or "oracle.json")
        out.write_text(json.dumps({"utility": value, "admissions": decision.a.tolist()}, indent=2) + "\n", encoding="utf-8")
        return {"solver": "oracle", "path": str(out), "utility": value}
    _, _, traj = solve(problem, args.solver, iters=args.iters, seed=seed)
    out = Path(args.out or f"{args.solver}-trajectory.csv")
    traj.write_csv(out, timing=False)
    return {
        "solver": args.solver,
        "path": str(out),
        "iterations": len(traj.records),
        "utility": float(traj.utility[-1]),
        "delivered_utility": float(traj.delivered_utility[-1]),
    }


def cmd_experiment(args) -> dict:
    name = args.name or args.config
    if not name:
        raise CliError("experiment needs a config (positional name or --config)")
    cfg = ExperimentConfig.load(resolve_config(name))
    if args.out:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seeds = [args.seed]
    log = None if args.json else (lambda msg: print(msg, file=sys.stderr))
    table = run_experiment(cfg, log=log)
    failed = [r for r in table.rows if r.status != "ok"]
    result = {"experiment": cfg.name, "out": cfg.out, "rows": len(table), "failed": len(failed)}
    if failed:
        result["error"] = f"{len(failed)} of {len(table)} runs failed; see {Path(cfg.out) / 'metrics.csv'}"
    return result


def cmd_plot(args) -> dict:
    path = Path(args.csv)
    if not path.exists():
        raise CliError(f"CSV file not found: {args.csv}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = reader.fieldnames or []
    if len(header) < 2:
        raise CliError(f"{args.csv}: need at least two columns to plot")
    x, y = args.x or header[0], args.y or header[1]
    for col in (x, y, args.group):
        if col and col not in header:
            raise CliError(f"{args.csv}: no column {col!r} (columns: {', '.join(header)})")
    try:
        series = csv_series(rows, x, y, args.group)
    except ValueError as exc:
        raise CliError(f"{args.csv}: non-numeric value: {exc}") from None
    out = Path(args.out or path.with_suffix(".svg"))
    write_line_plot(out, series, title=path.stem, xlabel=x, ylabel=y)
    return {"path": str(out), "series": len(series), "points": len(rows)}


def cmd_inspect(args) -> dict:
    path = Path(args.checkpoint)
    if not path.exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    params, adam, meta = load_checkpoint(path)
    return {
        "path": str(path),
        "features": list(params.features),
        "taps": list(params.taps),
        "parameters": params.size(),
        "blocks": {name: list(np.shape(t)) for name, t in zip(params.block_names(), params.tensors())},
        "adam_step": adam.step if adam is not None else None,
        "meta": meta,
    }


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "execute": cmd_execute,
    "solve": cmd_solve,
    "experiment": cmd_experiment,
    "plot": cmd_plot,
    "inspect": cmd_inspect,
}


def _print(result: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
        return
    for k, v in result.items():
        if k != "error":
            print(f"{k}: {v}")


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point; returns the process exit status."""
    args = build_parser().parse_args(argv)
    for name in ("seed", "out", "config"):
        if not hasattr(args, name):
            setattr(args, name, None)
    args.json = bool(getattr(args, "json", False))
    try:
        result = COMMANDS[args.command](args)
    except CliError as exc:
        if args.json:
            print(json.dumps({"error": str(exc)}))
        print(f"sarouting {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"sarouting {args.command}: error: {exc}", file=sys.stderr)
        return 1
    _print(result, args.json)
    if "error" in result:
        print(f"sarouting {args.command}: error: {result['error']}", file=sys.stderr)
        return 1
    return 0


def main_exit() -> None:
    """Console-script wrapper around :func:`main`."""
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
