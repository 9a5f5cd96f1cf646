"""Communication-network graphs: generation, GraphML ingestion, perturbation.

A :class:`Topology` is immutable. Its dense capacity matrix doubles as the
graph shift operator once normalized by :func:`normalize_gso`.
"""

from __future__ import annotations

import json
import math
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

JSON_VERSION = 1
CAPACITY_LOW, CAPACITY_HIGH = 1.0, 2.0
GRAPHML_DEFAULT_CAPACITY = 1.0

_BANDWIDTH_KEYS = ("linkspeedraw", "bandwidth", "capacity", "bw", "linkspeed")


class GraphMLError(ValueError):
    """Raised when a GraphML document cannot be turned into a topology."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Topology:
    """Directed, neighbourhood-symmetric graph with per-edge capacities.

    Attributes:
        positions: ``(n, 2)`` node coordinates.
        capacity: ``(n, n)`` matrix, ``C[i, j] > 0`` iff ``(i, j)`` is an edge.
        k: neighbour count used to build the graph (``None`` for imported graphs).
        seed: generator seed (``None`` for imported graphs).
        name: free-form label.
    """

    positions: np.ndarray
    capacity: np.ndarray
    k: int | None = None
    seed: int | None = None
    name: str = ""

    def __post_init__(self) -> None:
        pos = _frozen(self.positions).reshape(-1, 2)
        cap = _frozen(self.capacity)
        n = pos.shape[0]
        if cap.shape != (n, n):
            raise ValueError(f"capacity must be {n}x{n}, got {cap.shape}")
        if np.any(cap < 0) or np.any(np.diag(cap) != 0):
            raise ValueError("capacity must be nonnegative with a zero diagonal")
        if not np.array_equal(cap > 0, (cap > 0).T):
            raise ValueError("edge set must be symmetric")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "capacity", cap)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @cached_property
    def adjacency(self) -> np.ndarray:
        """Boolean ``(n, n)`` edge mask."""
        adj = self.capacity > 0
        adj.setflags(write=False)
        return adj

    @cached_property
    def edges(self) -> tuple[tuple[int, int], ...]:
        """Directed edges in row-major order."""
        return tuple((int(i), int(j)) for i, j in zip(*np.nonzero(self.adjacency)))

    @property
    def num_undirected_edges(self) -> int:
        return len(self.edges) // 2

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    @cached_property
    def gso(self) -> np.ndarray:
        """Normalized capacity matrix used as graph shift operator."""
        s = normalize_gso(self.capacity)
        s.setflags(write=False)
        return s

    def is_connected(self) -> bool:
        if self.n == 0:
            return True
        seen = {0}
        frontier = [0]
        while frontier:
            i = frontier.pop()
            for j in self.neighbors(i):
                if j not in seen:
                    seen.add(j)
                    frontier.append(j)
        return len(seen) == self.n

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Topology):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.capacity, other.capacity)
            and self.k == other.k
            and self.seed == other.seed
        )

    __hash__ = None  # type: ignore[assignment]

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": JSON_VERSION,
            "n": self.n,
            "name": self.name,
            "k": self.k,
            "seed": self.seed,
            "positions": self.positions.tolist(),
            "edges": [[i, j, float(self.capacity[i, j])] for i, j in self.edges],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Topology":
        if doc.get("version") != JSON_VERSION:
            raise ValueError(f"unsupported topology document version {doc.get('version')!r}")
        n = int(doc["n"])
        cap = np.zeros((n, n))
        for i, j, c in doc["edges"]:
            cap[int(i), int(j)] = float(c)
        return cls(
            positions=np.asarray(doc["positions"], dtype=float).reshape(n, 2),
            capacity=cap,
            k=doc.get("k"),
            seed=doc.get("seed"),
            name=doc.get("name", ""),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Topology":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def normalize_gso(c: np.ndarray) -> np.ndarray:
    """Scale ``c`` by its maximum row sum (zero matrix stays zero)."""
    c = np.asarray(c, dtype=np.float64)
    peak = c.sum(axis=-1).max() if c.size else 0.0
    if peak <= 0:
        return np.zeros_like(c)
    s = c / peak
    # rounding can leave the largest row sum a few ulp above 1
    while s.sum(axis=-1).max() > 1.0:
        s = s * (1.0 - 2.0**-52)
    return s


def _edge_capacity(seed: int, i: int, j: int) -> float:
    lo, hi = min(i, j), max(i, j)
    rng = np.random.default_rng([seed, lo, hi])
    return float(rng.uniform(CAPACITY_LOW, CAPACITY_HIGH))


def knn_adjacency(positions: np.ndarray, k: int) -> np.ndarray:
    """Symmetrized k-nearest-neighbour adjacency (ties go to the lower index)."""
    n = positions.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    adj = np.zeros((n, n), dtype=bool)
    adj[np.repeat(np.arange(n), k), nearest.ravel()] = True
    return adj | adj.T


def _capacities(adj: np.ndarray, seed: int, keep: np.ndarray | None = None) -> np.ndarray:
    cap = np.zeros(adj.shape)
    for i, j in zip(*np.nonzero(np.triu(adj, 1))):
        if keep is not None and keep[i, j] > 0:
            c = keep[i, j]
        else:
            c = _edge_capacity(seed, int(i), int(j))
        cap[i, j] = cap[j, i] = c
    return cap


def gen_random_geometric(n: int, k: int, seed: int) -> Topology:
    """Uniform points in the unit disk wired to their ``k`` nearest neighbours.

    Each undirected edge carries capacity ``U[1, 2]``, drawn from a stream
    keyed on ``(seed, i, j)`` so an edge keeps its capacity under perturbation.
    """
    if n < 2:
        raise ValueError(f"need at least 2 nodes, got {n}")
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    radius = np.sqrt(rng.uniform(size=n))
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pos = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    adj = knn_adjacency(pos, k)
    return Topology(pos, _capacities(adj, seed), k=k, seed=seed, name=f"knn-{n}-{k}-{seed}")


def perturb(t: Topology, fraction: float, shift: float, seed: int) -> Topology:
    """Displace ``floor(fraction * n)`` random nodes and rewire with the original k.

    Each chosen node moves in a uniformly random direction by ``shift`` times
    its distance from the origin. Surviving edges keep their capacity; new
    edges draw one from the topology's capacity stream.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    if shift < 0:
        raise ValueError(f"shift must be nonnegative, got {shift}")
    if t.k is None or t.seed is None:
        raise ValueError("perturb needs a generated topology (k and seed known)")
    rng = np.random.default_rng(seed)
    count = int(math.floor(fraction * t.n))
    moved = rng.choice(t.n, size=count, replace=False)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=count)
    pos = np.array(t.positions)
    step = shift * np.linalg.norm(pos[moved], axis=1)
    pos[moved] += step[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    adj = knn_adjacency(pos, t.k)
    cap = _capacities(adj, t.seed, keep=t.capacity)
    return Topology(pos, cap, k=t.k, seed=t.seed, name=f"{t.name}+perturbed")


def permutation_matrix(perm: Sequence[int]) -> np.ndarray:
    """``P`` with ``P[perm[i], i] = 1`` so that ``P @ x`` relabels node i as perm[i]."""
    perm = np.asarray(perm)
    n = perm.size
    if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("perm must be a bijection on range(n)")
    p = np.zeros((n, n))
    p[perm, np.arange(n)] = 1.0
    return p


def permute(t: Topology, perm: Sequence[int]) -> Topology:
    """Relabel node ``i`` as ``perm[i]``."""
    perm = np.asarray(perm)
    if perm.size != t.n:
        raise ValueError(f"perm has {perm.size} entries for {t.n} nodes")
    p = permutation_matrix(perm)
    return Topology(p @ t.positions, p @ t.capacity @ p.T, k=t.k, seed=t.seed, name=t.name)


# -- GraphML -------------------------------------------------------------------


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _describe(el: ET.Element) -> str:
    attrs = " ".join(f'{k}="{v}"' for k, v in el.attrib.items())
    return f"<{_local(el.tag)} {attrs}>".replace(" >", ">")


def load_graphml(path: str | Path) -> Topology:
    """Read a GraphML file (e.g. from the Internet Topology Zoo).

    Undirected edges become both orientations; self-loops and parallel edges
    collapse. Edge bandwidth attributes, when any edge has one, are min-max
    rescaled into ``[1, 2]``; edges without one get capacity 1.0. Node
    coordinates come from ``Latitude``/``Longitude`` when every node has them
    (scaled into the unit disk), otherwise nodes sit on the unit circle.
    """
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise GraphMLError(f"{path}: malformed XML: {exc}") from exc
    except OSError as exc:
        raise GraphMLError(f"{path}: cannot read: {exc}") from exc
    if _local(root.tag) != "graphml":
        raise GraphMLError(f"{path}: root element is {_describe(root)}, expected <graphml>")

    keys: dict[str, str] = {}
    for el in root:
        if _local(el.tag) == "key":
            if "id" not in el.attrib:
                raise GraphMLError(f"{path}: key element without id: {_describe(el)}")
            keys[el.attrib["id"]] = el.attrib.get("attr.name", el.attrib["id"]).lower()
    graphs = [el for el in root if _local(el.tag) == "graph"]
    if len(graphs) != 1:
        raise GraphMLError(f"{path}: expected exactly one <graph>, found {len(graphs)}")
    graph = graphs[0]

    def data_of(el: ET.Element) -> dict[str, str]:
        out = {}
        for d in el:
            if _local(d.tag) == "data":
                out[keys.get(d.attrib.get("key", ""), d.attrib.get("key", ""))] = (d.text or "").strip()
        return out

    index: dict[str, int] = {}
    coords: list[tuple[float, float] | None] = []
    for el in graph:
        if _local(el.tag) != "node":
            continue
        node_id = el.attrib.get("id")
        if node_id is None:
            raise GraphMLError(f"{path}: node element without id: {_describe(el)}")
        if node_id in index:
            raise GraphMLError(f"{path}: duplicate node id in {_describe(el)}")
        index[node_id] = len(index)
        d = data_of(el)
        try:
            coords.append((float(d["longitude"]), float(d["latitude"])))
        except (KeyError, ValueError):
            coords.append(None)

    n = len(index)
    bandwidth: dict[tuple[int, int], float] = {}
    undirected: set[tuple[int, int]] = set()
    for el in graph:
        if _local(el.tag) != "edge":
            continue
        try:
            s, t = index[el.attrib["source"]], index[el.attrib["target"]]
        except KeyError as exc:
            raise GraphMLError(f"{path}: edge references unknown node {exc} in {_describe(el)}") from None
        if s == t:
            continue
        pair = (min(s, t), max(s, t))
        undirected.add(pair)
        d = data_of(el)
        for key in _BANDWIDTH_KEYS:
            if key in d:
                try:
                    bandwidth[pair] = max(bandwidth.get(pair, 0.0), float(d[key]))
                except ValueError:
                    raise GraphMLError(f"{path}: non-numeric {key}={d[key]!r} in {_describe(el)}") from None
                break

    cap = np.zeros((n, n))
    if bandwidth:
        lo, hi = min(bandwidth.values()), max(bandwidth.values())
        span = hi - lo
    for pair in undirected:
        c = GRAPHML_DEFAULT_CAPACITY
        if pair in bandwidth:
            c = CAPACITY_LOW + (bandwidth[pair] - lo) / span if span > 0 else CAPACITY_LOW
        cap[pair] = cap[pair[::-1]] = c

    if n and all(c is not None for c in coords):
        pos = np.asarray(coords, dtype=float)
        pos -= pos.mean(axis=0)
        scale = np.linalg.norm(pos, axis=1).max()
        if scale > 0:
            pos /= scale
    else:
        theta = 2.0 * np.pi * np.arange(n) / max(n, 1)
        pos = np.stack([np.cos(theta), np.sin(theta)], axis=1)

    topo = Topology(pos.reshape(n, 2), cap, name=path.stem)
    if n > 1 and not topo.is_connected():
        warnings.warn(f"{path}: graph is disconnected", stacklevel=2)
    return topo
