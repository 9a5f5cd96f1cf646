"""Graph-filter neural network policy for routing and admission decisions.

Layout conventions (``B`` batch, ``n`` nodes, ``K`` flows, ``F`` features):

* shift operators ``S``: ``(B, n, n)``,
* node features: ``(B, n, K, F)``; one network with shared weights runs on
  every flow, which only meet again in the routing head's softmax,
* routing rates: ``(B, n, n, K)`` and admissions ``(B, n, K)``.

Unbatched inputs (no leading ``B``) are accepted by the public functions and
returned unbatched. Every function is written with :mod:`sarouting.tape` ops,
so passing :class:`~sarouting.tape.Var` parameters records a trace for
:func:`policy_gradient`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tape as tp

CHECKPOINT_VERSION = 1


@dataclass
class GnnParams:
    """Filter banks ``h_l`` of shape ``(taps_l, F_{l-1}, F_l)`` plus the two heads.

    Attributes:
        filters: one tensor per layer.
        w_r: ``(F_L, F_L)`` bilinear routing-score matrix.
        w_a: ``(F_L,)`` admission read-out vector.
    """

    filters: list[np.ndarray]
    w_r: np.ndarray
    w_a: np.ndarray

    def __post_init__(self) -> None:
        self.filters = [np.asarray(h, dtype=float) for h in self.filters]
        self.w_r = np.asarray(self.w_r, dtype=float)
        self.w_a = np.asarray(self.w_a, dtype=float)
        check_dims(self.features, self.taps)
        for l, h in enumerate(self.filters):
            if h.ndim != 3:
                raise ValueError(f"layer {l + 1} filter must be 3-D, got shape {h.shape}")
            if l and h.shape[1] != self.filters[l - 1].shape[2]:
                raise ValueError(f"layer {l + 1} expects {h.shape[1]} inputs, previous layer gives {self.filters[l - 1].shape[2]}")
        F = self.features[-1]
        if self.w_r.shape != (F, F) or self.w_a.shape != (F,):
            raise ValueError(f"heads must be ({F}, {F}) and ({F},), got {self.w_r.shape} and {self.w_a.shape}")

    @property
    def features(self) -> tuple[int, ...]:
        return (self.filters[0].shape[1], *(h.shape[2] for h in self.filters)) if self.filters else ()

    @property
    def taps(self) -> tuple[int, ...]:
        return tuple(h.shape[0] for h in self.filters)

    @property
    def num_layers(self) -> int:
        return len(self.filters)

    def tensors(self) -> list[np.ndarray]:
        """All parameter blocks in a fixed order: filters, ``w_r``, ``w_a``."""
        return [*self.filters, self.w_r, self.w_a]

    @classmethod
    def from_tensors(cls, tensors: Sequence[np.ndarray]) -> "GnnParams":
        *filters, w_r, w_a = tensors
        return cls(list(filters), w_r, w_a)

    def block_names(self) -> list[str]:
        return [f"h{l + 1}" for l in range(self.num_layers)] + ["w_r", "w_a"]

    def copy(self) -> "GnnParams":
        return GnnParams.from_tensors([t.copy() for t in self.tensors()])

    def size(self) -> int:
        return sum(t.size for t in self.tensors())

    def to_dict(self) -> dict:
        return {
            "features": list(self.features),
            "taps": list(self.taps),
            "tensors": {name: t.ravel().tolist() for name, t in zip(self.block_names(), self.tensors())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GnnParams":
        features, taps = tuple(doc["features"]), tuple(doc["taps"])
        check_dims(features, taps)
        shapes = _shapes(features, taps)
        names = [f"h{l + 1}" for l in range(len(taps))] + ["w_r", "w_a"]
        tensors = []
        for name, shape in zip(names, shapes):
            flat = np.asarray(doc["tensors"][name], dtype=float)
            if flat.size != math.prod(shape):
                raise ValueError(f"block {name} has {flat.size} values, expected {math.prod(shape)}")
            tensors.append(flat.reshape(shape))
        return cls.from_tensors(tensors)


def check_dims(features: Sequence[int], taps: Sequence[int]) -> None:
    if len(features) < 2 or len(taps) != len(features) - 1:
        raise ValueError(f"need L + 1 feature sizes and L tap counts, got {tuple(features)} and {tuple(taps)}")
    if any(f < 1 for f in features) or any(k < 1 for k in taps):
        raise ValueError("feature sizes and tap counts must be >= 1")


def _shapes(features: Sequence[int], taps: Sequence[int]) -> list[tuple[int, ...]]:
    layers = [(k, fi, fo) for k, fi, fo in zip(taps, features[:-1], features[1:])]
    return [*layers, (features[-1], features[-1]), (features[-1],)]


def param_count(features: Sequence[int], taps: Sequence[int]) -> int:
    """``sum_l K_l F_{l-1} F_l + F_L^2 + F_L``."""
    check_dims(features, taps)
    F = features[-1]
    return sum(k * fi * fo for k, fi, fo in zip(taps, features[:-1], features[1:])) + F * F + F


def init_params(features: Sequence[int] = (2, 32, 8), taps: int | Sequence[int] = 3, seed: int = 0) -> GnnParams:
    """Uniform ``[-1/sqrt(K_l F_{l-1}), +1/sqrt(K_l F_{l-1})]`` filters; heads scaled by ``1/sqrt(F_L)``."""
    if isinstance(taps, int):
        taps = [taps] * (len(features) - 1)
    check_dims(features, taps)
    rng = np.random.default_rng(seed)
    filters = []
    for k, fi, fo in zip(taps, features[:-1], features[1:]):
        bound = 1.0 / math.sqrt(k * fi)
        filters.append(rng.uniform(-bound, bound, size=(k, fi, fo)))
    F = features[-1]
    bound = 1.0 / math.sqrt(F)
    return GnnParams(filters, rng.uniform(-bound, bound, size=(F, F)), rng.uniform(-bound, bound, size=F))


# -- forward pass ---------------------------------------------------------------------


def _filter(S, z, h):
    """Batched filter bank on ``(B, n, K, F)`` features."""
    taps = tp.value(h).shape[0]
    y = tp.einsum("bikf,fg->bikg", z, tp.take(h, 0))
    for k in range(1, taps):
        z = tp.einsum("bij,bjkf->bikf", S, z)
        y = tp.add(y, tp.einsum("bikf,fg->bikg", z, tp.take(h, k)))
    return y


def graph_filter_apply(S, z, h):
    """Polynomial graph filter bank ``y[:, g] = sum_{f,k} h[k, f, g] S^k z[:, f]``.

    Args:
        S: ``(n, n)`` shift operator.
        z: ``(n, F_in)`` node features.
        h: ``(taps, F_in, F_out)`` coefficients.

    Returns:
        ``(n, F_out)`` filtered features; powers of ``S`` are never formed.
    """
    S_v, z_v, h_v = (tp.value(x) for x in (S, z, h))
    n = S_v.shape[0]
    if S_v.shape != (n, n) or z_v.ndim != 2 or z_v.shape[0] != n:
        raise ValueError(f"shape mismatch: S {S_v.shape}, z {z_v.shape}")
    if h_v.ndim != 3 or h_v.shape[1] != z_v.shape[1] or h_v.shape[0] < 1:
        raise ValueError(f"filter {h_v.shape} does not match {z_v.shape[1]} input features")
    y = _filter(tp.reshape(S, (1, n, n)), tp.reshape(z, (1, n, 1, z_v.shape[1])), h)
    return tp.reshape(y, (n, h_v.shape[2]))


def _batched(S, X):
    if tp.value(S).ndim == 2:
        return tp.expand_dims(S, 0), tp.expand_dims(X, 0), False
    return S, X, True


def _unbatch(x, batched: bool):
    return x if batched else tp.reshape(x, tp.value(x).shape[1:])


def gnn_forward(S, X, params: GnnParams, filters: Sequence | None = None):
    """Embeddings ``(n, K, F_L)`` (or batched) of node features ``X``.

    Hidden layers use ReLU; the last layer is linear. ``filters`` overrides
    ``params.filters`` (used to pass traced tensors).
    """
    filters = params.filters if filters is None else filters
    S, X, batched = _batched(S, X)
    if tp.value(X).shape[-1] != tp.value(filters[0]).shape[1]:
        raise ValueError(f"features have {tp.value(X).shape[-1]} channels, network expects {tp.value(filters[0]).shape[1]}")
    z = X
    for l, h in enumerate(filters):
        z = _filter(S, z, h)
        if l < len(filters) - 1:
            z = tp.relu(z)
        if not np.all(np.isfinite(tp.value(z))):
            raise FloatingPointError(f"non-finite embeddings after layer {l + 1}")
    return _unbatch(z, batched)


def routing_head(Y, w_r, C):
    """Routing rates from embeddings.

    Scores ``s[i, j, k] = y_i^k . w_r . y_j^k`` are turned into per-edge shares
    by a softmax across flows plus a fixed idle logit 0, then scaled by the
    capacity, so ``sum_k r[i, j, k] < C[i, j]`` and non-edges carry nothing.

    Args:
        Y: ``(n, K, F)`` embeddings (or batched).
        w_r: ``(F, F)``.
        C: ``(n, n)`` capacities (or batched).
    """
    batched = tp.value(Y).ndim == 4
    if not batched:
        Y, C = tp.expand_dims(Y, 0), np.asarray(C)[None]
    scores = tp.einsum("bikf,fg,bjkg->bijk", Y, w_r, Y)
    shares = tp.softmax_idle(scores, axis=-1)
    r = tp.mul(shares, np.asarray(C, dtype=float)[..., None])
    return _unbatch(r, batched)


def packet_head(Y, w_a, A, mask: np.ndarray | None = None):
    """Admissions ``a = A + ReLU(Y w_a)``, so ``a >= A`` exactly.

    ``mask`` (``(n, K)``, optional) zeroes the increment at destinations.
    """
    sub = "bikf,f->bik" if tp.value(Y).ndim == 4 else "ikf,f->ik"
    inc = tp.relu(tp.einsum(sub, Y, w_a))
    if mask is not None:
        inc = tp.mul(inc, mask)
    return tp.add(inc, np.asarray(A, dtype=float))


@dataclass
class PolicyOutput:
    """Routing rates, admission increment and admissions of one evaluation."""

    r: object
    increment: object
    a: object


def policy(params: GnnParams, S, C, X, A, mask: np.ndarray | None = None, tensors: Sequence | None = None) -> PolicyOutput:
    """Full policy: embeddings, routing head and admission head.

    ``tensors`` replaces ``params.tensors()`` (used to pass traced tensors).
    """
    tensors = params.tensors() if tensors is None else tensors
    *filters, w_r, w_a = tensors
    Y = gnn_forward(S, X, params, filters=filters)
    r = routing_head(Y, w_r, C)
    inc = packet_head(Y, w_a, np.zeros(tp.value(Y).shape[:-1]), mask)
    return PolicyOutput(r=r, increment=inc, a=tp.add(inc, np.asarray(A, dtype=float)))


# -- gradients and optimizer -----------------------------------------------------


def policy_gradient(loss: Callable[[list], object], params: GnnParams) -> tuple[float, list[np.ndarray]]:
    """Value and reverse-mode gradient of ``loss(tensors)``.

    ``loss`` receives the parameter blocks as traced variables and must return
    a scalar built from tape ops.
    """
    leaves = [tp.Var(t) for t in params.tensors()]
    out = loss(leaves)
    grads = tp.grad(out, leaves)
    for name, g in zip(params.block_names(), grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name}")
    return float(tp.value(out)), grads


@dataclass
class AdamState:
    """Moment estimates congruent to the parameter blocks."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: GnnParams) -> "AdamState":
        return cls([np.zeros_like(t) for t in params.tensors()], [np.zeros_like(t) for t in params.tensors()])

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": [t.ravel().tolist() for t in self.m],
            "v": [t.ravel().tolist() for t in self.v],
        }

    @classmethod
    def from_dict(cls, doc: dict, params: GnnParams) -> "AdamState":
        shapes = [t.shape for t in params.tensors()]
        m = [np.asarray(x, dtype=float).reshape(s) for x, s in zip(doc["m"], shapes)]
        v = [np.asarray(x, dtype=float).reshape(s) for x, s in zip(doc["v"], shapes)]
        return cls(m, v, doc["step"], doc["beta1"], doc["beta2"], doc["eps"])


def adam_step(
    params: GnnParams, grads: Sequence[np.ndarray], state: AdamState, eta: float
) -> tuple[GnnParams, AdamState]:
    """Bias-corrected Adam *ascent* step; inputs are left untouched."""
    tensors = params.tensors()
    if len(grads) != len(tensors) or any(g.shape != t.shape for g, t in zip(grads, tensors)):
        raise ValueError("gradient blocks do not match the parameters")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = [p + eta * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(tensors, m, v)]
    return GnnParams.from_tensors(new), AdamState(m, v, t, b1, b2, state.eps)


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: GnnParams, adam: AdamState | None = None, meta: dict | None = None) -> None:
    doc = {"version": CHECKPOINT_VERSION, **params.to_dict()}
    if adam is not None:
        doc["adam"] = adam.to_dict()
    if meta:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[GnnParams, AdamState | None, dict]:
    """Read a checkpoint; returns ``(params, adam_state or None, meta)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    params = GnnParams.from_dict(doc)
    adam = AdamState.from_dict(doc["adam"], params) if "adam" in doc else None
    return params, adam, doc.get("meta", {})
