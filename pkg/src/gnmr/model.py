"""GNMR: type-specific behavior messages, cross-behavior attention, gated fusion.

All stages are batched over nodes: a tensor of shape ``(n, ...)`` holds the
per-node quantities for ``n`` users (or items) at once. The per-node equations
are recovered with ``n = 1``.

Parameters are shared across propagation layers. Naming:

* ``H0.user`` (I, d), ``H0.item`` (J, d) -- initial embedding tables
* ``W1.k{k}`` (C, d), ``b1.k{k}`` (C,), ``W2.k{k}`` (C, d, d) -- per behavior
* ``Q.s{s}``, ``K.s{s}``, ``V.s{s}`` (d/S, d) -- per attention head
* ``W3`` (d', d), ``w2`` (d',), ``b2`` (d',), ``b3`` () -- behavior gate
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ndgrad as nd
from .graph import MultiBehaviorGraph
from .ndgrad import NonFiniteError, Tensor

CHECKPOINT_FORMAT = "gnmr-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HyperParams:
    n_behaviors: int
    dim: int = 16
    mem_dims: int = 8
    heads: int = 2
    gate_hidden: int = 16
    layers: int = 2
    norm: str = "sum"
    residual: str = "single"
    score: str = "layer-sum"

    def problems(self) -> list[str]:
        out = []
        for name in ("n_behaviors", "dim", "mem_dims", "heads", "gate_hidden"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive")
        if self.heads >= 1 and self.dim % self.heads:
            out.append(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not 0 <= self.layers <= 4:
            out.append(f"layers must be in [0, 4], got {self.layers}")
        if self.norm not in ("sum", "mean"):
            out.append(f"norm must be 'sum' or 'mean', got {self.norm!r}")
        if self.residual not in ("single", "double"):
            out.append(f"residual must be 'single' or 'double', got {self.residual!r}")
        if self.score not in ("layer-sum", "layer-concat"):
            out.append(f"score must be 'layer-sum' or 'layer-concat', got {self.score!r}")
        return out

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ValueError("; ".join(errs))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass(frozen=True)
class AblationFlags:
    """Model variants: ``-be`` drops the behavior embedding layer, ``-ma`` the
    cross-behavior attention; ``behavior_mask`` restricts which behaviors
    carry messages (None keeps all)."""

    disable_behavior_embedding: bool = False
    disable_attention: bool = False
    behavior_mask: tuple[int, ...] | None = None

    def active(self, n_behaviors: int, target_index: int) -> tuple[int, ...]:
        if self.behavior_mask is None:
            return tuple(range(n_behaviors))
        mask = tuple(sorted(set(self.behavior_mask)))
        if not mask:
            raise ValueError("behavior_mask is empty")
        if target_index not in mask:
            raise ValueError("behavior_mask must contain the target behavior")
        if mask[0] < 0 or mask[-1] >= n_behaviors:
            raise ValueError(f"behavior_mask {mask} out of range for {n_behaviors} behaviors")
        return mask

    def to_dict(self) -> dict:
        d = asdict(self)
        d["behavior_mask"] = None if self.behavior_mask is None else list(self.behavior_mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AblationFlags":
        mask = d.get("behavior_mask")
        return cls(bool(d.get("disable_behavior_embedding", False)),
                   bool(d.get("disable_attention", False)),
                   None if mask is None else tuple(int(k) for k in mask))


Params = dict  # name -> Tensor


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(hyper: HyperParams, n_users: int, n_items: int, seed: int,
                H0: tuple[np.ndarray, np.ndarray] | None = None) -> Params:
    """Fresh parameters. ``H0`` supplies pretrained embedding tables; otherwise N(0, 0.01^2)."""
    hyper.validate()
    rng = np.random.default_rng(seed)
    d, C, dh, dg = hyper.dim, hyper.mem_dims, hyper.head_dim, hyper.gate_hidden
    if H0 is None:
        H0 = random_embeddings(n_users, n_items, d, rng)
    hu, hv = (np.asarray(h, dtype=np.float64) for h in H0)
    if hu.shape != (n_users, d) or hv.shape != (n_items, d):
        raise ValueError(f"embedding tables must be ({n_users}, {d}) and ({n_items}, {d})")
    arrays: dict[str, np.ndarray] = {"H0.user": hu, "H0.item": hv}
    for k in range(hyper.n_behaviors):
        arrays[f"W1.k{k}"] = _glorot(rng, (C, d), d, C)
        arrays[f"b1.k{k}"] = np.full(C, 1.0 / C)
        arrays[f"W2.k{k}"] = np.stack([_glorot(rng, (d, d), d, d) for _ in range(C)])
    for s in range(hyper.heads):
        for kind in ("Q", "K", "V"):
            arrays[f"{kind}.s{s}"] = _glorot(rng, (dh, d), d, dh)
    arrays["W3"] = _glorot(rng, (dg, d), d, dg)
    arrays["w2"] = _glorot(rng, (dg,), dg, 1)
    arrays["b2"] = np.zeros(dg)
    arrays["b3"] = np.zeros(())
    return {name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()}


def random_embeddings(n_users: int, n_items: int, d: int, rng: np.random.Generator,
                      std: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    return std * rng.standard_normal((n_users, d)), std * rng.standard_normal((n_items, d))


def param_shapes(hyper: HyperParams, n_users: int, n_items: int) -> dict[str, tuple[int, ...]]:
    d, C, dh, dg = hyper.dim, hyper.mem_dims, hyper.head_dim, hyper.gate_hidden
    shapes = {"H0.user": (n_users, d), "H0.item": (n_items, d)}
    for k in range(hyper.n_behaviors):
        shapes.update({f"W1.k{k}": (C, d), f"b1.k{k}": (C,), f"W2.k{k}": (C, d, d)})
    for s in range(hyper.heads):
        shapes.update({f"{kind}.s{s}": (dh, d) for kind in ("Q", "K", "V")})
    shapes.update({"W3": (dg, d), "w2": (dg,), "b2": (dg,), "b3": ()})
    return shapes


# -- stages ------------------------------------------------------------------


def behavior_message(neighbor_sum: Tensor, k: int, params: Params, hyper: HyperParams,
                     flags: AblationFlags = AblationFlags()) -> Tensor:
    """Type-specific message for behavior ``k`` from aggregated neighbor embeddings.

    ``alpha = relu(W1 s + b1)`` gates C latent projections ``W2_c s`` of the
    neighbor sum ``s``; the message is their alpha-weighted sum. With the
    behavior embedding layer disabled the message is ``s`` itself.
    """
    if neighbor_sum.ndim != 2 or neighbor_sum.shape[1] != hyper.dim:
        raise nd.ShapeError(f"neighbor sums must be (n, {hyper.dim}), got {neighbor_sum.shape}")
    if flags.disable_behavior_embedding:
        return neighbor_sum
    n, d, C = neighbor_sum.shape[0], hyper.dim, hyper.mem_dims
    alpha = nd.relu(nd.add_bias(neighbor_sum @ nd.transpose(params[f"W1.k{k}"]), params[f"b1.k{k}"]))
    W2 = nd.reshape(params[f"W2.k{k}"], (C * d, d))
    proj = nd.reshape(neighbor_sum @ nd.transpose(W2), (n, C, d))
    return nd.reshape(nd.reshape(alpha, (n, 1, C)) @ proj, (n, d))


def cross_behavior_attention(messages: Tensor, params: Params, hyper: HyperParams,
                             flags: AblationFlags = AblationFlags()) -> tuple[Tensor, Tensor | None]:
    """Recalibrate each behavior's message with multi-head attention over behaviors.

    ``messages`` is (n, K, d). Returns the recalibrated (n, K, d) tensor and the
    attention weights (n, S, K, K), whose last axis sums to one. With attention
    disabled the input is returned unchanged and the weights are None.
    """
    if flags.disable_attention:
        return messages, None
    n, K, d = messages.shape
    S, dh = hyper.heads, hyper.head_dim
    if d % S:
        raise nd.ShapeError(f"dim {d} is not divisible by {S} heads")

    def project(kind: str) -> Tensor:
        W = nd.concat([params[f"{kind}.s{s}"] for s in range(S)], axis=0)
        out = nd.reshape(messages @ nd.transpose(W), (n, K, S, dh))
        return nd.transpose(out, (0, 2, 1, 3))  # (n, S, K, dh)

    q, k, v = project("Q"), project("K"), project("V")
    logits = (q @ nd.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    beta = nd.softmax(logits, axis=-1)
    mixed = nd.reshape(nd.transpose(beta @ v, (0, 2, 1, 3)), (n, K, d))
    out = mixed + messages
    if hyper.residual == "double":
        out = out + messages
    return out, beta


def gated_aggregate(recalibrated: Tensor, params: Params) -> tuple[Tensor, Tensor]:
    """Softmax-gated fusion of per-behavior embeddings (n, K, d) into (n, d).

    Gate logits are ``w2 . relu(W3 h + b2) + b3`` per node and behavior.
    Returns the fused embeddings and the (n, K) gate weights.
    """
    n, K, d = recalibrated.shape
    hidden = nd.relu(nd.add_bias(recalibrated @ nd.transpose(params["W3"]), params["b2"]))
    w2 = params["w2"]
    gamma = nd.reshape(hidden @ nd.reshape(w2, (w2.shape[0], 1)), (n, K)) + params["b3"]
    weights = nd.softmax(gamma, axis=-1)
    fused = nd.reshape(nd.reshape(weights, (n, 1, K)) @ recalibrated, (n, d))
    return fused, weights


@dataclass
class LayerTrace:
    """Intermediate values of one propagation layer, for inspection and tests."""

    messages: dict[str, Tensor] = field(default_factory=dict)
    recalibrated: dict[str, Tensor] = field(default_factory=dict)
    attention: dict[str, Tensor | None] = field(default_factory=dict)
    gates: dict[str, Tensor] = field(default_factory=dict)


def _side(graph: MultiBehaviorGraph, src: Tensor, side: str, active: Sequence[int],
          params: Params, hyper: HyperParams, flags: AblationFlags,
          trace: LayerTrace | None) -> Tensor:
    msgs = []
    for k in active:
        a = graph.adj[k]
        if side == "user":
            ptr, idx, tptr, tidx, deg = a.user_indptr, a.user_indices, a.item_indptr, a.item_indices, a.user_degree
        else:
            ptr, idx, tptr, tidx, deg = a.item_indptr, a.item_indices, a.user_indptr, a.user_indices, a.item_degree
        scale = None
        if hyper.norm == "mean":
            scale = 1.0 / np.maximum(deg, 1)
        summed = nd.segment_sum(src, ptr, idx, tptr, tidx, scale)
        msgs.append(behavior_message(summed, k, params, hyper, flags))
    stacked = nd.stack(msgs, axis=1)
    recal, beta = cross_behavior_attention(stacked, params, hyper, flags)
    fused, gates = gated_aggregate(recal, params)
    if trace is not None:
        trace.messages[side] = stacked
        trace.recalibrated[side] = recal
        trace.attention[side] = beta
        trace.gates[side] = gates
    return fused


def propagate_layer(graph: MultiBehaviorGraph, H_users: Tensor, H_items: Tensor, params: Params,
                    hyper: HyperParams, flags: AblationFlags = AblationFlags(),
                    target_index: int | None = None,
                    trace: LayerTrace | None = None) -> tuple[Tensor, Tensor]:
    """One round of message passing: users gather from items and items from users."""
    kt = hyper.n_behaviors - 1 if target_index is None else target_index
    active = flags.active(hyper.n_behaviors, kt)
    out = []
    for side, src in (("user", H_items), ("item", H_users)):
        try:
            out.append(_side(graph, src, side, active, params, hyper, flags, trace))
        except NonFiniteError as err:
            node = err.index[0] if err.index else "?"
            raise NonFiniteError(f"non-finite embedding at {side} node {node}: {err}", err.index) from err
    return out[0], out[1]


def forward(graph: MultiBehaviorGraph, params: Params, hyper: HyperParams,
            flags: AblationFlags = AblationFlags(), target_index: int | None = None,
            H0: tuple[Tensor, Tensor] | None = None,
            traces: list[LayerTrace] | None = None) -> list[tuple[Tensor, Tensor]]:
    """Embeddings of every layer ``0..L`` as (users, items) pairs.

    ``H0`` overrides the initial tables (used for subgraphs, whose rows are a
    gather of the global tables).
    """
    hu, hv = H0 if H0 is not None else (params["H0.user"], params["H0.item"])
    if hu.shape[0] != graph.n_users or hv.shape[0] != graph.n_items:
        raise nd.ShapeError("embedding tables do not match the graph's node counts")
    layers = [(hu, hv)]
    for _ in range(hyper.layers):
        trace = LayerTrace() if traces is not None else None
        hu, hv = propagate_layer(graph, hu, hv, params, hyper, flags, target_index, trace)
        if traces is not None:
            traces.append(trace)
        layers.append((hu, hv))
    return layers


def combine_layers(layers: Sequence[tuple[Tensor, Tensor]], mode: str = "layer-sum") -> tuple[Tensor, Tensor]:
    users = [u for u, _ in layers]
    items = [v for _, v in layers]
    if mode == "layer-concat":
        return nd.concat(users, axis=-1), nd.concat(items, axis=-1)
    eu, ev = users[0], items[0]
    for u, v in zip(users[1:], items[1:]):
        eu, ev = eu + u, ev + v
    return eu, ev


def score(layers: Sequence[tuple[Tensor, Tensor]], users, items, mode: str = "layer-sum") -> Tensor:
    """Multi-order match scores ``<sum_l H_u^l, sum_l H_j^l>`` for aligned id arrays."""
    eu, ev = combine_layers(layers, mode)
    users = np.asarray(users, dtype=np.int64).ravel()
    items = np.asarray(items, dtype=np.int64).ravel()
    if len(users) != len(items):
        raise ValueError("users and items must be aligned")
    for ids, n, label in ((users, eu.shape[0], "user"), (items, ev.shape[0], "item")):
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise IndexError(f"unknown {label} id")
    return nd.sum(nd.take_rows(eu, users) * nd.take_rows(ev, items), axis=1)


# -- model bundle and checkpoints --------------------------------------------


@dataclass
class GNMR:
    hyper: HyperParams
    params: Params
    n_users: int
    n_items: int
    target_index: int
    flags: AblationFlags = field(default_factory=AblationFlags)

    @classmethod
    def create(cls, hyper: HyperParams, n_users: int, n_items: int, target_index: int, seed: int,
               flags: AblationFlags = AblationFlags(),
               H0: tuple[np.ndarray, np.ndarray] | None = None) -> "GNMR":
        flags.active(hyper.n_behaviors, target_index)
        return cls(hyper, init_params(hyper, n_users, n_items, seed, H0), n_users, n_items,
                   target_index, flags)

    def forward(self, graph: MultiBehaviorGraph, traces: list[LayerTrace] | None = None):
        return forward(graph, self.params, self.hyper, self.flags, self.target_index, traces=traces)

    def embeddings(self, graph: MultiBehaviorGraph) -> tuple[np.ndarray, np.ndarray]:
        eu, ev = combine_layers(self.forward(graph), self.hyper.score)
        return eu.data, ev.data

    def score_matrix(self, graph: MultiBehaviorGraph, users, items) -> np.ndarray:
        """Scores for each user in ``users`` against its row of candidate ``items`` (n, m)."""
        eu, ev = self.embeddings(graph)
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        return np.einsum("nd,nmd->nm", eu[users], ev[items])

    def used_params(self) -> dict[str, Tensor]:
        """Parameters that take part in the forward pass under the current flags."""
        active = set(self.flags.active(self.hyper.n_behaviors, self.target_index))
        out = {}
        for name, p in self.params.items():
            if name.startswith(("W1.k", "b1.k", "W2.k")):
                if self.flags.disable_behavior_embedding or int(name.split(".k")[1]) not in active:
                    continue
            if name[0] in "QKV" and name[1] == "." and self.flags.disable_attention:
                continue
            out[name] = p
        return out

    def to_dict(self, config: dict | None = None) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "hyper": asdict(self.hyper),
            "flags": self.flags.to_dict(),
            "n_users": self.n_users,
            "n_items": self.n_items,
            "target_index": self.target_index,
            "config": config or {},
            "params": {name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
                       for name, p in self.params.items()},
        }

    def save(self, path, config: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(config)), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "GNMR":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a GNMR checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        hyper = HyperParams(**d["hyper"])
        expected = param_shapes(hyper, d["n_users"], d["n_items"])
        params = {}
        for name, entry in d["params"].items():
            shape = tuple(entry["shape"])
            if expected.get(name) != shape:
                raise ValueError(f"checkpoint parameter {name} has unexpected shape {shape}")
            arr = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
            params[name] = Tensor(arr, requires_grad=True, name=name)
        if set(params) != set(expected):
            raise ValueError("checkpoint parameter set does not match its hyperparameters")
        return cls(hyper, params, int(d["n_users"]), int(d["n_items"]), int(d["target_index"]),
                   AblationFlags.from_dict(d["flags"]))

    @classmethod
    def load(cls, path) -> "GNMR":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_params(self, params: Mapping[str, Tensor]) -> "GNMR":
        merged = dict(self.params)
        merged.update(params)
        return GNMR(self.hyper, merged, self.n_users, self.n_items, self.target_index, self.flags)
