"""Bipartite multi-behavior user-item graph and mini-batch subgraph sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .interactions import InteractionTensor


def _csr(rows: np.ndarray, cols: np.ndarray, n_rows: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cols, rows))
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    return indptr, np.ascontiguousarray(cols[order], dtype=np.int64)


@dataclass(frozen=True)
class Adjacency:
    """CSR adjacency of one behavior in both directions."""

    user_indptr: np.ndarray
    user_indices: np.ndarray  # items adjacent to each user
    item_indptr: np.ndarray
    item_indices: np.ndarray  # users adjacent to each item

    @property
    def user_degree(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    @property
    def item_degree(self) -> np.ndarray:
        return np.diff(self.item_indptr)


class MultiBehaviorGraph:
    """Per-behavior neighborhoods N(i, k) and N(j, k). Immutable once built."""

    def __init__(self, n_users: int, n_items: int, n_behaviors: int, edges: np.ndarray):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
        self.n_users = n_users
        self.n_items = n_items
        self.n_behaviors = n_behaviors
        self.adj: list[Adjacency] = []
        for k in range(n_behaviors):
            e = edges[edges[:, 2] == k]
            up, ui = _csr(e[:, 0], e[:, 1], n_users)
            ip, ii = _csr(e[:, 1], e[:, 0], n_items)
            self.adj.append(Adjacency(up, ui, ip, ii))
        for a in self.adj:
            for arr in (a.user_indptr, a.user_indices, a.item_indptr, a.item_indices):
                arr.flags.writeable = False

    @classmethod
    def build(cls, x: InteractionTensor) -> "MultiBehaviorGraph":
        return cls(x.n_users, x.n_items, x.n_behaviors, x.events)

    def user_neighbors(self, u: int, k: int) -> np.ndarray:
        a = self.adj[k]
        return a.user_indices[a.user_indptr[u]:a.user_indptr[u + 1]]

    def item_neighbors(self, j: int, k: int) -> np.ndarray:
        a = self.adj[k]
        return a.item_indices[a.item_indptr[j]:a.item_indptr[j + 1]]

    def user_degrees(self) -> np.ndarray:
        """(I, K) degree table."""
        return np.stack([a.user_degree for a in self.adj], axis=1)

    def item_degrees(self) -> np.ndarray:
        return np.stack([a.item_degree for a in self.adj], axis=1)

    def edges(self) -> np.ndarray:
        """All (user, item, behavior) edges, sorted."""
        parts = []
        for k, a in enumerate(self.adj):
            users = np.repeat(np.arange(self.n_users), a.user_degree)
            parts.append(np.stack([users, a.user_indices, np.full_like(users, k)], axis=1))
        ev = np.concatenate(parts) if parts else np.zeros((0, 3), dtype=np.int64)
        return ev[np.lexsort((ev[:, 2], ev[:, 1], ev[:, 0]))]

    @property
    def n_edges(self) -> int:
        return int(sum(len(a.user_indices) for a in self.adj))

    def to_json(self) -> str:
        """Adjacency dump for debugging."""
        return json.dumps({
            "n_users": self.n_users, "n_items": self.n_items,
            "behaviors": [
                {"users": {str(u): self.user_neighbors(u, k).tolist() for u in range(self.n_users)
                           if len(self.user_neighbors(u, k))},
                 "items": {str(j): self.item_neighbors(j, k).tolist() for j in range(self.n_items)
                           if len(self.item_neighbors(j, k))}}
                for k in range(self.n_behaviors)
            ],
        })


@dataclass(frozen=True)
class BatchSubgraph:
    """Nodes reached from the seeds within L hops and the edges traversed.

    ``hop_users[l]`` / ``hop_items[l]`` are the cumulative node sets after
    ``l`` hops (``l = 0`` is the seeds). Node ids are global.
    """

    seed_users: np.ndarray
    seed_items: np.ndarray
    hop_users: tuple[np.ndarray, ...]
    hop_items: tuple[np.ndarray, ...]
    edges: np.ndarray  # (E, 3) global (user, item, behavior)
    n_behaviors: int

    @property
    def users(self) -> np.ndarray:
        return self.hop_users[-1]

    @property
    def items(self) -> np.ndarray:
        return self.hop_items[-1]

    def local_graph(self) -> MultiBehaviorGraph:
        """The subgraph relabelled to local ids (positions in ``users`` / ``items``)."""
        lu = np.searchsorted(self.users, self.edges[:, 0])
        li = np.searchsorted(self.items, self.edges[:, 1])
        local = np.stack([lu, li, self.edges[:, 2]], axis=1) if len(self.edges) else self.edges
        return MultiBehaviorGraph(len(self.users), len(self.items), self.n_behaviors, local)


def sample_batch(g: MultiBehaviorGraph, batch_users: Iterable[int], L: int,
                 cap: int | None = 64, seed: int = 0,
                 seed_items: Sequence[int] = ()) -> BatchSubgraph:
    """Breadth-first closure over all behaviors for ``L`` hops from the seeds.

    A node whose degree under some behavior exceeds ``cap`` contributes a
    seeded uniform subsample of ``cap`` neighbors for that behavior. ``cap=None``
    keeps every neighbor.
    """
    users = np.unique(np.asarray(list(batch_users), dtype=np.int64))
    items = np.unique(np.asarray(list(seed_items), dtype=np.int64))
    if len(users) == 0:
        raise ValueError("batch_users is empty")
    if L < 0:
        raise ValueError("L must be nonnegative")
    if cap is not None and cap < 1:
        raise ValueError("cap must be at least 1")
    rng = np.random.default_rng(seed)

    def pick(nb: np.ndarray) -> np.ndarray:
        if cap is None or len(nb) <= cap:
            return nb
        return np.sort(rng.choice(nb, size=cap, replace=False))

    seen_u, seen_i = set(users.tolist()), set(items.tolist())
    hop_u, hop_i = [users], [items]
    frontier_u, frontier_i = users.tolist(), items.tolist()
    edges: set[tuple[int, int, int]] = set()
    for _ in range(L):
        new_u, new_i = set(), set()
        for u in sorted(frontier_u):
            for k in range(g.n_behaviors):
                for j in pick(g.user_neighbors(u, k)).tolist():
                    edges.add((u, j, k))
                    if j not in seen_i:
                        new_i.add(j)
        for j in sorted(frontier_i):
            for k in range(g.n_behaviors):
                for u in pick(g.item_neighbors(j, k)).tolist():
                    edges.add((u, j, k))
                    if u not in seen_u:
                        new_u.add(u)
        seen_u |= new_u
        seen_i |= new_i
        hop_u.append(np.array(sorted(seen_u), dtype=np.int64))
        hop_i.append(np.array(sorted(seen_i), dtype=np.int64))
        frontier_u, frontier_i = sorted(new_u), sorted(new_i)
    ev = np.array(sorted(edges), dtype=np.int64).reshape(-1, 3)
    return BatchSubgraph(users, items, tuple(hop_u), tuple(hop_i), ev, g.n_behaviors)
