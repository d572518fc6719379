"""Second-order (p, q)-biased random walks and skip-gram context pairs."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph_io import Graph


@dataclass(frozen=True)
class WalkConfig:
    p: float = 1.0
    q: float = 1.0
    num_walks_per_node: int = 10
    walk_length: int = 80
    window: int = 10
    seed: int = 0
    # Compute second-order weights on the fly instead of storing
    # O(sum deg^2) alias tables; for graphs with dense hubs.
    on_the_fly: bool = False

    def __post_init__(self) -> None:
        if self.p <= 0 or self.q <= 0:
            raise ValueError("p and q must be positive")
        if self.num_walks_per_node < 1:
            raise ValueError("num_walks_per_node must be >= 1")
        if self.walk_length < 2:
            raise ValueError("walk_length must be >= 2")
        if not 1 <= self.window < self.walk_length:
            raise ValueError("window must satisfy 1 <= window < walk_length")


def alias_setup(probs) -> tuple[np.ndarray, np.ndarray]:
    """Vose's alias method. Returns (accept probability, alias index) per slot."""
    p = np.asarray(probs, dtype=np.float64)
    n = len(p)
    scaled = p * (n / p.sum())
    accept = np.ones(n, dtype=np.float64)
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, g = small.pop(), large.pop()
        accept[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        (small if scaled[g] < 1.0 else large).append(g)
    # leftovers are 1 up to rounding
    return accept, alias


def alias_probabilities(accept: np.ndarray, alias: np.ndarray) -> np.ndarray:
    """Decode an alias table back into the categorical distribution it samples."""
    n = len(accept)
    out = accept.astype(np.float64).copy()
    np.add.at(out, alias, 1.0 - accept)
    return out / n


def alias_draw(accept: np.ndarray, alias: np.ndarray, rng: np.random.Generator,
               size: int | None = None):
    n = len(accept)
    slot = rng.integers(0, n, size=size)
    u = rng.random(size=size)
    return np.where(u < accept[slot], slot, alias[slot])


def transition_weights(graph: Graph, prev: int, cur: int, p: float, q: float) -> np.ndarray:
    """Unnormalized weights over ``cur``'s neighbors having arrived from ``prev``."""
    nbrs = graph.neighbors(cur)
    w = np.full(len(nbrs), 1.0 / q)
    prev_nbrs = graph.neighbors(prev)
    pos = np.searchsorted(prev_nbrs, nbrs)
    pos = np.minimum(pos, max(len(prev_nbrs) - 1, 0))
    w[prev_nbrs[pos] == nbrs] = 1.0
    w[nbrs == prev] = 1.0 / p
    return w


@dataclass(frozen=True, eq=False)
class WalkTables:
    """Alias tables for the first step (per node) and later steps (per directed edge).

    Directed edge ``t -> v`` has index ``graph.indptr[t] + position of v in adj(t)``;
    its table covers ``adj(v)`` and lives at ``edge_offset[e] : edge_offset[e] + deg(v)``.
    The first-step tables share the CSR layout of the graph itself.
    """

    graph: Graph
    p: float
    q: float
    node_accept: np.ndarray
    node_alias: np.ndarray
    edge_offset: np.ndarray | None
    edge_accept: np.ndarray | None
    edge_alias: np.ndarray | None

    def first_step_distribution(self, node: int) -> np.ndarray:
        lo, hi = self.graph.indptr[node], self.graph.indptr[node + 1]
        return alias_probabilities(self.node_accept[lo:hi], self.node_alias[lo:hi])

    def edge_index(self, prev: int, cur: int) -> int:
        nb = self.graph.neighbors(prev)
        k = int(np.searchsorted(nb, cur))
        if k >= len(nb) or nb[k] != cur:
            raise KeyError(f"({prev}, {cur}) is not an edge")
        return int(self.graph.indptr[prev]) + k

    def second_step_distribution(self, prev: int, cur: int) -> np.ndarray:
        """Exact probabilities over ``adj(cur)`` decoded from the stored table."""
        if self.edge_offset is None:
            w = transition_weights(self.graph, prev, cur, self.p, self.q)
            return w / w.sum()
        e = self.edge_index(prev, cur)
        lo = self.edge_offset[e]
        hi = lo + self.graph.degrees[cur]
        return alias_probabilities(self.edge_accept[lo:hi], self.edge_alias[lo:hi])


def build_walk_tables(graph: Graph, config: WalkConfig) -> WalkTables:
    deg = graph.degrees
    if graph.num_nodes == 0:
        raise ValueError("graph is empty")
    if np.any(deg == 0):
        raise ValueError(f"graph has {int((deg == 0).sum())} isolated node(s); "
                         f"first: {int(np.flatnonzero(deg == 0)[0])}")
    # uniform first-step tables are exact without rounding: accept = 1
    node_accept = np.ones(len(graph.indices), dtype=np.float64)
    node_alias = np.concatenate([np.arange(d, dtype=np.int64) for d in deg])

    if config.on_the_fly:
        return WalkTables(graph, config.p, config.q, node_accept, node_alias, None, None, None)

    src = np.repeat(np.arange(graph.num_nodes, dtype=np.int64), deg)
    dst = graph.indices
    sizes = deg[dst]
    edge_offset = np.zeros(len(dst) + 1, dtype=np.int64)
    np.cumsum(sizes, out=edge_offset[1:])
    total = int(edge_offset[-1])
    edge_accept = np.empty(total, dtype=np.float64)
    edge_alias = np.empty(total, dtype=np.int64)
    for e in range(len(dst)):
        w = transition_weights(graph, int(src[e]), int(dst[e]), config.p, config.q)
        a, al = alias_setup(w)
        lo = edge_offset[e]
        edge_accept[lo : lo + len(w)] = a
        edge_alias[lo : lo + len(w)] = al
    return WalkTables(graph, config.p, config.q, node_accept, node_alias,
                      edge_offset[:-1], edge_accept, edge_alias)


def _step_first(tables: WalkTables, cur: np.ndarray, rng: np.random.Generator):
    g = tables.graph
    deg = g.degrees[cur]
    slot = (rng.random(len(cur)) * deg).astype(np.int64)
    u = rng.random(len(cur))
    base = g.indptr[cur]
    pick = np.where(u < tables.node_accept[base + slot], slot, tables.node_alias[base + slot])
    return g.indices[base + pick], base + pick


def _step_second(tables: WalkTables, prev: np.ndarray, cur: np.ndarray, edge: np.ndarray,
                 rng: np.random.Generator):
    g = tables.graph
    deg = g.degrees[cur]
    if tables.edge_offset is None:
        picks = np.empty(len(cur), dtype=np.int64)
        u = rng.random(len(cur))
        for i in range(len(cur)):
            w = transition_weights(g, int(prev[i]), int(cur[i]), tables.p, tables.q)
            c = np.cumsum(w)
            picks[i] = min(int(np.searchsorted(c, u[i] * c[-1], side="right")), len(w) - 1)
    else:
        slot = (rng.random(len(cur)) * deg).astype(np.int64)
        u = rng.random(len(cur))
        off = tables.edge_offset[edge] + slot
        picks = np.where(u < tables.edge_accept[off], slot, tables.edge_alias[off])
    base = g.indptr[cur]
    return g.indices[base + picks], base + picks


def generate_walks(graph: Graph, tables: WalkTables, config: WalkConfig,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Return an int64 array of shape ``(num_walks_per_node * M, walk_length)``.

    Each pass visits all start nodes in a fresh random order; all walkers of a
    pass advance together.
    """
    if tables.graph is not graph and tables.graph != graph:
        raise ValueError("tables were built for a different graph")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    m, length = graph.num_nodes, config.walk_length
    out = np.empty((config.num_walks_per_node * m, length), dtype=np.int64)
    for r in range(config.num_walks_per_node):
        walk = out[r * m : (r + 1) * m]
        walk[:, 0] = rng.permutation(m)
        walk[:, 1], edge = _step_first(tables, walk[:, 0], rng)
        for t in range(2, length):
            walk[:, t], edge = _step_second(tables, walk[:, t - 2], walk[:, t - 1], edge, rng)
    return out


@dataclass(frozen=True, eq=False)
class ContextPairs:
    centers: np.ndarray
    contexts: np.ndarray

    def __len__(self) -> int:
        return len(self.centers)

    def center_histogram(self, num_nodes: int | None = None) -> np.ndarray:
        n = num_nodes if num_nodes is not None else (int(self.centers.max()) + 1 if len(self) else 0)
        return np.bincount(self.centers, minlength=n)


def _pairs_fixed_length(walks: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    n, length = walks.shape
    offsets = np.array([o for o in range(-window, window + 1) if o != 0])
    pos = np.arange(length)[:, None] + offsets[None, :]           # (L, 2w)
    valid = (pos >= 0) & (pos < length)
    i_idx = np.broadcast_to(np.arange(length)[:, None], pos.shape)[valid]
    j_idx = pos[valid]
    centers = walks[:, i_idx].reshape(-1)
    contexts = walks[:, j_idx].reshape(-1)
    keep = centers != contexts
    return centers[keep], contexts[keep]


def extract_context_pairs(walks: np.ndarray | Sequence[Sequence[int]], window: int) -> ContextPairs:
    """Emit ``(walk[i], walk[j])`` for every ``0 < |i - j| <= window``, in walk/position order.

    Pairs whose two nodes coincide are dropped.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if isinstance(walks, np.ndarray) and walks.ndim == 2:
        c, x = _pairs_fixed_length(walks.astype(np.int64, copy=False), window)
        return ContextPairs(c, x)
    cs, xs = [], []
    for w in walks:
        arr = np.asarray(w, dtype=np.int64)[None, :]
        if arr.shape[1] < 2:
            continue
        c, x = _pairs_fixed_length(arr, window)
        cs.append(c)
        xs.append(x)
    if not cs:
        return ContextPairs(np.empty(0, np.int64), np.empty(0, np.int64))
    return ContextPairs(np.concatenate(cs), np.concatenate(xs))


def save_walks(path: str | os.PathLike, walks) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for w in walks:
            fh.write(" ".join(str(int(x)) for x in w) + "\n")


def load_walks(path: str | os.PathLike) -> list[list[int]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [[int(x) for x in line.split()] for line in fh if line.strip()]
