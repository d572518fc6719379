"""Attributed-graph datasets: loading, validation, link splits, negative edges."""

from __future__ import annotations

import logging
import math
import os
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import _container
from .errors import GraphFormatError, ShapeMismatchError, SplitError

logger = logging.getLogger(__name__)

SPLIT_MAGIC = b"ANESPLIT1\n"
_HEADER_M = re.compile(r"^#\s*M\s*=\s*(\d+)\s*$")
_HEADER_K = re.compile(r"^K\s*=\s*(\d+)\s*$")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def canonical_edges(edges) -> np.ndarray:
    """Return an (E, 2) int64 array with the smaller id first in each row."""
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return np.sort(arr, axis=1)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted graph in CSR form with sorted neighbor lists."""

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "Graph":
        """Build a graph from an edge list; order and direction are ignored.

        Raises ``GraphFormatError`` on self-loops, duplicates or ids out of range.
        """
        e = canonical_edges(edges)
        if len(e) and (e.min() < 0 or e.max() >= num_nodes):
            raise GraphFormatError(f"edge endpoint outside [0, {num_nodes})")
        if np.any(e[:, 0] == e[:, 1]):
            raise GraphFormatError("self-loops are not allowed")
        codes = e[:, 0] * num_nodes + e[:, 1]
        if len(np.unique(codes)) != len(codes):
            raise GraphFormatError("duplicate edges are not allowed")
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=num_nodes), out=indptr[1:])
        return cls(int(num_nodes), _frozen(indptr), _frozen(cols.astype(np.int64)))

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node] : self.indptr[node + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        k = np.searchsorted(nb, v)
        return bool(k < len(nb) and nb[k] == v)

    def edges(self) -> np.ndarray:
        """Each undirected edge once, as (u, v) with u < v, sorted."""
        rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees)
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def edge_codes(self) -> np.ndarray:
        """Sorted int64 codes ``u * M + v`` (u < v) for fast membership tests."""
        e = self.edges()
        return e[:, 0] * self.num_nodes + e[:, 1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class AttributeMatrix:
    """Sparse per-node feature vectors over ``num_features`` entries (CSR rows)."""

    num_features: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_rows(cls, num_nodes: int, num_features: int,
                  rows: Mapping[int, Sequence[tuple[int, float]]]) -> "AttributeMatrix":
        """Build from ``{node: [(feature, value), ...]}``; missing nodes get empty rows."""
        counts = np.zeros(num_nodes, dtype=np.int64)
        idx: list[int] = []
        val: list[float] = []
        for node in sorted(rows):
            if not 0 <= node < num_nodes:
                raise GraphFormatError(f"node id {node} outside [0, {num_nodes})")
            entries = list(rows[node])
            _check_row(node, entries, num_features)
            counts[node] = len(entries)
            idx.extend(k for k, _ in entries)
            val.extend(v for _, v in entries)
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(int(num_features), _frozen(indptr),
                   _frozen(np.asarray(idx, dtype=np.int64)),
                   _frozen(np.asarray(val, dtype=np.float64)))

    @classmethod
    def empty(cls, num_nodes: int, num_features: int = 1) -> "AttributeMatrix":
        return cls.from_rows(num_nodes, num_features, {})

    @classmethod
    def from_dense(cls, dense) -> "AttributeMatrix":
        csr = sp.csr_matrix(np.asarray(dense, dtype=np.float64))
        csr.sort_indices()
        return cls(csr.shape[1], _frozen(csr.indptr.astype(np.int64)),
                   _frozen(csr.indices.astype(np.int64)), _frozen(csr.data.copy()))

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    def row(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return self.indices[lo:hi], self.values[lo:hi]

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.indices, self.indptr),
                             shape=(self.num_nodes, self.num_features))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttributeMatrix):
            return NotImplemented
        return (self.num_features == other.num_features
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    __hash__ = None  # type: ignore[assignment]


def _check_row(node: int, entries: Sequence[tuple[int, float]], num_features: int) -> None:
    prev = -1
    for k, v in entries:
        if not 0 <= k < num_features:
            raise GraphFormatError(f"node {node}: feature index {k} outside [0, {num_features})")
        if k <= prev:
            raise GraphFormatError(f"node {node}: feature indices must be strictly increasing")
        if not math.isfinite(v):
            raise GraphFormatError(f"node {node}: non-finite value {v!r} at feature {k}")
        prev = k


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Optional class label per node; ``-1`` marks an unlabeled node."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels, dtype=np.int64)
        if np.any((lab < -1) | (lab >= self.num_classes)):
            raise GraphFormatError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", _frozen(lab.copy()))

    @property
    def labeled_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)


@dataclass(frozen=True, eq=False)
class LinkSplit:
    train_graph: Graph
    test_pos: np.ndarray
    val_pos: np.ndarray
    test_neg: np.ndarray
    val_neg: np.ndarray
    seed: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LinkSplit):
            return NotImplemented
        return (self.seed == other.seed and self.train_graph == other.train_graph
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("test_pos", "val_pos", "test_neg", "val_neg")))

    __hash__ = None  # type: ignore[assignment]

    @property
    def num_nodes(self) -> int:
        return self.train_graph.num_nodes


# --------------------------------------------------------------------------
# Text formats
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeListStats:
    lines: int
    duplicates: int
    self_loops: int


def parse_edge_list(path: str | os.PathLike) -> tuple[Graph, EdgeListStats]:
    """Parse an edge-list file and report how many lines were dropped."""
    path = Path(path)
    declared = None
    pairs: list[tuple[int, int]] = []
    n_lines = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                m = _HEADER_M.match(text)
                if m:
                    declared = int(m.group(1))
                continue
            parts = text.split()
            try:
                if len(parts) != 2:
                    raise ValueError
                u, v = int(parts[0]), int(parts[1])
                if u < 0 or v < 0:
                    raise ValueError
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: expected two nonnegative "
                                       f"integers, got {text!r}") from None
            pairs.append((u, v))
            n_lines += 1
    if not pairs:
        raise GraphFormatError(f"{path}: no edges found")

    arr = np.asarray(pairs, dtype=np.int64)
    loops = arr[:, 0] == arr[:, 1]
    arr = canonical_edges(arr[~loops])
    max_id = int(np.asarray(pairs).max())
    num_nodes = declared if declared is not None else max_id + 1
    if max_id >= num_nodes:
        raise GraphFormatError(f"{path}: node id {max_id} exceeds declared M={num_nodes}")
    uniq = np.unique(arr[:, 0] * num_nodes + arr[:, 1])
    if len(uniq) == 0:
        raise GraphFormatError(f"{path}: no edges left after dropping self-loops")
    edges = np.stack([uniq // num_nodes, uniq % num_nodes], axis=1)
    stats = EdgeListStats(n_lines, len(arr) - len(uniq), int(loops.sum()))
    return Graph.from_edges(num_nodes, edges), stats


def load_edge_list(path: str | os.PathLike) -> Graph:
    graph, stats = parse_edge_list(path)
    if stats.duplicates or stats.self_loops:
        warnings.warn(f"{path}: dropped {stats.duplicates} duplicate edge(s) and "
                      f"{stats.self_loops} self-loop(s)", stacklevel=2)
    return graph


def save_edge_list(path: str | os.PathLike, graph: Graph) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"# M={graph.num_nodes}\n")
        for u, v in graph.edges():
            fh.write(f"{u}\t{v}\n")


def load_attributes(path: str | os.PathLike, num_nodes: int) -> AttributeMatrix:
    """Read ``K=<int>`` then ``node k:v k:v ...`` lines."""
    path = Path(path)
    num_features = None
    rows: dict[int, list[tuple[int, float]]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if num_features is None:
                m = _HEADER_K.match(text)
                if not m:
                    raise GraphFormatError(f"{path}:{lineno}: missing 'K=<int>' header")
                num_features = int(m.group(1))
                continue
            parts = text.split()
            try:
                node = int(parts[0])
                entries = []
                for tok in parts[1:]:
                    k, v = tok.split(":")
                    entries.append((int(k), float(v)))
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: malformed attribute line") from None
            if not 0 <= node < num_nodes:
                raise GraphFormatError(f"{path}:{lineno}: node id {node} >= num_nodes {num_nodes}")
            if node in rows:
                raise GraphFormatError(f"{path}:{lineno}: node {node} listed twice")
            try:
                _check_row(node, entries, num_features)
            except GraphFormatError as exc:
                raise GraphFormatError(f"{path}:{lineno}: {exc}") from None
            rows[node] = entries
    if num_features is None:
        raise GraphFormatError(f"{path}: missing 'K=<int>' header")
    return AttributeMatrix.from_rows(num_nodes, num_features, rows)


def save_attributes(path: str | os.PathLike, attrs: AttributeMatrix) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"K={attrs.num_features}\n")
        for node in range(attrs.num_nodes):
            idx, val = attrs.row(node)
            if len(idx):
                fh.write(f"{node} " + " ".join(f"{int(k)}:{float(v)!r}" for k, v in zip(idx, val)) + "\n")


def load_labels(path: str | os.PathLike, num_nodes: int) -> LabelMap:
    path = Path(path)
    labels = np.full(num_nodes, -1, dtype=np.int64)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            try:
                node, lab = int(parts[0]), int(parts[1])
                if len(parts) != 2 or lab < 0:
                    raise ValueError
            except (ValueError, IndexError):
                raise GraphFormatError(f"{path}:{lineno}: expected 'node<TAB>label'") from None
            if not 0 <= node < num_nodes:
                raise GraphFormatError(f"{path}:{lineno}: node id {node} >= num_nodes {num_nodes}")
            labels[node] = lab
    if not np.any(labels >= 0):
        raise GraphFormatError(f"{path}: no labels found")
    return LabelMap(labels, int(labels.max()) + 1)


def save_labels(path: str | os.PathLike, labels: LabelMap) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for node in labels.labeled_nodes:
            fh.write(f"{node}\t{labels.labels[node]}\n")


# --------------------------------------------------------------------------
# Negative edges and link splits
# --------------------------------------------------------------------------


def sample_negative_edges(graph: Graph, n: int, seed: int,
                          exclude: Iterable[Sequence[int]] | np.ndarray | None = None) -> np.ndarray:
    """Draw ``n`` distinct non-edges (u < v) uniformly, avoiding ``exclude``.

    Rejection sampling against a hash of edge codes; falls back to enumerating
    the complement when non-edges are scarce.
    """
    m = graph.num_nodes
    forbidden = set(graph.edge_codes().tolist())
    if exclude is not None:
        ex = canonical_edges(np.asarray(list(exclude) if not isinstance(exclude, np.ndarray)
                                        else exclude))
        ex = ex[ex[:, 0] != ex[:, 1]]
        forbidden.update((ex[:, 0] * m + ex[:, 1]).tolist())
    available = m * (m - 1) // 2 - len(forbidden)
    if n > available:
        raise SplitError(f"requested {n} negative edges but only {available} non-edges exist")
    if n == 0:
        return np.empty((0, 2), dtype=np.int64)

    rng = np.random.default_rng(seed)
    if available < 2 * n:
        all_codes = np.array([u * m + v for u in range(m) for v in range(u + 1, m)
                              if u * m + v not in forbidden], dtype=np.int64)
        codes = rng.choice(all_codes, size=n, replace=False)
    else:
        chosen: list[int] = []
        seen = set(forbidden)
        while len(chosen) < n:
            draw = rng.integers(0, m, size=(2 * (n - len(chosen)) + 16, 2))
            draw = draw[draw[:, 0] != draw[:, 1]]
            draw.sort(axis=1)
            for c in (draw[:, 0] * m + draw[:, 1]).tolist():
                if c not in seen:
                    seen.add(c)
                    chosen.append(c)
                    if len(chosen) == n:
                        break
        codes = np.asarray(chosen, dtype=np.int64)
    return np.stack([codes // m, codes % m], axis=1)


def split_links(graph: Graph, test_frac: float, val_frac: float, seed: int) -> LinkSplit:
    """Hold out random test/validation edges without isolating any node.

    An edge whose removal would leave an endpoint with degree 0 is skipped and
    the next random candidate is taken instead.
    """
    if test_frac < 0 or val_frac < 0 or test_frac + val_frac >= 1:
        raise SplitError("need 0 <= test_frac + val_frac < 1")
    edges = graph.edges()
    n_edges = len(edges)
    n_test = int(round(test_frac * n_edges))
    n_val = int(round(val_frac * n_edges))
    wanted = n_test + n_val

    rng = np.random.default_rng(seed)
    order = rng.permutation(n_edges)
    deg = graph.degrees.copy()
    held: list[int] = []
    for e in order:
        if len(held) == wanted:
            break
        u, v = edges[e]
        if deg[u] > 1 and deg[v] > 1:
            deg[u] -= 1
            deg[v] -= 1
            held.append(int(e))
    if len(held) < wanted:
        achievable = len(held) / n_edges
        raise SplitError(f"graph too sparse: only {len(held)} of {wanted} edges can be held out "
                         f"without isolating a node (achievable fraction {achievable:.4f})")

    held_arr = np.asarray(held, dtype=np.int64)
    test_pos = edges[held_arr[:n_test]]
    val_pos = edges[held_arr[n_test:]]
    keep = np.ones(n_edges, dtype=bool)
    keep[held_arr] = False
    train_graph = Graph.from_edges(graph.num_nodes, edges[keep])

    free = graph.num_nodes * (graph.num_nodes - 1) // 2 - n_edges
    n_neg = min(wanted, free)
    if n_neg < wanted:
        # dense graphs (e.g. a triangle) cannot supply matched negatives
        warnings.warn(f"only {free} non-edges exist; negative sets hold {n_neg} of {wanted} "
                      "edges", stacklevel=2)
    neg = sample_negative_edges(graph, n_neg, int(rng.integers(2**63 - 1)))
    return LinkSplit(train_graph, test_pos.reshape(-1, 2), val_pos.reshape(-1, 2),
                     neg[:n_test].reshape(-1, 2), neg[n_test:].reshape(-1, 2), int(seed))


def save_split(path: str | os.PathLike, split: LinkSplit) -> None:
    header = {"format": "anembed-split", "num_nodes": split.num_nodes, "seed": split.seed}
    _container.write(path, SPLIT_MAGIC, header, [
        split.train_graph.edges(), split.test_pos, split.val_pos, split.test_neg, split.val_neg,
    ])


def load_split(path: str | os.PathLike, num_nodes: int | None = None) -> LinkSplit:
    header, arrays = _container.read(path, SPLIT_MAGIC)
    if len(arrays) != 5:
        raise GraphFormatError(f"{path}: split file holds {len(arrays)} arrays, expected 5")
    m = int(header["num_nodes"])
    if num_nodes is not None and num_nodes != m:
        raise ShapeMismatchError(f"split has {m} nodes, expected {num_nodes}")
    train, test_pos, val_pos, test_neg, val_neg = (a.reshape(-1, 2) for a in arrays)
    return LinkSplit(Graph.from_edges(m, train), test_pos, val_pos, test_neg, val_neg,
                     int(header["seed"]))
