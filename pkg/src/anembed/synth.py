"""Stochastic-block-model graphs with block-correlated one-hot attributes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph_io import AttributeMatrix, Graph, LabelMap


@dataclass(frozen=True)
class SynthConfig:
    blocks: int = 4
    nodes_per_block: int = 50
    p_in: float = 0.15
    p_out: float = 0.01
    alpha: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.blocks < 1 or self.nodes_per_block < 1:
            raise ValueError("blocks and nodes_per_block must be positive")
        for name in ("p_in", "p_out", "alpha"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} is not a probability")


@dataclass(frozen=True)
class SynthDataset:
    graph: Graph
    attrs: AttributeMatrix
    labels: LabelMap
    added_edges: int       # edges added to give isolated nodes one neighbor


def make_sbm(config: SynthConfig) -> SynthDataset:
    """Sample an SBM graph, block labels and noisy one-hot block attributes.

    Each node's attribute names its own block with probability ``alpha`` and a
    uniformly chosen *other* block otherwise. Nodes left isolated by sampling
    are joined to one random member of their block so that every node can
    start a walk; the count is reported as ``added_edges``.
    """
    rng = np.random.default_rng(config.seed)
    b, n = config.blocks, config.nodes_per_block
    m = b * n
    block = np.repeat(np.arange(b), n)

    iu, ju = np.triu_indices(m, k=1)
    same = block[iu] == block[ju]
    prob = np.where(same, config.p_in, config.p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    deg = np.bincount(edges.reshape(-1), minlength=m)
    extra = []
    for node in np.flatnonzero(deg == 0):
        peers = np.flatnonzero(block == block[node])
        peers = peers[peers != node]
        if len(peers) == 0:
            peers = np.flatnonzero(np.arange(m) != node)
        if len(peers) == 0:
            continue
        other = int(rng.choice(peers))
        extra.append((min(node, other), max(node, other)))
        deg[node] += 1
        deg[other] += 1
    if extra:
        edges = np.unique(np.concatenate([edges, np.asarray(extra)]), axis=0)
    graph = Graph.from_edges(m, edges)

    attr_block = block.copy()
    flip = rng.random(m) >= config.alpha
    if b > 1:
        shift = rng.integers(1, b, size=m)
        attr_block[flip] = (block[flip] + shift[flip]) % b
    attrs = AttributeMatrix.from_rows(m, b, {i: [(int(attr_block[i]), 1.0)] for i in range(m)})
    return SynthDataset(graph, attrs, LabelMap(block, b), len(extra))
