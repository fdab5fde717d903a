"""Sparse undirected graphs, SGC propagation, neighbor sampling and SBM fixtures."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError


def _readonly(a):
    a.setflags(write=False)
    return a


def canonical_edges(edges, num_nodes):
    """Symmetrize, drop self-loops and duplicates; returns sorted (E, 2) int64 with u < v."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise ValueError(f"edge endpoint out of range [0, {num_nodes})")
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Undirected node-labeled graph.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``,
    sorted lexicographically. Use :meth:`from_edges` to build one from an
    arbitrary (possibly directed, duplicated) pair list.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[0] != self.num_nodes:
            raise ShapeError(
                f"features must be ({self.num_nodes}, F), got {features.shape}")
        if labels.shape[0] != self.num_nodes:
            raise ShapeError(
                f"expected {self.num_nodes} labels, got {labels.shape[0]}")
        if len(edges):
            if edges.min() < 0 or edges.max() >= self.num_nodes:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValueError("edges must satisfy u < v (no self-loops)")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges = edges[order]
            if np.any(np.all(edges[1:] == edges[:-1], axis=1)):
                raise ValueError("duplicate edge")
        object.__setattr__(self, "edges", _readonly(np.array(edges)))
        object.__setattr__(self, "features", _readonly(np.array(features)))
        object.__setattr__(self, "labels", _readonly(np.array(labels)))

    @classmethod
    def from_edges(cls, num_nodes, edges, features, labels):
        return cls(num_nodes, canonical_edges(edges, num_nodes), features, labels)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @cached_property
    def adjacency(self):
        """Symmetric 0/1 CSR adjacency without self-loops."""
        n = self.num_nodes
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.ones(len(rows), dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def neighbors(self, node):
        a = self.adjacency
        return a.indices[a.indptr[node]:a.indptr[node + 1]]

    def degrees(self):
        return np.diff(self.adjacency.indptr)

    def __eq__(self, other):
        if not isinstance(other, SparseGraph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.labels, other.labels)
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes())

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SampledSubgraph(SparseGraph):
    """Induced subgraph that remembers where it came from.

    ``node_ids[i]`` is the source-graph id of local node ``i``;
    ``seed_positions`` are the local indices of the seed nodes, in seed order.
    """

    node_ids: np.ndarray = field(default=None)
    seed_positions: np.ndarray = field(default=None)


def induced_subgraph(graph, nodes):
    """Subgraph on ``nodes`` (kept in the given order) with all edges among them."""
    nodes = np.asarray(nodes, dtype=np.int64)
    local = np.full(graph.num_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    e = local[graph.edges] if len(graph.edges) else np.zeros((0, 2), np.int64)
    e = e[(e[:, 0] >= 0) & (e[:, 1] >= 0)]
    return SparseGraph(
        len(nodes),
        canonical_edges(e, len(nodes)),
        graph.features[nodes],
        graph.labels[nodes],
    )


def normalize_adjacency(graph):
    """Return ``D^-1/2 (A + I) D^-1/2`` as a CSR matrix.

    Entry ``(i, j)`` is computed as ``1 / sqrt(d_i * d_j)``, which is symmetric
    to the bit and exact on regular graphs.
    """
    n = graph.num_nodes
    if n == 0:
        return sp.csr_matrix((0, 0), dtype=np.float64)
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    diag = np.arange(n, dtype=np.int64)
    rows = np.concatenate([u, v, diag])
    cols = np.concatenate([v, u, diag])
    deg = graph.degrees().astype(np.float64) + 1.0
    data = 1.0 / np.sqrt(deg[rows] * deg[cols])
    s = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    s.sort_indices()
    return s


def propagate(s, x, k):
    """Apply ``s`` to ``x`` ``k`` times (``S^k X``)."""
    if k < 0:
        raise ValueError("hop count must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be 2-D, got shape {x.shape}")
    if s.shape[0] != s.shape[1] or s.shape[1] != x.shape[0]:
        raise ShapeError(
            f"propagation matrix {s.shape} incompatible with features {x.shape}")
    out = x
    for _ in range(k):
        out = np.asarray(s @ out)
    return out


def sgc_features(graph, k):
    return propagate(normalize_adjacency(graph), graph.features, k)


def sample_neighborhood(graph, seeds, fanout=5, hops=2, rng=None):
    """Sample a fixed-fanout neighborhood around ``seeds``.

    Each hop draws at most ``fanout`` neighbors of every frontier node,
    uniformly and without replacement. The result is the subgraph induced on
    the seeds plus every sampled node, seeds first.
    """
    if fanout < 1 or hops < 1:
        raise ValueError("fanout and hops must be >= 1")
    rng = np.random.default_rng(rng)
    seeds = list(dict.fromkeys(int(s) for s in seeds))
    for s in seeds:
        if not 0 <= s < graph.num_nodes:
            raise ValueError(f"seed {s} is not a node id")
    adj = graph.adjacency
    seen = np.zeros(graph.num_nodes, dtype=bool)
    seen[seeds] = True
    order = [np.asarray(seeds, dtype=np.int64)]
    frontier = order[0]
    for _ in range(hops):
        if not len(frontier):
            break
        starts = adj.indptr[frontier]
        degs = adj.indptr[frontier + 1] - starts
        total = int(degs.sum())
        if total == 0:
            break
        # random permutation inside each frontier node's neighbor list, keep the first `fanout`
        seg = np.repeat(np.arange(len(frontier)), degs)
        seg_start = np.repeat(np.cumsum(degs) - degs, degs)
        entry = np.repeat(starts, degs) + (np.arange(total) - seg_start)
        perm = np.lexsort((rng.random(total), seg))
        keep = perm[(np.arange(total) - seg_start) < fanout]
        picked = adj.indices[entry[keep]]
        picked = picked[~seen[picked]]
        _, first = np.unique(picked, return_index=True)
        new = picked[np.sort(first)]
        seen[new] = True
        order.append(new)
        frontier = new
    node_ids = np.concatenate(order)
    sub = induced_subgraph(graph, node_ids)
    return SampledSubgraph(
        sub.num_nodes, sub.edges, sub.features, sub.labels,
        node_ids=_readonly(node_ids),
        seed_positions=_readonly(np.arange(len(seeds), dtype=np.int64)),
    )


@dataclass(frozen=True)
class SbmParams:
    block_sizes: tuple
    intra_prob: float
    inter_prob: float
    feature_dim: int = 16
    feature_center_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if not self.block_sizes or any(b <= 0 for b in self.block_sizes):
            raise ValueError("block_sizes must be non-empty and positive")
        for name in ("intra_prob", "inter_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


def generate_sbm(params):
    """Stochastic block model graph with Gaussian block-centered features.

    Node ``i`` of block ``c`` gets label ``c``. Each block draws a random mean
    direction scaled to ``feature_center_scale``; node features are that mean
    plus i.i.d. standard normal noise.
    """
    rng = np.random.default_rng(params.seed)
    sizes = params.block_sizes
    starts = np.concatenate([[0], np.cumsum(sizes)])
    n = int(starts[-1])
    chunks = []
    for a in range(len(sizes)):
        for b in range(a, len(sizes)):
            p = params.intra_prob if a == b else params.inter_prob
            hit = rng.random((sizes[a], sizes[b])) < p
            if a == b:
                hit = np.triu(hit, k=1)
            i, j = np.nonzero(hit)
            chunks.append(np.stack([i + starts[a], j + starts[b]], axis=1))
    edges = np.concatenate(chunks) if chunks else np.zeros((0, 2), np.int64)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    centers = np.abs(rng.normal(size=(len(sizes), params.feature_dim)))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= params.feature_center_scale
    features = centers[labels] + rng.normal(size=(n, params.feature_dim))
    return SparseGraph.from_edges(n, edges, features, labels)
