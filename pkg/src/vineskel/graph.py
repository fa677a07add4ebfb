"""Locally connected graph, per-cluster MSTs, and MST cycle re-closure.

The proximity graph connects every pair of downsampled points within the
sweep radius ``r_s``. Kruskal's MST gives the initial skeletal path per
connected cluster, and ``close_mst_cycles`` restores the loop edges the
MST necessarily broke wherever canes drape over each other.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .cloud import PointCloud, SpatialIndex


class InvalidClusterError(ValueError):
    """Cluster handed to an operation that requires it to be connected."""


@dataclass(frozen=True)
class GraphConfig:
    """Sweep radius, loop-closure distance, and barb threshold (meters)."""

    r_s: float = 0.03
    delta_l: float = 0.15
    delta_b: float = 0.05

    def __post_init__(self):
        for name in ("r_s", "delta_l", "delta_b"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class SpatialGraph:
    """Undirected weighted graph over points of a downsampled cloud.

    ``positions`` is the full (N, 3) coordinate array the node ids index
    into; ``nodes`` lists the member ids; ``edges`` holds (i, j) pairs with
    i < j and ``weights`` their Euclidean lengths.
    """

    positions: np.ndarray
    nodes: np.ndarray
    edges: np.ndarray
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=np.int64))
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        edges = np.sort(edges, axis=1)
        object.__setattr__(self, "edges", edges)
        if self.weights is None:
            w = np.linalg.norm(
                self.positions[edges[:, 0]] - self.positions[edges[:, 1]], axis=1
            )
            object.__setattr__(self, "weights", w)
        if len(edges) and np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-loops are not allowed")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> dict[int, int]:
        deg = dict.fromkeys(self.nodes.tolist(), 0)
        for i, j in self.edges:
            deg[int(i)] += 1
            deg[int(j)] += 1
        return deg

    def adjacency(self) -> dict[int, list[tuple[int, float]]]:
        adj: dict[int, list[tuple[int, float]]] = {int(n): [] for n in self.nodes}
        for (i, j), w in zip(self.edges, self.weights):
            adj[int(i)].append((int(j), float(w)))
            adj[int(j)].append((int(i), float(w)))
        return adj

    def has_edge(self, i: int, j: int) -> bool:
        a, b = (i, j) if i < j else (j, i)
        return bool(np.any((self.edges[:, 0] == a) & (self.edges[:, 1] == b)))


def build_local_graph(cloud: PointCloud, r_s: float) -> SpatialGraph:
    """Connect every point pair with 0 < distance <= r_s (inclusive)."""
    if r_s <= 0:
        raise ValueError("r_s must be > 0")
    positions = cloud.positions
    nodes = np.arange(len(positions), dtype=np.int64)
    if len(positions) < 2:
        return SpatialGraph(positions, nodes, np.empty((0, 2), dtype=np.int64))
    index = SpatialIndex(positions)
    pairs = index._tree.query_pairs(r_s * SpatialIndex._SLACK, output_type="ndarray")
    if len(pairs):
        d = np.linalg.norm(positions[pairs[:, 0]] - positions[pairs[:, 1]], axis=1)
        keep = (d <= r_s) & (d > 0)
        pairs, d = pairs[keep], d[keep]
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs, d = pairs[order], d[order]
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
        d = np.empty(0)
    return SpatialGraph(positions, nodes, pairs, d)


def connected_clusters(graph: SpatialGraph) -> list[np.ndarray]:
    """Maximal connected components, largest first (ties: lowest node id)."""
    if graph.n_nodes == 0:
        return []
    compact = {int(n): k for k, n in enumerate(graph.nodes)}
    rows = np.array([compact[int(i)] for i in graph.edges[:, 0]], dtype=np.int64)
    cols = np.array([compact[int(j)] for j in graph.edges[:, 1]], dtype=np.int64)
    adj = coo_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(graph.n_nodes, graph.n_nodes)
    )
    _, labels = connected_components(adj, directed=False)
    clusters = []
    for lab in range(labels.max() + 1):
        members = graph.nodes[labels == lab]
        clusters.append(np.sort(members))
    clusters.sort(key=lambda c: (-len(c), int(c.min())))
    return clusters


def kruskal_mst(graph: SpatialGraph, cluster) -> SpatialGraph:
    """Minimum spanning tree of one connected cluster (Kruskal).

    Deterministic tie-break: edges considered in ascending
    (weight, min node id, max node id) order.
    """
    cluster = np.sort(np.asarray(list(cluster), dtype=np.int64))
    member = {int(n): k for k, n in enumerate(cluster)}
    in_cluster = np.isin(graph.edges[:, 0], cluster) & np.isin(graph.edges[:, 1], cluster)
    edges = graph.edges[in_cluster]
    weights = graph.weights[in_cluster]
    order = np.lexsort((edges[:, 1], edges[:, 0], weights))

    parent = np.arange(len(cluster))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    chosen = []
    chosen_w = []
    for k in order:
        i, j = member[int(edges[k, 0])], member[int(edges[k, 1])]
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            chosen.append(edges[k])
            chosen_w.append(weights[k])
            if len(chosen) == len(cluster) - 1:
                break
    if len(chosen) < len(cluster) - 1:
        raise InvalidClusterError(
            f"cluster of {len(cluster)} nodes is not connected "
            f"({len(chosen)} tree edges found)"
        )
    tree_edges = np.array(chosen, dtype=np.int64).reshape(-1, 2)
    return SpatialGraph(graph.positions, cluster, tree_edges, np.array(chosen_w))


def _tree_distances(adj, source: int) -> dict[int, float]:
    """Weighted shortest-path distances from source (Dijkstra)."""
    dist = {source: 0.0}
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, np.inf):
            continue
        for v, w in adj.get(u, ()):
            nd = d + w
            if nd < dist.get(v, np.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def close_mst_cycles(mst: SpatialGraph, local: SpatialGraph, delta_l: float) -> SpatialGraph:
    """Re-add local-graph edges between MST leaves to restore broken loops.

    A candidate is a single local-graph step between two degree-1 nodes of
    the forest. It is accepted when the path between the two leaves inside
    the start-of-pass forest is longer than ``delta_l`` (summed edge
    weights), which stops nearby barb tips from fusing into tiny loops.
    Candidates are evaluated once, in ascending (weight, min id) order,
    against the start-of-pass distances.
    """
    deg = mst.degrees()
    leaves = {n for n, d in deg.items() if d == 1}
    existing = {(int(i), int(j)) for i, j in mst.edges}

    cand = []
    for (i, j), w in zip(local.edges, local.weights):
        i, j = int(i), int(j)
        if i in leaves and j in leaves and (i, j) not in existing:
            cand.append((float(w), i, j))
    cand.sort()

    adj = mst.adjacency()
    dist_cache: dict[int, dict[int, float]] = {}
    added = []
    added_w = []
    for w, i, j in cand:
        if i not in dist_cache:
            dist_cache[i] = _tree_distances(adj, i)
        if dist_cache[i].get(j, np.inf) > delta_l:
            added.append((i, j))
            added_w.append(w)

    if not added:
        return mst
    edges = np.concatenate([mst.edges, np.array(added, dtype=np.int64)])
    weights = np.concatenate([mst.weights, np.array(added_w)])
    return SpatialGraph(mst.positions, mst.nodes, edges, weights)


def cycle_rank(graph: SpatialGraph) -> int:
    """Independent cycle count: E - V + C."""
    return graph.n_edges - graph.n_nodes + len(connected_clusters(graph))


def graph_dump(graph: SpatialGraph) -> dict:
    """JSON-ready {nodes: [[x,y,z]...], edges: [[i,j]...]} with local indices."""
    compact = {int(n): k for k, n in enumerate(graph.nodes)}
    return {
        "nodes": [[float(c) for c in graph.positions[n]] for n in graph.nodes],
        "edges": [[compact[int(i)], compact[int(j)]] for i, j in graph.edges],
    }
