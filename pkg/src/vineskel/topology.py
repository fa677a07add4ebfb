"""Directed orientation, barb removal, and cane topology extraction.

The cycle-closed cluster graph is oriented from a root by breadth-first
search. Where two BFS branches meet around a physical loop, the meet node
gains a second parent and is recorded as a loop point so the loop survives
the later tree-style processing. Short leaf-terminated chains (barbs) are
pruned, then all mid-nodes are collapsed into chains: the topological
edges, each representing one non-branching stretch of cane.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, SpatialIndex
from .graph import SpatialGraph

log = logging.getLogger(__name__)


@dataclass
class DirectedGraph:
    """Rooted directed graph over cluster nodes; edges run parent -> child."""

    positions: np.ndarray
    root: int
    edges: np.ndarray  # (E, 2) int64 (parent, child)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    def nodes(self) -> np.ndarray:
        if len(self.edges) == 0:
            return np.array([self.root], dtype=np.int64)
        return np.unique(np.append(self.edges.ravel(), self.root))

    def parents(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {int(n): [] for n in self.nodes()}
        for p, c in self.edges:
            out[int(c)].append(int(p))
        return out

    def children(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {int(n): [] for n in self.nodes()}
        for p, c in self.edges:
            out[int(p)].append(int(c))
        return out

    def in_degrees(self) -> dict[int, int]:
        return {n: len(ps) for n, ps in self.parents().items()}

    def edge_length(self, a: int, b: int) -> float:
        return float(np.linalg.norm(self.positions[a] - self.positions[b]))

    def undirected_adjacency(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {int(n): [] for n in self.nodes()}
        for p, c in self.edges:
            adj[int(p)].append(int(c))
            adj[int(c)].append(int(p))
        return {n: sorted(nbrs) for n, nbrs in adj.items()}


def orient_from_root(graph: SpatialGraph, root: int) -> DirectedGraph:
    """Breadth-first orientation of one cluster away from ``root``.

    Levels are expanded in ascending node index. The first discovery of a
    node creates its tree edge; an edge whose far end is already visited is
    kept as a forward edge into that node, which therefore gains a second
    parent (the loop meet point). Nodes unreachable from the root are not
    part of the result.
    """
    if root not in set(int(n) for n in graph.nodes):
        raise ValueError(f"root {root} not in graph")
    adj: dict[int, list[int]] = {int(n): [] for n in graph.nodes}
    for i, j in graph.edges:
        adj[int(i)].append(int(j))
        adj[int(j)].append(int(i))
    adj = {n: sorted(nbrs) for n, nbrs in adj.items()}

    visited = {root}
    directed: set[tuple[int, int]] = set()
    edges: list[tuple[int, int]] = []
    level = [root]
    while level:
        nxt = []
        for u in sorted(level):
            for v in adj[u]:
                if (u, v) in directed or (v, u) in directed:
                    continue
                directed.add((u, v))
                edges.append((u, v))
                if v not in visited:
                    visited.add(v)
                    nxt.append(v)
        level = nxt
    return DirectedGraph(graph.positions, root, np.array(edges, dtype=np.int64).reshape(-1, 2))


def detect_loop_points(dgraph: DirectedGraph) -> list[int]:
    """Nodes with two or more incoming directed edges, ascending."""
    return sorted(n for n, d in dgraph.in_degrees().items() if d >= 2)


def root_by_strategy(cloud_positions: np.ndarray, cluster, strategy: str = "min-z") -> int:
    """Pick the orientation root for a cluster of node ids."""
    cluster = np.asarray(list(cluster), dtype=np.int64)
    if strategy == "min-z":
        return int(cluster[np.argmin(cloud_positions[cluster, 2])])
    if strategy == "max-degree":
        raise ValueError("max-degree strategy needs a graph; use root_by_degree")
    if strategy.startswith("index:"):
        idx = int(strategy.split(":", 1)[1])
        if idx not in set(cluster.tolist()):
            raise ValueError(f"root index {idx} not in cluster")
        return idx
    raise ValueError(f"unknown root strategy {strategy!r}")


def root_by_degree(graph: SpatialGraph, cluster) -> int:
    deg = graph.degrees()
    cluster = sorted(int(n) for n in cluster)
    return max(cluster, key=lambda n: (deg.get(n, 0), -n))


def remove_barbs(dgraph: DirectedGraph, delta_b: float) -> DirectedGraph:
    """Prune leaf-terminated chains shorter than ``delta_b``, to fixpoint.

    A chain runs from a leaf (no children) upstream through pure mid-nodes
    (one parent, one child) and is measured as the summed length of the
    edges it would delete, including the edge from its anchor node. Loop
    points and the root are never deleted, and chains never extend through
    them; a chain whose anchor is a loop point is kept so loop-incident
    edges survive.
    """
    edges = {(int(p), int(c)) for p, c in dgraph.edges}
    loop_pts = set(detect_loop_points(dgraph))
    root = dgraph.root
    while True:
        parents: dict[int, list[int]] = {}
        children: dict[int, list[int]] = {}
        node_set = {root}
        for p, c in edges:
            parents.setdefault(c, []).append(p)
            children.setdefault(p, []).append(c)
            node_set.add(p)
            node_set.add(c)

        doomed_nodes: set[int] = set()
        doomed_edges: set[tuple[int, int]] = set()
        for leaf in sorted(node_set):
            if children.get(leaf) or leaf == root or leaf in loop_pts:
                continue
            if len(parents.get(leaf, [])) != 1:
                continue
            chain = [leaf]
            cur = leaf
            while True:
                up = parents.get(cur, [])
                if len(up) != 1:
                    break
                p = up[0]
                if p == root or p in loop_pts or len(children.get(p, [])) != 1 or len(parents.get(p, [])) != 1:
                    break
                chain.append(p)
                cur = p
            anchor = parents.get(cur, [None])[0]
            if anchor is None or anchor in loop_pts:
                continue
            links = [(anchor, chain[-1])] + [
                (chain[k + 1], chain[k]) for k in range(len(chain) - 1)
            ]
            length = sum(dgraph.edge_length(a, b) for a, b in links)
            if length < delta_b:
                doomed_nodes.update(chain)
                doomed_edges.update(links)
        if not doomed_nodes:
            break
        edges = {
            (p, c) for p, c in edges
            if (p, c) not in doomed_edges and p not in doomed_nodes and c not in doomed_nodes
        }
    out = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return DirectedGraph(dgraph.positions, root, out)


@dataclass
class TopoNode:
    node: int
    kind: str  # junction | leaf | loop


@dataclass
class TopologyGraph:
    """Graph of junction/leaf/loop nodes; each edge is a chain of one cane.

    ``chains[k]`` is the full node-id sequence of topological edge ``k``;
    its first and last entries are retained nodes, everything between is a
    dissolved mid-node. A chain may close on itself (first == last) for a
    loop hanging off a single junction or a free ring.
    """

    positions: np.ndarray
    nodes: list[TopoNode] = field(default_factory=list)
    chains: list[np.ndarray] = field(default_factory=list)

    def node_kinds(self) -> dict[int, str]:
        return {t.node: t.kind for t in self.nodes}

    def chain_length(self, k: int) -> float:
        chain = self.chains[k]
        if len(chain) < 2:
            return 0.0
        pts = self.positions[chain]
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())

    def total_length(self) -> float:
        return sum(self.chain_length(k) for k in range(len(self.chains)))

    def cycle_rank(self) -> int:
        ids = {t.node for t in self.nodes}
        parent = {n: n for n in ids}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for chain in self.chains:
            a, b = find(int(chain[0])), find(int(chain[-1]))
            if a != b:
                parent[a] = b
        comps = len({find(n) for n in ids})
        return len(self.chains) - len(ids) + comps


def extract_topology(dgraph: DirectedGraph) -> TopologyGraph:
    """Collapse mid-nodes into chains between junction/leaf/loop nodes.

    Loop points with exactly two incoming edges and no children sit on a
    degree-2 path, so the collapse walks straight through them: the two
    directed loop halves (the shorter one traversed in reverse) fuse into
    one continuous junction-to-junction chain. Loop points with three or
    more parents are kept as junction nodes, with a warning.
    """
    adj = dgraph.undirected_adjacency()
    in_deg = dgraph.in_degrees()
    loop_pts = {n for n, d in in_deg.items() if d >= 2}
    degree = {n: len(nbrs) for n, nbrs in adj.items()}

    keep: set[int] = set()
    for n, d in degree.items():
        if n in loop_pts and in_deg[n] >= 3:
            keep.add(n)
            log.warning("loop point %d has %d incoming edges; kept as a junction", n, in_deg[n])
        elif d != 2:
            keep.add(n)

    # pure cycles have no degree!=2 node; anchor them at their loop point
    seen: set[int] = set()
    for n in sorted(adj):
        if n in seen:
            continue
        stack, comp = [n], []
        seen.add(n)
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if not any(c in keep for c in comp):
            loops = sorted(c for c in comp if c in loop_pts)
            keep.add(loops[0] if loops else min(comp))

    def kind_of(n: int) -> str:
        if n in loop_pts:
            return "loop"
        return "junction" if degree[n] >= 2 else "leaf"

    nodes = [TopoNode(n, kind_of(n)) for n in sorted(keep)]
    used: set[tuple[int, int]] = set()
    chains: list[np.ndarray] = []
    for start in sorted(keep):
        for nbr in adj[start]:
            if (start, nbr) in used:
                continue
            chain = [start, nbr]
            used.add((start, nbr))
            used.add((nbr, start))
            cur, prev = nbr, start
            while cur not in keep:
                nxt = [v for v in adj[cur] if v != prev]
                if len(nxt) != 1:  # defensive: collapse walked into a non-chain node
                    break
                prev, cur = cur, nxt[0]
                used.add((prev, cur))
                used.add((cur, prev))
                chain.append(cur)
            chains.append(np.array(chain, dtype=np.int64))
    return TopologyGraph(dgraph.positions, nodes, chains)


def associate_points(cloud: PointCloud, topo: TopologyGraph) -> np.ndarray:
    """Assign each original point to the edge of its nearest chain node.

    Ties (a junction node shared by several chains, or equidistant nodes)
    resolve to the lowest edge index. Returns an int array of edge ids.
    """
    if not topo.chains:
        raise ValueError("topology has no edges")
    node_edge: dict[int, int] = {}
    for k, chain in enumerate(topo.chains):
        for n in chain:
            node_edge.setdefault(int(n), k)
    node_ids = np.array(sorted(node_edge), dtype=np.int64)
    node_pos = topo.positions[node_ids]
    edge_of = np.array([node_edge[int(n)] for n in node_ids])

    index = SpatialIndex(node_pos)
    n_pts = len(cloud)
    out = np.empty(n_pts, dtype=np.int64)
    k = min(4, len(node_ids))
    d_k, i_k = index._tree.query(cloud.positions, k=k)
    d_k = np.atleast_2d(d_k)
    i_k = np.atleast_2d(i_k)
    for p in range(n_pts):
        cand = i_k[p]
        d = np.linalg.norm(node_pos[cand] - cloud.positions[p], axis=1)
        d0 = d.min()
        if k == len(node_ids):
            ties = cand[d == d0]
        else:
            ball = index.radius_query(cloud.positions[p], d0)
            db = np.linalg.norm(node_pos[ball] - cloud.positions[p], axis=1)
            ties = ball[db == d0]
        out[p] = edge_of[ties].min()
    return out


def topology_dump(topo: TopologyGraph) -> dict:
    """JSON-ready dump: nodes with coordinates and kind, edges as chains."""
    return {
        "nodes": [
            {"id": int(t.node), "xyz": [float(c) for c in topo.positions[t.node]], "kind": t.kind}
            for t in topo.nodes
        ],
        "edges": [
            {"id": k, "chain": [int(n) for n in chain]} for k, chain in enumerate(topo.chains)
        ],
    }
