"""Joint line fitting over shared endpoints, and the radius linear system.

Line fitting subdivides each topological edge into segments whose endpoint
coordinates form one concatenated state vector. Endpoints are shared where
chains meet, so connectivity is structural rather than approximate, and
the whole state is optimized jointly: alternate nearest-segment point
assignment with a damped Gauss-Newton step on the summed squared
point-to-segment distance.

Radii are then estimated per cluster from one overdetermined linear system
balancing a prior value, smoothing across shared endpoints, and the
point-to-segment distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, identity
from scipy.sparse.linalg import spsolve

from .cloud import PointCloud
from .skeleton import Skeleton
from .topology import TopologyGraph

DEFAULT_SEG_LEN = 0.10
DEFAULT_BATCH_LIMIT = 3000
MIN_RADIUS = 5e-4  # clamp for non-positive least-squares radii (meters)


@dataclass(frozen=True)
class RadiusSystem:
    """Resolved weights of the radius least-squares system.

    ``gamma_p`` and ``gamma_s`` multiply the squared prior and smoothing
    residuals; point rows have weight 1. ``k`` is the cluster's average
    number of points per radius unknown.
    """

    gamma_p: float
    gamma_s: float
    r_prior: float
    k: float

    def __post_init__(self):
        if self.gamma_p < 0 or self.gamma_s < 0:
            raise ValueError("gamma weights must be >= 0")
        if self.r_prior <= 0:
            raise ValueError("r_prior must be > 0")
        if self.k <= 0:
            raise ValueError("k must be > 0")

    @classmethod
    def from_cluster(
        cls,
        n_points: int,
        n_segments: int,
        r_prior: float = 0.005,
        gamma_p_scale: float = 1.0,
        gamma_s_scale: float = 0.1,
    ) -> "RadiusSystem":
        # k = |P| / |R|; an unsupported cluster still needs a usable prior row
        k = n_points / n_segments if n_points > 0 else 1.0
        return cls(gamma_p_scale * k, gamma_s_scale * k, r_prior, k)


@dataclass
class FitResult:
    skeleton: Skeleton
    point_segments: np.ndarray   # segment index per input point (-1 if none)
    point_distances: np.ndarray  # point-to-assigned-segment distance
    objective_history: list = field(default_factory=list)  # one array per batch


def point_segment_distances(points, a, b):
    """Clamped point-to-segment distances plus the parameters/offsets.

    Returns (d, t, e): distance, clamp parameter in [0, 1], and the offset
    vector from the closest segment point to each input point.
    """
    d_ab = b - a
    l2 = np.einsum("ij,ij->i", d_ab, d_ab)
    t = np.einsum("ij,ij->i", points - a, d_ab) / np.maximum(l2, 1e-300)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * d_ab
    e = points - closest
    return np.linalg.norm(e, axis=1), t, e


def _chain_breakpoints(chain: np.ndarray, positions: np.ndarray, seg_len: float) -> np.ndarray:
    """Chain indices of the segment endpoints, evenly spaced by arc length."""
    pts = positions[chain]
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    total = arc[-1]
    closed = chain[0] == chain[-1]
    n_seg = max(3 if closed else 1, int(round(total / seg_len)) if total > 0 else 1)
    n_seg = min(n_seg, len(chain) - 1)
    targets = np.linspace(0.0, total, n_seg + 1)
    idx = [int(np.argmin(np.abs(arc - s))) for s in targets]
    # keep indices strictly increasing so no segment degenerates
    out = [idx[0]]
    for i in idx[1:]:
        out.append(max(i, out[-1] + 1))
    return np.array([i for i in out if i < len(chain)], dtype=np.int64)


def build_segments(topo: TopologyGraph, seg_len: float):
    """Subdivide chains into segments with node-keyed shared variables.

    Returns (init_positions (V,3), seg_a, seg_b, seg_edge) where seg_a/b
    index the shared variable array.
    """
    node_var: dict[int, int] = {}
    init: list[np.ndarray] = []
    seg_a, seg_b, seg_edge = [], [], []

    def var_of(node: int) -> int:
        if node not in node_var:
            node_var[node] = len(init)
            init.append(topo.positions[node])
        return node_var[node]

    for k, chain in enumerate(topo.chains):
        if len(chain) < 2:
            continue
        brk = _chain_breakpoints(chain, topo.positions, seg_len)
        for i in range(len(brk) - 1):
            seg_a.append(var_of(int(chain[brk[i]])))
            seg_b.append(var_of(int(chain[brk[i + 1]])))
            seg_edge.append(k)
    return (
        np.array(init).reshape(-1, 3),
        np.array(seg_a, dtype=np.int64),
        np.array(seg_b, dtype=np.int64),
        np.array(seg_edge, dtype=np.int64),
    )


def _assign_to_segments(points, X, seg_a, seg_b, seg_edge, point_edges):
    """Nearest segment per point, restricted to the point's own edge."""
    n = len(points)
    assign = np.full(n, -1, dtype=np.int64)
    dist = np.full(n, np.nan)
    for k in np.unique(seg_edge):
        p_idx = np.flatnonzero(point_edges == k)
        s_idx = np.flatnonzero(seg_edge == k)
        if len(p_idx) == 0 or len(s_idx) == 0:
            continue
        best_d = np.full(len(p_idx), np.inf)
        best_s = np.zeros(len(p_idx), dtype=np.int64)
        for s in s_idx:
            d, _, _ = point_segment_distances(
                points[p_idx], X[seg_a[s]][None, :], X[seg_b[s]][None, :]
            )
            better = d < best_d
            best_d[better] = d[better]
            best_s[better] = s
        assign[p_idx] = best_s
        dist[p_idx] = best_d
    return assign, dist


def _gauss_newton(points, X, seg_a, seg_b, free_vars, assign, lam0, max_retries=25):
    """One damped Gauss-Newton step on the free variables; returns (X, obj, lam, moved)."""
    n_free = len(free_vars)
    var_slot = {int(v): i for i, v in enumerate(free_vars)}
    mask = assign >= 0
    pts = points[mask]
    a_idx = seg_a[assign[mask]]
    b_idx = seg_b[assign[mask]]

    d, t, e = point_segment_distances(pts, X[a_idx], X[b_idx])
    obj = float(np.dot(d, d))
    safe = np.maximum(d, 1e-300)
    u = e / safe[:, None]

    rows, cols, vals = [], [], []
    rng = np.arange(len(pts))
    for which, idx, coef in (("a", a_idx, -(1.0 - t)), ("b", b_idx, -t)):
        slots = np.array([var_slot.get(int(v), -1) for v in idx])
        ok = slots >= 0
        for axis in range(3):
            rows.append(rng[ok])
            cols.append(slots[ok] * 3 + axis)
            vals.append(coef[ok] * u[ok, axis])
    J = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(pts), n_free * 3),
    ).tocsr()

    jt_r = J.T @ d
    jt_j = (J.T @ J).tocsc()
    lam = lam0
    for _ in range(max_retries):
        try:
            delta = spsolve(jt_j + lam * identity(n_free * 3, format="csc"), -jt_r)
        except RuntimeError:
            lam *= 10.0
            continue
        if not np.all(np.isfinite(delta)):
            lam *= 10.0
            continue
        X_try = X.copy()
        X_try[free_vars] += delta.reshape(n_free, 3)
        d_try, _, _ = point_segment_distances(pts, X_try[a_idx], X_try[b_idx])
        obj_try = float(np.dot(d_try, d_try))
        if obj_try < obj:
            motion = float(np.max(np.linalg.norm(delta.reshape(n_free, 3), axis=1)))
            return X_try, obj_try, max(lam / 10.0, 1e-12), motion
        lam *= 10.0
    return X, obj, lam, 0.0  # no improving step found: converged


def _make_batches(seg_edge, seg_a, seg_b, batch_limit):
    """Greedy consecutive spans of segments, each touching <= batch_limit variables."""
    batches = []
    current: list[int] = []
    vars_in: set[int] = set()
    for s in range(len(seg_edge)):
        sv = {int(seg_a[s]), int(seg_b[s])}
        if current and len(vars_in | sv) > batch_limit:
            batches.append(np.array(current, dtype=np.int64))
            current = []
            vars_in = set()
        current.append(s)
        vars_in |= sv
    if current:
        batches.append(np.array(current, dtype=np.int64))
    return batches


def fit_lines(
    topo: TopologyGraph,
    cloud: PointCloud,
    point_edges: np.ndarray,
    seg_len: float = DEFAULT_SEG_LEN,
    batch_limit: int = DEFAULT_BATCH_LIMIT,
    max_iters: int = 50,
    motion_tol: float = 1e-5,
    lam0: float = 1e-3,
    cluster_id: int = 0,
) -> FitResult:
    """Fit skeletal line segments to the points of each topological edge.

    ``point_edges`` maps each cloud point to its topological edge (from
    ``topology.associate_points``). When the shared-variable count exceeds
    ``batch_limit``, consecutive spans of segments are optimized in
    sequence; neighboring spans share their boundary variables so the
    state stays continuous across batches. Radii are left unset.
    """
    if not topo.chains:
        return FitResult(Skeleton(), np.full(len(cloud), -1, dtype=np.int64), np.full(len(cloud), np.nan))
    X, seg_a, seg_b, seg_edge = build_segments(topo, seg_len)
    if len(seg_a) == 0:
        return FitResult(Skeleton(), np.full(len(cloud), -1, dtype=np.int64), np.full(len(cloud), np.nan))
    points = cloud.positions
    point_edges = np.asarray(point_edges, dtype=np.int64)

    batches = _make_batches(seg_edge, seg_a, seg_b, batch_limit)
    histories = []
    for batch in batches:
        in_batch = np.zeros(len(seg_edge), dtype=bool)
        in_batch[batch] = True
        free_vars = np.unique(np.concatenate([seg_a[batch], seg_b[batch]]))
        history = []
        lam = lam0
        for _ in range(max_iters):
            assign, _ = _assign_to_segments(points, X, seg_a, seg_b, seg_edge, point_edges)
            usable = (assign >= 0) & in_batch[np.maximum(assign, 0)]
            assign[~usable] = -1
            if not np.any(assign >= 0):
                break
            X, obj, lam, motion = _gauss_newton(points, X, seg_a, seg_b, free_vars, assign, lam)
            history.append(obj)
            if motion < motion_tol:
                break
        histories.append(np.array(history))

    assign, dist = _assign_to_segments(points, X, seg_a, seg_b, seg_edge, point_edges)
    skeleton = Skeleton(
        X, seg_a, seg_b,
        edge_ids=seg_edge,
        cluster_ids=np.full(len(seg_a), cluster_id, dtype=np.int64),
    )
    return FitResult(skeleton, assign, dist, histories)


def _smoothing_pairs(skeleton: Skeleton, segs: np.ndarray) -> list[tuple[int, int]]:
    """Segment pairs (local indices) sharing an endpoint variable."""
    by_endpoint: dict[int, list[int]] = {}
    for local, s in enumerate(segs):
        for v in (int(skeleton.seg_a[s]), int(skeleton.seg_b[s])):
            by_endpoint.setdefault(v, []).append(local)
    pairs = set()
    for members in by_endpoint.values():
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                pairs.add((members[i], members[j]))
    return sorted(pairs)


def radius_rows(n_segs, pairs, point_seg_local, deltas, sys: RadiusSystem):
    """Sparse design matrix and rhs of the radius system, sqrt-weighted."""
    rows, cols, vals, b = [], [], [], []
    r = 0
    wp = np.sqrt(sys.gamma_p)
    for i in range(n_segs):
        rows.append(r)
        cols.append(i)
        vals.append(wp)
        b.append(wp * sys.r_prior)
        r += 1
    ws = np.sqrt(sys.gamma_s)
    if ws > 0:
        for i, j in pairs:
            rows.extend([r, r])
            cols.extend([i, j])
            vals.extend([ws, -ws])
            b.append(0.0)
            r += 1
    for s, dk in zip(point_seg_local, deltas):
        rows.append(r)
        cols.append(int(s))
        vals.append(1.0)
        b.append(float(dk))
        r += 1
    A = coo_matrix((vals, (rows, cols)), shape=(r, n_segs)).tocsr()
    return A, np.array(b)


def estimate_radii(
    skeleton: Skeleton,
    point_segments: np.ndarray,
    point_distances: np.ndarray,
    r_prior: float = 0.005,
    gamma_p_scale: float = 1.0,
    gamma_s_scale: float = 0.1,
    min_radius: float = MIN_RADIUS,
) -> Skeleton:
    """Solve the per-cluster radius least-squares system.

    Each cluster gets prior rows (weight gamma_p = gamma_p_scale * k),
    smoothing rows between endpoint-sharing segment pairs (weight
    gamma_s = gamma_s_scale * k), and one row r_i = delta_k per supporting
    point, where k = |P| / |R| for that cluster. The sparse normal
    equations are solved directly; radii are clamped below at
    ``min_radius``.
    """
    if skeleton.n_segments == 0:
        return skeleton
    point_segments = np.asarray(point_segments, dtype=np.int64)
    radii = np.full(skeleton.n_segments, np.nan)
    for cluster in np.unique(skeleton.cluster_ids):
        segs = np.flatnonzero(skeleton.cluster_ids == cluster)
        local_of = {int(s): i for i, s in enumerate(segs)}
        mask = (point_segments >= 0) & np.isin(point_segments, segs)
        local_pts = np.array([local_of[int(s)] for s in point_segments[mask]], dtype=np.int64)
        deltas = np.asarray(point_distances)[mask]
        sys = RadiusSystem.from_cluster(
            int(mask.sum()), len(segs), r_prior, gamma_p_scale, gamma_s_scale
        )
        pairs = _smoothing_pairs(skeleton, segs)
        A, b = radius_rows(len(segs), pairs, local_pts, deltas, sys)
        ata = (A.T @ A).tocsc()
        atb = A.T @ b
        try:
            r = spsolve(ata, atb)
            if not np.all(np.isfinite(r)):
                raise RuntimeError("singular radius system")
        except RuntimeError:
            r = np.linalg.lstsq(A.toarray(), b, rcond=None)[0]
        radii[segs] = np.maximum(r, min_radius)
    out = Skeleton(
        skeleton.endpoints.copy(), skeleton.seg_a, skeleton.seg_b,
        radii, skeleton.edge_ids, skeleton.cluster_ids,
    )
    return out
