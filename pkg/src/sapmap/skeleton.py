"""Curve-skeleton extraction for sapling point clouds.

The pipeline follows the classic Laplacian-contraction recipe adapted to
unorganised points: build a k-nearest-neighbour graph, iteratively solve a
stacked least-squares system that balances a contraction term (the umbrella
graph Laplacian pulling every point towards its neighbourhood centroid)
against per-point attraction to the original positions, then summarise the
collapsed cloud as a graph via farthest-point sampling and a minimum spanning
tree. Short terminal branches are pruned afterwards.

Two regimes matter in practice:

* voxel-downsampled input gives a clean branch-topology skeleton for trait
  extraction;
* full-resolution input over-skeletonises: dense foliage collapses into many
  short terminal twigs, which downstream leaf/wood segmentation exploits.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import cg, splu
from scipy.spatial import cKDTree

from .core import PointCloud, SkeletonGraph, float_repr
from .errors import ParseError, SolverError

WEIGHT_CAP = 2048.0


@dataclass(frozen=True)
class ContractionParams:
    """Tuning knobs for the iterative Laplacian contraction.

    The initial contraction weight is ``init_contraction_weight_factor /
    (10 * mean neighbour distance)`` and is multiplied by ``amplification``
    each iteration (capped at 2048); attraction weights start at
    ``attraction_weight`` and grow with each point's local shrinkage ratio.
    Iteration stops when the mean distance of points to their neighbourhood
    centroid falls below ``convergence_ratio`` times its initial value, when
    that proxy improves by less than ``stall_fraction`` over an iteration
    (further iterations only erode free ends), or at ``max_iterations``.
    Clouds larger than ``cg_point_threshold`` switch from a direct sparse
    factorisation to conjugate gradients.
    """

    k_neighbors: int = 16
    init_contraction_weight_factor: float = 1.0
    attraction_weight: float = 1.0
    amplification: float = 3.0
    max_iterations: int = 20
    convergence_ratio: float = 0.01
    stall_fraction: float = 0.02
    solver_tolerance: float = 1e-8
    cg_point_threshold: int = 200_000

    def __post_init__(self):
        if self.k_neighbors < 4:
            raise ValueError("k_neighbors must be >= 4")
        for name in ("init_contraction_weight_factor", "attraction_weight",
                     "amplification", "solver_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.convergence_ratio < 1:
            raise ValueError("convergence_ratio must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class TopologyParams:
    """Graph-extraction scales, expressed relative to the cloud.

    ``sample_radius_fraction`` scales the farthest-point-sampling radius by
    the bounding-box diagonal; terminal branches shorter than
    ``min_branch_length_factor`` times that radius are pruned.
    """

    sample_radius_fraction: float = 0.02
    min_branch_length_factor: float = 3.0

    def __post_init__(self):
        if self.sample_radius_fraction <= 0 or self.min_branch_length_factor <= 0:
            raise ValueError("topology parameters must be positive")

    def sample_radius(self, cloud: PointCloud) -> float:
        return self.sample_radius_fraction * cloud.bounding_box_diagonal()

    def min_branch_length(self, cloud: PointCloud) -> float:
        return self.min_branch_length_factor * self.sample_radius(cloud)


# ---------------------------------------------------------------------------
# neighbourhood machinery
# ---------------------------------------------------------------------------

def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel: the centroid of its members, colors
    averaged. Output order follows the lexicographic voxel key order, so the
    result is deterministic."""
    if voxel <= 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    pts = cloud.points
    if len(cloud) == 0:
        return cloud
    keys = np.floor((pts - pts.min(axis=0)) / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    centroids = np.column_stack([
        np.bincount(inverse, weights=pts[:, c], minlength=len(uniq)) / counts
        for c in range(3)
    ])
    colors = None
    if cloud.colors is not None:
        colors = np.column_stack([
            np.round(
                np.bincount(inverse, weights=cloud.colors[:, c].astype(float),
                            minlength=len(uniq)) / counts
            )
            for c in range(3)
        ]).astype(np.uint8)
    return PointCloud(centroids, colors, cloud.frame_id)


def knn_adjacency(points: np.ndarray, k: int) -> sparse.csr_matrix:
    """Symmetric (union) kNN adjacency over the points as a boolean CSR.

    Each point is linked to its k nearest Euclidean neighbours via a kd-tree,
    then edges are symmetrised by union. Requires more than k points.
    """
    n = points.shape[0]
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k + 1, workers=-1)
    rows = np.repeat(np.arange(n), k)
    mask = idx != np.arange(n)[:, None]
    # each row keeps its first k non-self hits (handles duplicate coordinates)
    take = mask & (np.cumsum(mask, axis=1) <= k)
    cols = idx[take]
    adj = sparse.csr_matrix(
        (np.ones(len(cols), dtype=np.float64), (rows, cols)), shape=(n, n)
    )
    adj = adj.maximum(adj.T)
    adj.sort_indices()
    return adj


def knn_graph(cloud: PointCloud, k: int):
    """Symmetrised neighbour lists (sorted index arrays, one per point)."""
    adj = knn_adjacency(cloud.points, k)
    return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]].copy()
            for i in range(len(cloud))]


def _edge_arrays(adj: sparse.csr_matrix):
    coo = adj.tocoo()
    return coo.row, coo.col


def _mean_neighbor_distance(points, rows, cols, degrees):
    d = np.linalg.norm(points[rows] - points[cols], axis=1)
    sums = np.bincount(rows, weights=d, minlength=points.shape[0])
    return sums / degrees


# ---------------------------------------------------------------------------
# contraction
# ---------------------------------------------------------------------------

def _solve_stacked(ltl, w_l, w_h, positions, params):
    """Minimise ||w_l L P'||^2 + ||diag(w_h)(P' - P)||^2 via the normal
    equations."""
    n = positions.shape[0]
    lhs = (w_l * w_l) * ltl + sparse.diags(w_h * w_h)
    rhs = (w_h * w_h)[:, None] * positions
    if n <= params.cg_point_threshold:
        # the normal-equation matrix is SPD; SuperLU's symmetric mode cuts
        # factorisation time severalfold over the default ordering
        lu = splu(lhs.tocsc(), permc_spec="MMD_AT_PLUS_A",
                  diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
        return lu.solve(rhs)
    out = np.empty_like(positions)
    precond = sparse.diags(1.0 / lhs.diagonal())
    for c in range(3):
        x, info = cg(lhs, rhs[:, c], x0=positions[:, c],
                     rtol=params.solver_tolerance, maxiter=5000, M=precond)
        if info != 0:
            raise SolverError(
                f"conjugate gradients did not reach rtol="
                f"{params.solver_tolerance} within 5000 iterations (info={info})"
            )
        out[:, c] = x
    return out


def contract(cloud: PointCloud, params: ContractionParams = ContractionParams()):
    """Iteratively collapse a cloud towards its curve skeleton.

    Returns ``(contracted_points, displacement)`` where ``displacement`` is
    each point's total travel distance. Output length equals input length and
    the result never leaves the input bounding box.
    """
    adj = knn_adjacency(cloud.points, params.k_neighbors)
    contracted, _ = _contract_graph(cloud.points, adj, params)
    displacement = np.linalg.norm(contracted - cloud.points, axis=1)
    return contracted, displacement


def _contract_graph(points, adj, params):
    """Contraction core over a prebuilt adjacency; returns (positions, iters)."""
    n = points.shape[0]
    degrees = np.asarray(adj.sum(axis=1)).ravel()
    inv_deg = sparse.diags(1.0 / degrees)
    laplacian = (sparse.identity(n, format="csr") - inv_deg @ adj).tocsr()
    ltl = (laplacian.T @ laplacian).tocsr()
    rows, cols = _edge_arrays(adj)

    extent0 = _mean_neighbor_distance(points, rows, cols, degrees)
    d_bar = float(extent0.mean())
    if d_bar <= 0:
        return points.copy(), 0
    w_l = params.init_contraction_weight_factor / (10.0 * d_bar)
    w_h = np.full(n, params.attraction_weight)

    h0 = float(np.linalg.norm(laplacian @ points, axis=1).mean())
    if h0 <= 0:
        return points.copy(), 0
    lo = points.min(axis=0)
    hi = points.max(axis=0)

    current = points.copy()
    iterations = 0
    h_prev = h0
    for _ in range(params.max_iterations):
        solved = _solve_stacked(ltl, w_l, w_h, current, params)
        current = np.clip(solved, lo, hi)
        iterations += 1

        h_t = float(np.linalg.norm(laplacian @ current, axis=1).mean())
        if h_t <= params.convergence_ratio * h0:
            break
        if h_t >= h_prev * (1.0 - params.stall_fraction):
            break
        h_prev = h_t
        w_l = min(w_l * params.amplification, WEIGHT_CAP)
        extent = _mean_neighbor_distance(current, rows, cols, degrees)
        shrink = extent0 / np.maximum(extent, 1e-12)
        w_h = np.clip(params.attraction_weight * shrink,
                      params.attraction_weight, WEIGHT_CAP)
    return current, iterations


# ---------------------------------------------------------------------------
# graph extraction
# ---------------------------------------------------------------------------

def _farthest_point_samples(points, radius):
    """Greedy farthest-point sampling until every point lies within `radius`
    of a sample. Starts at index 0 and breaks argmax ties towards the lowest
    index, so the result is deterministic."""
    n = points.shape[0]
    samples = [0]
    dist = np.linalg.norm(points - points[0], axis=1)
    while True:
        far = int(np.argmax(dist))
        if dist[far] < radius or len(samples) == n:
            break
        samples.append(far)
        dist = np.minimum(dist, np.linalg.norm(points - points[far], axis=1))
    return np.array(samples, dtype=np.int64)


def extract_skeleton(contracted: np.ndarray, original: PointCloud,
                     params: TopologyParams = TopologyParams(), *,
                     adjacency: sparse.csr_matrix | None = None,
                     k_neighbors: int = 16) -> SkeletonGraph:
    """Summarise a contracted cloud as a tree-topology skeleton graph.

    Farthest-point sampling at the topology sample radius picks the vertices;
    every input point is assigned to its nearest sample (via its contracted
    twin); candidate edges link samples whose member sets contain
    kNN-neighbouring points; the candidate graph is reduced to its minimum
    spanning tree by edge length. The root is the lowest-z vertex. A
    disconnected candidate graph yields the largest component plus a warning.
    """
    contracted = np.asarray(contracted, dtype=float)
    if contracted.shape != original.points.shape:
        raise ValueError(
            f"contracted array shape {contracted.shape} does not match the "
            f"original cloud {original.points.shape}"
        )
    if adjacency is None:
        adjacency = knn_adjacency(original.points, k_neighbors)

    radius = params.sample_radius(original)
    samples = _farthest_point_samples(contracted, max(radius, 1e-12))
    sample_pos = contracted[samples]
    assign = cKDTree(sample_pos).query(contracted)[1]

    m = len(samples)
    if m == 1:
        return SkeletonGraph(sample_pos, np.zeros((0, 2), dtype=np.int64), 0)

    rows, cols = _edge_arrays(adjacency)
    si, sj = assign[rows], assign[cols]
    cross = si != sj
    pairs = np.sort(np.column_stack([si[cross], sj[cross]]), axis=1)
    pairs = np.unique(pairs, axis=0)

    lengths = np.linalg.norm(sample_pos[pairs[:, 0]] - sample_pos[pairs[:, 1]],
                             axis=1)
    candidate = sparse.csr_matrix(
        (lengths, (pairs[:, 0], pairs[:, 1])), shape=(m, m)
    )
    candidate = candidate.maximum(candidate.T)

    n_comp, labels = csgraph.connected_components(candidate, directed=False)
    if n_comp > 1:
        warnings.warn(
            f"contracted cloud split into {n_comp} components; keeping the "
            "largest",
            stacklevel=2,
        )
        keep_label = int(np.bincount(labels).argmax())
        keep = np.nonzero(labels == keep_label)[0]
        sample_pos = sample_pos[keep]
        candidate = candidate[keep][:, keep]
        m = len(keep)
        if m == 1:
            return SkeletonGraph(sample_pos, np.zeros((0, 2), dtype=np.int64), 0)

    mst = csgraph.minimum_spanning_tree(candidate)
    mi, mj = mst.nonzero()
    edges = np.sort(np.column_stack([mi, mj]), axis=1)
    root = int(np.argmin(sample_pos[:, 2]))
    return SkeletonGraph(sample_pos, edges, root)


def prune(skel: SkeletonGraph, min_branch_length: float) -> SkeletonGraph:
    """Remove terminal chains shorter than `min_branch_length`.

    A chain runs from a leaf up to (but excluding) the nearest vertex of
    degree >= 3; chains containing the root are never removed, nor are chains
    that end at another leaf without passing a junction (a bare path stays a
    bare path). Repeats until no chain qualifies, so the operation is
    idempotent.
    """
    verts = skel.vertices
    edges = skel.edges
    root = skel.root_index

    while True:
        n = verts.shape[0]
        deg = np.zeros(n, dtype=int)
        adj = [[] for _ in range(n)]
        for i, j in edges:
            deg[i] += 1
            deg[j] += 1
            adj[i].append(int(j))
            adj[j].append(int(i))
        leaves = [v for v in range(n) if deg[v] == 1 and v != root]
        to_remove = set()
        for leaf in leaves:
            chain = [leaf]
            length = 0.0
            prev, cur = -1, leaf
            junction = None
            while True:
                nxt = [w for w in adj[cur] if w != prev]
                if not nxt:
                    break
                nxt = nxt[0]
                length += float(np.linalg.norm(verts[cur] - verts[nxt]))
                if deg[nxt] >= 3:
                    junction = nxt
                    break
                chain.append(nxt)
                prev, cur = cur, nxt
            if junction is None:
                continue
            if root in chain:
                continue
            if length < min_branch_length:
                to_remove.update(chain)
        if not to_remove:
            break
        keep = np.array([v for v in range(n) if v not in to_remove],
                        dtype=np.int64)
        remap = -np.ones(n, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        kept_edges = edges[
            np.all(remap[edges] >= 0, axis=1)
        ]
        verts = verts[keep]
        edges = remap[kept_edges]
        root = int(remap[root])
    return SkeletonGraph(verts, edges, root)


def count_bifurcations(skel: SkeletonGraph) -> int:
    """Number of binary forks: sum over vertices of max(degree - 2, 0).

    An n-ary fork counts as n - 2 stacked binary forks, which makes the count
    invariant to how closely spaced junctions are merged or split during
    sampling. A degree-2 root is a stem start, not a fork, and contributes 0
    like any other degree-<=2 vertex.
    """
    deg = skel.degrees()
    return int(np.maximum(deg - 2, 0).sum())


def skeletonize(cloud: PointCloud, *, voxel: float | None = 0.005,
                contraction: ContractionParams = ContractionParams(),
                topology: TopologyParams = TopologyParams(),
                prune_graph: bool = True) -> SkeletonGraph:
    """Full cloud -> skeleton convenience chain.

    Downsamples (unless ``voxel`` is None, the over-skeletonisation regime),
    contracts, extracts the graph and optionally prunes short terminal
    branches at the topology module's default length.
    """
    working = voxel_downsample(cloud, voxel) if voxel else cloud
    adjacency = knn_adjacency(working.points, contraction.k_neighbors)
    contracted, _ = _contract_graph(working.points, adjacency, contraction)
    skel = extract_skeleton(contracted, working, topology, adjacency=adjacency)
    if prune_graph:
        skel = prune(skel, topology.min_branch_length(working))
    return skel


# ---------------------------------------------------------------------------
# on-disk format: `v x y z` lines, `e i j` lines, `root K` footer
# ---------------------------------------------------------------------------

def format_skeleton(skel: SkeletonGraph) -> str:
    lines = [
        f"v {float_repr(x)} {float_repr(y)} {float_repr(z)}"
        for x, y, z in skel.vertices
    ]
    lines += [f"e {i} {j}" for i, j in skel.edges]
    lines.append(f"root {skel.root_index}")
    return "\n".join(lines) + "\n"


def parse_skeleton(text) -> SkeletonGraph:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8 text: {exc}") from None
    verts, edges, root = [], [], None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "v" and len(parts) == 4:
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "e" and len(parts) == 3:
                edges.append([int(parts[1]), int(parts[2])])
            elif parts[0] == "root" and len(parts) == 2:
                root = int(parts[1])
            else:
                raise ParseError(f"unrecognised line {line!r}", line=lineno)
        except ValueError:
            raise ParseError(f"bad number in {line!r}", line=lineno) from None
    if root is None:
        raise ParseError("skeleton file missing 'root' footer")
    if not verts:
        raise ParseError("skeleton file has no vertices")
    try:
        return SkeletonGraph(
            np.array(verts), np.array(edges, dtype=np.int64).reshape(-1, 2), root
        )
    except ValueError as exc:
        raise ParseError(f"invalid skeleton: {exc}") from None


def load_skeleton(path) -> SkeletonGraph:
    with open(path, "rb") as fh:
        return parse_skeleton(fh.read())


def save_skeleton(skel: SkeletonGraph, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(format_skeleton(skel))
