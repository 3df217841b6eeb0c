"""Leaf/wood point segmentation via over-skeletonisation.

Contracting a full-resolution sapling cloud (no downsampling) makes dense
foliage collapse into many short terminal twigs of the skeleton graph, while
trunk and branches collapse into its interior chains. Points are assigned to
their nearest skeleton vertex; points owned by a terminal vertex (optionally
dilated a few hops along the graph) are classified leaf, the rest wood. The
result is an exact partition of the input cloud.

Pre-trained leaf classifiers aimed at adult trees transfer poorly to
sapling-scale structures, which is why this purely geometric route exists.
"""

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud, SkeletonGraph
from .errors import SapmapError


@dataclass(frozen=True)
class LeafWoodParams:
    """``terminal_hops`` dilates the terminal vertex set along the graph
    (scale-free across sapling sizes); ``exclude_root_chain`` keeps the chain
    from the root up to the first junction out of the terminal set, so a bare
    stem base is never classified as foliage. ``terminal_radius``, when set,
    switches to a fixed Euclidean neighbourhood around terminal vertices
    instead of the nearest-vertex rule."""

    terminal_hops: int = 1
    exclude_root_chain: bool = True
    terminal_radius: float | None = None

    def __post_init__(self):
        if self.terminal_hops < 0:
            raise ValueError("terminal_hops must be >= 0")
        if self.terminal_radius is not None and self.terminal_radius <= 0:
            raise ValueError("terminal_radius must be positive")


def _dilate_by_radius(skel, tips, radius):
    """Vertices within `radius` (metres) of any tip vertex."""
    if not tips:
        return set()
    tip_pos = skel.vertices[sorted(tips)]
    dist = cKDTree(tip_pos).query(skel.vertices)[0]
    return {int(v) for v in np.nonzero(dist <= radius)[0]}


@dataclass(frozen=True)
class Segmentation:
    """Disjoint leaf/wood split of a source cloud; the index sets partition
    the source exactly."""

    leaf: PointCloud
    wood: PointCloud
    leaf_indices: np.ndarray
    wood_indices: np.ndarray
    warnings: tuple = ()

    def __post_init__(self):
        li = np.asarray(self.leaf_indices, dtype=np.int64)
        wi = np.asarray(self.wood_indices, dtype=np.int64)
        li.setflags(write=False)
        wi.setflags(write=False)
        object.__setattr__(self, "leaf_indices", li)
        object.__setattr__(self, "wood_indices", wi)

    @property
    def n_leaf(self):
        return int(len(self.leaf_indices))

    @property
    def n_wood(self):
        return int(len(self.wood_indices))


def _root_chain(skel: SkeletonGraph):
    """Vertices from the root up to (excluding) the first vertex of
    degree >= 3; just the root when the graph has no junction."""
    deg = skel.degrees()
    chain = {skel.root_index}
    if deg[skel.root_index] != 1:
        return chain
    adj = skel.adjacency()
    prev, cur = -1, skel.root_index
    while True:
        nxt = [int(w) for w in adj[cur] if w != prev]
        if not nxt or deg[nxt[0]] >= 3:
            break
        chain.add(nxt[0])
        prev, cur = cur, nxt[0]
    return chain


def find_terminal_vertices(skel: SkeletonGraph,
                           params: LeafWoodParams = LeafWoodParams()) -> np.ndarray:
    """Degree-1 vertices other than the root, dilated by ``terminal_hops``
    along the graph. Returns a sorted index array.

    Graph dilation walks up each terminal's own chain and never enters a
    vertex of degree >= 3: the neighbourhood of a twig tip is the twig, not
    the branch it hangs from. When ``terminal_radius`` is set, the set is
    instead dilated metrically: every vertex within that distance of a tip
    joins it (foliage knots are compact around their tips, bare wood chains
    are not).
    """
    deg = skel.degrees()
    terminals = {int(v) for v in np.nonzero(deg == 1)[0] if v != skel.root_index}
    if params.terminal_radius is not None:
        terminals |= _dilate_by_radius(skel, terminals, params.terminal_radius)
    elif params.terminal_hops > 0 and terminals:
        adj = skel.adjacency()
        frontier = deque((v, 0) for v in sorted(terminals))
        seen = set(terminals)
        while frontier:
            v, hops = frontier.popleft()
            if hops == params.terminal_hops:
                continue
            for w in adj[v]:
                w = int(w)
                if w not in seen and deg[w] < 3:
                    seen.add(w)
                    frontier.append((w, hops + 1))
        terminals = seen
    if params.exclude_root_chain:
        terminals -= _root_chain(skel)
        terminals.discard(skel.root_index)
    return np.array(sorted(terminals), dtype=np.int64)


def _nearest_vertex(points, vertices):
    """Nearest skeleton vertex per point, exact ties broken towards the
    lowest vertex index."""
    tree = cKDTree(vertices)
    if len(vertices) == 1:
        return np.zeros(points.shape[0], dtype=np.int64)
    dist, idx = tree.query(points, k=2)
    tied = dist[:, 0] == dist[:, 1]
    nearest = idx[:, 0].astype(np.int64)
    nearest[tied] = np.minimum(idx[tied, 0], idx[tied, 1])
    return nearest


def segment_leaf_wood(cloud: PointCloud, skel: SkeletonGraph,
                      params: LeafWoodParams = LeafWoodParams()) -> Segmentation:
    """Partition a cloud into leaf and wood against its over-skeletonised
    graph.

    Each point goes to its nearest skeleton vertex; points whose vertex is in
    the terminal set become leaf, everything else wood. An empty terminal set
    (degenerate skeleton) classifies the whole cloud as wood and flags a
    warning.
    """
    terminal = find_terminal_vertices(skel, params)
    notes = ()
    if len(terminal) == 0:
        warnings.warn("terminal vertex set is empty; classifying all points "
                      "as wood", stacklevel=2)
        notes = ("empty-terminal-set",)
        is_leaf = np.zeros(len(cloud), dtype=bool)
    else:
        nearest = _nearest_vertex(cloud.points, skel.vertices)
        terminal_mask = np.zeros(len(skel), dtype=bool)
        terminal_mask[terminal] = True
        is_leaf = terminal_mask[nearest]

    leaf_idx = np.nonzero(is_leaf)[0]
    wood_idx = np.nonzero(~is_leaf)[0]
    return Segmentation(
        leaf=cloud.select(leaf_idx),
        wood=cloud.select(wood_idx),
        leaf_indices=leaf_idx,
        wood_indices=wood_idx,
        warnings=notes,
    )


def leaf_wood_ratio(seg: Segmentation) -> float:
    """Point-count ratio N_leaf / N_wood."""
    if seg.n_wood == 0:
        raise SapmapError(
            "leaf/wood ratio is undefined: no points were classified as wood"
        )
    return seg.n_leaf / seg.n_wood
