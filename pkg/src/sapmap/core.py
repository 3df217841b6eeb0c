"""Shared domain types: poses, trajectories, geodetic fixes, point clouds,
similarity transforms and skeleton graphs.

Conventions used throughout the package:

* Quaternions are stored scalar-first, ``(w, x, y, z)``, and must be unit
  length. All parsers convert to this order on ingest.
* Coordinate frames are identified by plain string tags (``"M1"``, ``"E"``,
  ``"F_..."``). Operations that move data between frames check the tags and
  raise :class:`~sapmap.errors.FrameMismatchError` on disagreement.
* The z axis of a map frame is gravity-aligned "up"; heights and vertical
  profiles are measured along it.

All types are immutable value types: their array fields are copied on
construction and marked read-only, so instances can be shared freely between
threads.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import FrameMismatchError

QUAT_NORM_TOL = 1e-9


def float_repr(x) -> str:
    """Shortest exact decimal form of a float (numpy scalars included)."""
    return repr(float(x))


def _frozen_array(values, dtype=float, shape=None):
    arr = np.array(values, dtype=dtype)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# quaternion helpers (scalar-first)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    """Return q scaled to unit norm. Raises on zero norm."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalise zero or non-finite quaternion")
    return q / n


def quat_multiply(a, b):
    """Hamilton product a*b, both scalar-first."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion (scalar-first)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m):
    """Unit quaternion (scalar-first, w >= 0) of a proper rotation matrix.

    Uses Shepperd's method: picks the numerically largest of the four
    candidate pivots so the result is stable for all rotation angles.
    """
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([
            0.25 * s,
            (m[2, 1] - m[1, 2]) / s,
            (m[0, 2] - m[2, 0]) / s,
            (m[1, 0] - m[0, 1]) / s,
        ])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([
            (m[2, 1] - m[1, 2]) / s,
            0.25 * s,
            (m[0, 1] + m[1, 0]) / s,
            (m[0, 2] + m[2, 0]) / s,
        ])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([
            (m[0, 2] - m[2, 0]) / s,
            (m[0, 1] + m[1, 0]) / s,
            0.25 * s,
            (m[1, 2] + m[2, 1]) / s,
        ])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([
            (m[1, 0] - m[0, 1]) / s,
            (m[0, 2] + m[2, 0]) / s,
            (m[1, 2] + m[2, 1]) / s,
            0.25 * s,
        ])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_about_z(angle_rad):
    """Unit quaternion for a rotation of `angle_rad` about the z axis."""
    h = 0.5 * angle_rad
    return np.array([np.cos(h), 0.0, 0.0, np.sin(h)])


# ---------------------------------------------------------------------------
# poses and trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """A timestamped rigid pose: unit quaternion (w,x,y,z) plus translation
    in metres."""

    timestamp: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timestamp", float(self.timestamp))
        if not np.isfinite(self.timestamp):
            raise ValueError("pose timestamp must be finite")
        q = _frozen_array(self.rotation, shape=(4,))
        if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
            raise ValueError(
                f"pose quaternion norm {np.linalg.norm(q):.12f} deviates from 1 "
                f"by more than {QUAT_NORM_TOL}"
            )
        object.__setattr__(self, "rotation", q)
        t = _frozen_array(self.translation, shape=(3,))
        if not np.all(np.isfinite(t)):
            raise ValueError("pose translation must be finite")
        object.__setattr__(self, "translation", t)

    def rotation_matrix(self):
        return quat_to_matrix(self.rotation)


@dataclass(frozen=True)
class Trajectory:
    """Ordered sequence of poses in a single named frame.

    Timestamps must be strictly increasing and the trajectory must hold at
    least one pose.
    """

    frame_id: str
    poses: tuple

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise ValueError("trajectory must contain at least one pose")
        times = np.array([p.timestamp for p in poses])
        if np.any(np.diff(times) <= 0):
            bad = int(np.argmax(np.diff(times) <= 0)) + 1
            raise ValueError(
                f"trajectory timestamps must be strictly increasing "
                f"(violated at pose index {bad})"
            )
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    @property
    def timestamps(self):
        return np.array([p.timestamp for p in self.poses])

    @property
    def positions(self):
        return np.array([p.translation for p in self.poses])

    @property
    def start_time(self):
        return self.poses[0].timestamp

    @property
    def end_time(self):
        return self.poses[-1].timestamp


# ---------------------------------------------------------------------------
# geodetic fixes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeoFix:
    """A timestamped WGS84 fix in decimal degrees, altitude in metres."""

    timestamp: float
    latitude: float
    longitude: float
    altitude: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "latitude", float(self.latitude))
        object.__setattr__(self, "longitude", float(self.longitude))
        object.__setattr__(self, "altitude", float(self.altitude))
        if not abs(self.latitude) <= 90.0:
            raise ValueError(f"latitude {self.latitude} outside [-90, 90]")
        if not abs(self.longitude) <= 180.0:
            raise ValueError(f"longitude {self.longitude} outside [-180, 180]")


@dataclass(frozen=True)
class GeoTrack:
    """Ordered GNSS fixes plus the anchor fix that defines the local ENU
    origin. ``has_altitude`` records whether the source carried an altitude
    column; when it did not, altitudes are zero-filled placeholders."""

    fixes: tuple
    anchor: GeoFix
    has_altitude: bool = True

    def __post_init__(self):
        fixes = tuple(self.fixes)
        if not fixes:
            raise ValueError("geo track must contain at least one fix")
        times = np.array([f.timestamp for f in fixes])
        if np.any(np.diff(times) <= 0):
            raise ValueError("geo track timestamps must be strictly increasing")
        object.__setattr__(self, "fixes", fixes)

    def __len__(self):
        return len(self.fixes)

    @property
    def timestamps(self):
        return np.array([f.timestamp for f in self.fixes])


# ---------------------------------------------------------------------------
# similarity transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimilarityTransform:
    """Scaled rigid transform p -> scale * R @ p + translation.

    ``source_frame`` / ``target_frame`` are optional frame tags; when set they
    are checked by operations that move tagged data (see
    :func:`sapmap.registration.transform_cloud`).
    """

    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    source_frame: str | None = None
    target_frame: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "scale", float(self.scale))
        if not (self.scale > 0.0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        q = _frozen_array(self.rotation, shape=(4,))
        n = np.linalg.norm(q)
        if abs(n - 1.0) > QUAT_NORM_TOL:
            raise ValueError(f"rotation quaternion norm {n:.12f} is not 1")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", _frozen_array(self.translation, shape=(3,)))

    @classmethod
    def identity(cls, source_frame=None, target_frame=None):
        return cls(1.0, np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3),
                   source_frame, target_frame)

    def rotation_matrix(self):
        return quat_to_matrix(self.rotation)

    def apply(self, points):
        """Map one point (3,) or many points (n, 3) into the target frame."""
        p = np.asarray(points, dtype=float)
        r = self.rotation_matrix()
        return self.scale * p @ r.T + self.translation

    def compose(self, other):
        """Transform equivalent to applying `other` first, then `self`.

        Scales multiply, rotations compose, and the frame tags chain
        (other.source -> self.target).
        """
        return SimilarityTransform(
            scale=self.scale * other.scale,
            rotation=quat_normalize(quat_multiply(self.rotation, other.rotation)),
            translation=self.scale * self.rotation_matrix() @ other.translation
            + self.translation,
            source_frame=other.source_frame,
            target_frame=self.target_frame,
        )

    def inverse(self):
        r_inv = quat_conjugate(self.rotation)
        return SimilarityTransform(
            scale=1.0 / self.scale,
            rotation=r_inv,
            translation=-(1.0 / self.scale) * (quat_to_matrix(r_inv) @ self.translation),
            source_frame=self.target_frame,
            target_frame=self.source_frame,
        )


def compose(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """Composition a ∘ b: applying the result equals applying b, then a."""
    return a.compose(b)


def apply(t: SimilarityTransform, p) -> np.ndarray:
    """Map point(s) p through t: scale * R @ p + translation."""
    return t.apply(p)


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointCloud:
    """XYZ points in metres with optional 8-bit RGB colors and a frame tag."""

    points: np.ndarray
    colors: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.uint8)
            if col.shape != (pts.shape[0], 3):
                raise ValueError(
                    f"colors must have shape ({pts.shape[0]}, 3), got {col.shape}"
                )
            col = np.ascontiguousarray(col)
            col.setflags(write=False)
            object.__setattr__(self, "colors", col)

    def __len__(self):
        return self.points.shape[0]

    def with_frame(self, frame_id):
        return PointCloud(self.points, self.colors, frame_id)

    def select(self, indices):
        """Sub-cloud at the given indices (colors carried along)."""
        idx = np.asarray(indices)
        colors = self.colors[idx] if self.colors is not None else None
        return PointCloud(self.points[idx], colors, self.frame_id)

    def bounding_box_diagonal(self):
        if len(self) == 0:
            return 0.0
        span = self.points.max(axis=0) - self.points.min(axis=0)
        return float(np.linalg.norm(span))


# ---------------------------------------------------------------------------
# skeleton graphs
# ---------------------------------------------------------------------------

def _require_tree(n_vertices, edges):
    """Union-find check that (vertices, edges) form a single connected tree."""
    if len(edges) != n_vertices - 1:
        raise ValueError(
            f"skeleton must be a tree: {n_vertices} vertices need "
            f"{n_vertices - 1} edges, got {len(edges)}"
        )
    parent = list(range(n_vertices))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri == rj:
            raise ValueError(f"skeleton contains a cycle through edge ({i}, {j})")
        parent[ri] = rj


@dataclass(frozen=True)
class SkeletonGraph:
    """Tree-structured curve skeleton: 3D vertices, undirected edges and a
    root at the lowest vertex.

    Construction validates tree-ness (connected, acyclic, no self loops or
    duplicate edges) and that the root has minimal z.
    """

    vertices: np.ndarray
    edges: np.ndarray
    root_index: int

    def __post_init__(self):
        verts = _frozen_array(self.vertices)
        if verts.ndim != 2 or verts.shape[1] != 3 or verts.shape[0] == 0:
            raise ValueError(f"vertices must have shape (n>=1, 3), got {verts.shape}")
        object.__setattr__(self, "vertices", verts)
        n = verts.shape[0]
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValueError("edge index out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("skeleton contains a self-loop")
            canon = np.sort(edges, axis=1)
            order = np.lexsort((canon[:, 1], canon[:, 0]))
            canon = canon[order]
            if canon.shape[0] > 1 and np.any(np.all(np.diff(canon, axis=0) == 0, axis=1)):
                raise ValueError("skeleton contains duplicate edges")
            edges = canon
        else:
            edges = edges.reshape(0, 2)
        _require_tree(n, edges)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        root = int(self.root_index)
        if not 0 <= root < n:
            raise ValueError(f"root index {root} out of range")
        if verts[root, 2] > verts[:, 2].min() + 1e-12:
            raise ValueError("root must be the vertex with minimal z")
        object.__setattr__(self, "root_index", root)

    def __len__(self):
        return self.vertices.shape[0]

    def degrees(self):
        deg = np.zeros(len(self), dtype=int)
        if self.edges.size:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def adjacency(self):
        """Adjacency lists as a list of sorted index arrays."""
        adj = [[] for _ in range(len(self))]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return [np.array(sorted(a), dtype=np.int64) for a in adj]

    def edge_lengths(self):
        if not self.edges.size:
            return np.zeros(0)
        d = self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]]
        return np.linalg.norm(d, axis=1)


def check_same_frame(frame_a, frame_b, what="operation"):
    if frame_a != frame_b:
        raise FrameMismatchError(
            f"{what}: frame {frame_a!r} does not match expected frame {frame_b!r}"
        )
