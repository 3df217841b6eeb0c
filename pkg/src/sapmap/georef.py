"""Map-to-Earth georeferencing.

Converts WGS84 fixes to a local East-North-Up (ENU) tangent frame, associates
GNSS fixes with trajectory poses by nearest timestamp, and solves the planar
(yaw-only) least-squares rigid transform that best maps trajectory positions
onto their ENU observations. The rotation is restricted to the horizontal
plane because the SLAM map frame is gravity-aligned and GNSS altitude under
canopy is too noisy to constrain roll or pitch; when altitude is available
a constant up-offset is estimated separately so the transform stays rigid.
"""

import math
from dataclasses import dataclass

import numpy as np

from .core import GeoFix, GeoTrack, Trajectory, float_repr
from .errors import AssociationError, DegenerateGeometryError, ParseError

# WGS84 ellipsoid
WGS84_A = 6378137.0
WGS84_INV_F = 298.257223563
_F = 1.0 / WGS84_INV_F
_E2 = _F * (2.0 - _F)


def _geodetic_to_ecef(lat_deg, lon_deg, alt_m):
    lat = math.radians(lat_deg)
    lon = math.radians(lon_deg)
    sin_lat, cos_lat = math.sin(lat), math.cos(lat)
    n = WGS84_A / math.sqrt(1.0 - _E2 * sin_lat * sin_lat)
    return np.array([
        (n + alt_m) * cos_lat * math.cos(lon),
        (n + alt_m) * cos_lat * math.sin(lon),
        (n * (1.0 - _E2) + alt_m) * sin_lat,
    ])


def _ecef_to_geodetic(xyz):
    """Iterative ECEF -> geodetic conversion (converges to double precision
    in a handful of iterations for terrestrial points)."""
    x, y, z = xyz
    lon = math.atan2(y, x)
    p = math.hypot(x, y)
    lat = math.atan2(z, p * (1.0 - _E2))
    for _ in range(10):
        sin_lat = math.sin(lat)
        n = WGS84_A / math.sqrt(1.0 - _E2 * sin_lat * sin_lat)
        new_lat = math.atan2(z + _E2 * n * sin_lat, p)
        if abs(new_lat - lat) < 1e-14:
            lat = new_lat
            break
        lat = new_lat
    sin_lat = math.sin(lat)
    n = WGS84_A / math.sqrt(1.0 - _E2 * sin_lat * sin_lat)
    if abs(math.degrees(lat)) < 89.9:
        alt = p / math.cos(lat) - n
    else:
        alt = z / sin_lat - n * (1.0 - _E2)
    return math.degrees(lat), math.degrees(lon), alt


def _enu_rotation(anchor: GeoFix):
    lat = math.radians(anchor.latitude)
    lon = math.radians(anchor.longitude)
    sl, cl = math.sin(lat), math.cos(lat)
    so, co = math.sin(lon), math.cos(lon)
    return np.array([
        [-so, co, 0.0],
        [-sl * co, -sl * so, cl],
        [cl * co, cl * so, sl],
    ])


def geodetic_to_enu(fix: GeoFix, anchor: GeoFix) -> np.ndarray:
    """East, north, up of `fix` in metres relative to `anchor`.

    Exact chain on the WGS84 ellipsoid: geodetic -> ECEF -> tangent-plane
    rotation at the anchor.
    """
    d = (_geodetic_to_ecef(fix.latitude, fix.longitude, fix.altitude)
         - _geodetic_to_ecef(anchor.latitude, anchor.longitude, anchor.altitude))
    return _enu_rotation(anchor) @ d


def enu_to_geodetic(enu, anchor: GeoFix):
    """Inverse of :func:`geodetic_to_enu`: (east, north, up) -> (lat, lon, alt)."""
    ecef = (_geodetic_to_ecef(anchor.latitude, anchor.longitude, anchor.altitude)
            + _enu_rotation(anchor).T @ np.asarray(enu, dtype=float))
    return _ecef_to_geodetic(ecef)


# ---------------------------------------------------------------------------
# timestamp association
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AssociationPairs:
    """Matched (pose_xy, enu_xy) observation pairs plus their timestamp gaps.

    ``pose_z`` and ``enu_up`` carry the vertical components so a constant
    up-offset can be estimated when the GNSS source had altitude.
    """

    pose_xy: np.ndarray
    enu_xy: np.ndarray
    time_gap: np.ndarray
    pose_z: np.ndarray
    enu_up: np.ndarray
    has_altitude: bool
    anchor: GeoFix | None = None

    def __len__(self):
        return self.pose_xy.shape[0]


def associate(traj: Trajectory, track: GeoTrack, u: int | None = None,
              max_gap: float = 0.5, time_offset: float = 0.0) -> AssociationPairs:
    """Pair each of the first `u` GNSS fixes with the pose of nearest timestamp.

    Pairs with a gap above `max_gap` seconds are dropped; fewer than two
    surviving pairs is an error. `u` defaults to all fixes (more pairs only
    improve the subsequent least-squares fit). `time_offset` is added to the
    GNSS timestamps before matching, for sources whose clock is biased against
    the trajectory clock.
    """
    if u is None:
        u = len(track)
    if u < 2:
        raise AssociationError(f"need at least 2 fixes to associate, got u={u}")
    u = min(u, len(track))
    fixes = track.fixes[:u]
    fix_times = np.array([f.timestamp for f in fixes]) + time_offset
    pose_times = traj.timestamps
    positions = traj.positions

    idx = np.searchsorted(pose_times, fix_times)
    idx = np.clip(idx, 1, len(pose_times) - 1) if len(pose_times) > 1 else \
        np.zeros_like(idx)
    if len(pose_times) > 1:
        left = pose_times[idx - 1]
        right = pose_times[idx]
        choose_left = np.abs(fix_times - left) <= np.abs(right - fix_times)
        idx = np.where(choose_left, idx - 1, idx)
    gaps = np.abs(pose_times[idx] - fix_times)
    keep = gaps <= max_gap
    if keep.sum() < 2:
        raise AssociationError(
            f"only {int(keep.sum())} of {u} fixes matched a pose within "
            f"{max_gap} s"
        )
    anchor = track.anchor
    enu = np.array([geodetic_to_enu(f, anchor) for f in fixes])
    kept_idx = idx[keep]
    return AssociationPairs(
        pose_xy=positions[kept_idx][:, :2],
        enu_xy=enu[keep][:, :2],
        time_gap=gaps[keep],
        pose_z=positions[kept_idx][:, 2],
        enu_up=enu[keep][:, 2],
        has_altitude=track.has_altitude,
        anchor=anchor,
    )


# ---------------------------------------------------------------------------
# planar least-squares fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EarthTransform:
    """Planar map-to-Earth transform: yaw about z plus an (east, north)
    translation, anchored at a reference geodetic fix.

    ``up_offset`` maps map-frame z onto ENU up (zero when the GNSS source had
    no altitude). ``rms_residual`` is the post-fit planar RMS in metres.
    """

    rotation_z: float
    translation: np.ndarray
    anchor: GeoFix
    rms_residual: float
    up_offset: float = 0.0

    def __post_init__(self):
        rot = float(self.rotation_z)
        if rot <= -math.pi:
            rot += 2.0 * math.pi
        if not -math.pi < rot <= math.pi:
            raise ValueError(f"rotation_z {rot} outside (-pi, pi]")
        object.__setattr__(self, "rotation_z", rot)
        t = np.array(self.translation, dtype=float)
        if t.shape != (2,):
            raise ValueError("translation must be a 2-vector (east, north)")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        if self.rms_residual < 0:
            raise ValueError("rms_residual must be >= 0")

    def rotation_matrix(self):
        c, s = math.cos(self.rotation_z), math.sin(self.rotation_z)
        return np.array([[c, -s], [s, c]])

    def map_xy_to_enu(self, xy):
        xy = np.asarray(xy, dtype=float)
        return xy @ self.rotation_matrix().T + self.translation

    def enu_xy_to_map(self, en):
        en = np.asarray(en, dtype=float)
        return (en - self.translation) @ self.rotation_matrix()


def fit_earth_transform(pairs: AssociationPairs) -> EarthTransform:
    """Closed-form 2D rigid (Kabsch) fit of pose xy onto ENU xy.

    Minimises sum ||R @ p + t - g||^2 exactly: cross-covariance of the
    centred point sets, 2x2 SVD with determinant correction, translation from
    centroids. Raises when the poses are all coincident (rotation
    unobservable).
    """
    if len(pairs) < 2:
        raise AssociationError(f"need at least 2 pairs, got {len(pairs)}")
    src = pairs.pose_xy
    dst = pairs.enu_xy
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    src_c = src - src_mean
    dst_c = dst - dst_mean
    spread = np.sqrt((src_c ** 2).sum(axis=1).max())
    if spread < 1e-9:
        raise DegenerateGeometryError(
            "all source positions coincide; rotation is unobservable"
        )
    cov = dst_c.T @ src_c
    u_svd, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u_svd @ vt))
    rot = u_svd @ np.diag([1.0, d]) @ vt
    angle = math.atan2(rot[1, 0], rot[0, 0])
    translation = dst_mean - rot @ src_mean
    residuals = src_c @ rot.T - dst_c
    rms = float(np.sqrt((residuals ** 2).sum(axis=1).mean()))
    up = float(np.mean(pairs.enu_up - pairs.pose_z)) if pairs.has_altitude else 0.0
    return EarthTransform(angle, translation, pairs.anchor, rms, up)


def to_earth(transform: EarthTransform, point):
    """Map-frame point -> (lat, lon, alt): planar transform on (x, y), then
    inverse ENU about the anchor; z passes through as ENU up."""
    p = np.asarray(point, dtype=float)
    en = transform.map_xy_to_enu(p[:2])
    up = p[2] + transform.up_offset
    return enu_to_geodetic(np.array([en[0], en[1], up]), transform.anchor)


def from_earth(transform: EarthTransform, lat, lon, alt=0.0):
    """Inverse of :func:`to_earth`."""
    enu = geodetic_to_enu(GeoFix(0.0, lat, lon, alt), transform.anchor)
    xy = transform.enu_xy_to_map(enu[:2])
    return np.array([xy[0], xy[1], enu[2] - transform.up_offset])


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

_EARTH_KEYS = ("rotation_z_rad", "east_m", "north_m", "anchor_lat",
               "anchor_lon", "anchor_alt", "rms_m")


def format_earth_transform(t: EarthTransform) -> str:
    if t.anchor is None:
        raise ValueError("cannot serialise an EarthTransform without an anchor")
    lines = [
        f"rotation_z_rad: {float_repr(t.rotation_z)}",
        f"east_m: {float_repr(t.translation[0])}",
        f"north_m: {float_repr(t.translation[1])}",
        f"anchor_lat: {float_repr(t.anchor.latitude)}",
        f"anchor_lon: {float_repr(t.anchor.longitude)}",
        f"anchor_alt: {float_repr(t.anchor.altitude)}",
        f"rms_m: {float_repr(t.rms_residual)}",
        f"up_m: {float_repr(t.up_offset)}",
    ]
    return "\n".join(lines) + "\n"


def parse_earth_transform(text) -> EarthTransform:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8 text: {exc}") from None
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ParseError(f"expected 'key: value', got {line!r}", line=lineno)
        key, _, val = line.partition(":")
        try:
            values[key.strip()] = float(val.strip())
        except ValueError:
            raise ParseError(f"non-numeric value {val.strip()!r}", line=lineno) from None
    missing = [k for k in _EARTH_KEYS if k not in values]
    if missing:
        raise ParseError(f"missing keys: {', '.join(missing)}")
    anchor = GeoFix(0.0, values["anchor_lat"], values["anchor_lon"],
                    values["anchor_alt"])
    return EarthTransform(
        rotation_z=values["rotation_z_rad"],
        translation=np.array([values["east_m"], values["north_m"]]),
        anchor=anchor,
        rms_residual=values["rms_m"],
        up_offset=values.get("up_m", 0.0),
    )


def load_earth_transform(path) -> EarthTransform:
    with open(path, "rb") as fh:
        return parse_earth_transform(fh.read())


def save_earth_transform(t: EarthTransform, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(format_earth_transform(t))
