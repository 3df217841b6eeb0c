"""Trait extraction: stem height, vertical leaf-density profiles and the
per-sapling trait report.

Height is the vertical span of the cloud after statistical outlier removal
(floating reconstruction artefacts would otherwise dominate the extremes); a
percentile mode is available as an alternative. The leaf profile is a 1-D
Gaussian kernel density over leaf-point heights on a fixed 200-bin grid,
renormalised to unit trapezoidal integral so profiles from different sessions
can be resampled onto a common grid and compared.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud, SkeletonGraph, float_repr
from .errors import ParseError, SapmapError
from .georef import EarthTransform, to_earth
from .leafwood import Segmentation, leaf_wood_ratio
from .skeleton import count_bifurcations

PROFILE_BINS = 200


def remove_statistical_outliers(cloud: PointCloud, k: int = 10,
                                std_factor: float = 2.0) -> np.ndarray:
    """Indices of points whose mean k-neighbour distance is within
    ``mean + std_factor * std`` of the cloud-wide distribution."""
    n = len(cloud)
    if n <= k:
        return np.arange(n)
    dist, _ = cKDTree(cloud.points).query(cloud.points, k=k + 1, workers=-1)
    mean_d = dist[:, 1:].mean(axis=1)
    threshold = mean_d.mean() + std_factor * mean_d.std()
    return np.nonzero(mean_d <= threshold)[0]


def stem_height(cloud: PointCloud, *, outlier_k: int = 10,
                outlier_std: float = 2.0, percentile_mode: bool = False) -> float:
    """Vertical extent of the cloud after outlier removal.

    ``percentile_mode`` uses the 0.5/99.5 z percentiles of the survivors
    instead of their extremes. A cloud with zero vertical spread returns 0 by
    convention.
    """
    if len(cloud) < 50:
        raise SapmapError(f"need at least 50 points for a height estimate, "
                          f"got {len(cloud)}")
    keep = remove_statistical_outliers(cloud, k=outlier_k, std_factor=outlier_std)
    z = cloud.points[keep, 2]
    if percentile_mode:
        lo, hi = np.percentile(z, [0.5, 99.5])
    else:
        lo, hi = z.min(), z.max()
    return float(max(hi - lo, 0.0))


# ---------------------------------------------------------------------------
# vertical leaf profile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeafProfile:
    """Leaf density over 200 uniformly spaced heights, unit trapezoidal
    integral."""

    heights: np.ndarray
    density: np.ndarray
    bandwidth: float

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=float)
        d = np.asarray(self.density, dtype=float)
        if h.shape != (PROFILE_BINS,) or d.shape != (PROFILE_BINS,):
            raise ValueError(
                f"profile arrays must have shape ({PROFILE_BINS},)"
            )
        if np.any(d < 0):
            raise ValueError("density must be nonnegative")
        h.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "density", d)

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.heights))


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(sigma, IQR / 1.34) * n^(-1/5); falls back to whichever
    spread measure is positive when the other degenerates to zero."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    sigma = values.std(ddof=1) if n > 1 else 0.0
    q75, q25 = np.percentile(values, [75, 25])
    iqr_scale = (q75 - q25) / 1.34
    if sigma > 0 and iqr_scale > 0:
        spread = min(sigma, iqr_scale)
    else:
        spread = max(sigma, iqr_scale)
    return 0.9 * spread * n ** (-0.2)


def leaf_profile(leaf: PointCloud) -> LeafProfile:
    """Gaussian KDE of leaf-point heights on a 200-bin grid over the leaf
    cloud's own z range, renormalised to unit integral.

    Degenerate inputs (all z equal) produce a single-spike profile over a
    1 mm half-width window and emit a warning.
    """
    if len(leaf) < 2:
        raise SapmapError(
            f"need at least 2 leaf points for a profile, got {len(leaf)}"
        )
    z = leaf.points[:, 2]
    z_min, z_max = float(z.min()), float(z.max())
    bw = silverman_bandwidth(z)
    if bw <= 0 or z_max - z_min <= 0:
        warnings.warn("degenerate leaf height spread; producing a spike "
                      "profile", stacklevel=2)
        half = 1e-3
        grid = np.linspace(z_min - half, z_max + half, PROFILE_BINS)
        bw = half / 10.0
    else:
        grid = np.linspace(z_min, z_max, PROFILE_BINS)

    density = np.zeros(PROFILE_BINS)
    norm = 1.0 / (len(z) * bw * math.sqrt(2.0 * math.pi))
    # chunk over data so grid x points stays bounded in memory
    step = max(1, 2_000_000 // PROFILE_BINS)
    for start in range(0, len(z), step):
        block = z[start:start + step]
        u = (grid[:, None] - block[None, :]) / bw
        density += np.exp(-0.5 * u * u).sum(axis=1)
    density *= norm

    total = np.trapezoid(density, grid)
    if total <= 0:
        raise SapmapError("leaf profile integrated to zero")
    return LeafProfile(grid, density / total, float(bw))


def resample_profile(profile: LeafProfile, grid: np.ndarray) -> np.ndarray:
    """Linear interpolation onto `grid` (zero outside the profile's support),
    renormalised to unit trapezoidal integral on the new grid."""
    values = np.interp(grid, profile.heights, profile.density, left=0.0, right=0.0)
    total = np.trapezoid(values, grid)
    if total > 0:
        values = values / total
    return values


# ---------------------------------------------------------------------------
# trait report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraitReport:
    """Per-sapling, per-session trait record."""

    sapling_id: str
    session_id: str
    height: float
    bifurcations: int
    lwr: float
    leaf_profile: LeafProfile | None
    n_leaf: int
    n_wood: int
    geo: tuple

    def __post_init__(self):
        if self.height <= 0:
            raise ValueError(f"height must be positive, got {self.height}")
        if self.lwr < 0:
            raise ValueError(f"lwr must be >= 0, got {self.lwr}")


def compute_traits(cloud: PointCloud, skeleton_pruned: SkeletonGraph,
                   segmentation: Segmentation,
                   earth_transform: EarthTransform | None,
                   sapling_id: str, session_id: str) -> TraitReport:
    """Assemble the trait report for one sapling capture.

    Height comes from the full cloud, the fork count from the pruned
    skeleton, the leaf/wood ratio and profile from the segmentation, and the
    geo position from the wood-point centroid pushed through the Earth
    transform (nan/nan when no transform is available). Saplings with fewer
    than 2 leaf points get no profile.
    """
    height = stem_height(cloud)
    bifurcations = count_bifurcations(skeleton_pruned)
    lwr = leaf_wood_ratio(segmentation)
    profile = None
    if segmentation.n_leaf >= 2:
        profile = leaf_profile(segmentation.leaf)

    if earth_transform is not None and segmentation.n_wood > 0:
        centroid = segmentation.wood.points.mean(axis=0)
        lat, lon, _ = to_earth(earth_transform, centroid)
        geo = (float(lat), float(lon))
    else:
        geo = (float("nan"), float("nan"))

    return TraitReport(
        sapling_id=sapling_id,
        session_id=session_id,
        height=height,
        bifurcations=bifurcations,
        lwr=lwr,
        leaf_profile=profile,
        n_leaf=segmentation.n_leaf,
        n_wood=segmentation.n_wood,
        geo=geo,
    )


# ---------------------------------------------------------------------------
# on-disk formats: key:value report plus a z,density CSV sidecar
# ---------------------------------------------------------------------------

def format_report(report: TraitReport) -> str:
    bw = (report.leaf_profile.bandwidth if report.leaf_profile is not None
          else float("nan"))
    lines = [
        f"sapling_id: {report.sapling_id}",
        f"session_id: {report.session_id}",
        f"height_m: {float_repr(report.height)}",
        f"bifurcations: {report.bifurcations}",
        f"lwr: {float_repr(report.lwr)}",
        f"n_leaf: {report.n_leaf}",
        f"n_wood: {report.n_wood}",
        f"lat: {float_repr(report.geo[0])}",
        f"lon: {float_repr(report.geo[1])}",
        f"profile_bandwidth_m: {float_repr(bw)}",
    ]
    return "\n".join(lines) + "\n"


def format_profile(profile: LeafProfile | None) -> str:
    lines = ["z,density"]
    if profile is not None:
        for z, d in zip(profile.heights, profile.density):
            lines.append(f"{float_repr(z)},{float_repr(d)}")
    return "\n".join(lines) + "\n"


def parse_report(text) -> dict:
    """Report file -> key:value dict (strings for ids, floats elsewhere)."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8 text: {exc}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ParseError(f"expected 'key: value', got {line!r}", line=lineno)
        key, _, val = line.partition(":")
        key, val = key.strip(), val.strip()
        if key in ("sapling_id", "session_id"):
            out[key] = val
        elif key == "bifurcations" or key.startswith("n_"):
            try:
                out[key] = int(val)
            except ValueError:
                raise ParseError(f"bad integer {val!r}", line=lineno) from None
        else:
            try:
                out[key] = float(val)
            except ValueError:
                raise ParseError(f"bad number {val!r}", line=lineno) from None
    return out


def parse_profile(text) -> LeafProfile | None:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8 text: {exc}") from None
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].lower() != "z,density":
        raise ParseError("profile file must start with 'z,density' header", line=1)
    if len(lines) == 1:
        return None
    zs, ds = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != 2:
            raise ParseError(f"expected 2 cells, got {len(cells)}", line=lineno)
        try:
            zs.append(float(cells[0]))
            ds.append(float(cells[1]))
        except ValueError:
            raise ParseError(f"bad number in {line!r}", line=lineno) from None
    if len(zs) != PROFILE_BINS:
        raise ParseError(
            f"profile must have {PROFILE_BINS} rows, got {len(zs)}"
        )
    grid = np.array(zs)
    density = np.array(ds)
    bw = float(np.diff(grid).mean()) if len(grid) > 1 else 0.0
    return LeafProfile(grid, density, bw)


def save_report(report: TraitReport, report_path, profile_path=None):
    with open(report_path, "w", newline="\n") as fh:
        fh.write(format_report(report))
    if profile_path is not None:
        with open(profile_path, "w", newline="\n") as fh:
            fh.write(format_profile(report.leaf_profile))


def load_report(report_path) -> dict:
    with open(report_path, "rb") as fh:
        return parse_report(fh.read())


def load_profile(profile_path) -> LeafProfile | None:
    with open(profile_path, "rb") as fh:
        return parse_profile(fh.read())
