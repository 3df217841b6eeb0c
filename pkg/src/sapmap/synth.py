"""Synthetic saplings and capture sessions with exact ground truth.

Saplings are parametric: a vertical stem cylinder, branch cylinders attached
at given heights/orientations, and ellipsoidal leaf blobs at branch tips, all
surface-sampled at a configurable density and seeded, so every generated
point carries a true leaf/wood label and the true topology and traits are
known exactly. Plot sessions add the capture side: a lawnmower walk with an
inwards-facing dome loop around each sapling, a GNSS track produced by a
planted map-to-Earth transform, and per-sapling camera trajectories and
clouds exported in a planted arbitrary-scale reconstruction frame.

Component sampling is ordered (stem, branches in list order, then leaves per
branch) with noise drawn per component, so variant specs that drop trailing
components reproduce the remaining points exactly. That makes defoliated and
pruned-branch session pairs byte-comparable for change detection tests.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (GeoFix, GeoTrack, PointCloud, Pose, SimilarityTransform,
                   SkeletonGraph, Trajectory, float_repr, quat_from_matrix,
                   quat_multiply, quat_normalize, quat_to_matrix)
from .errors import ParseError
from .georef import EarthTransform, enu_to_geodetic
from .io import save_gnss, save_ply, save_trajectory
from .skeleton import count_bifurcations
from .traits import TraitReport, leaf_profile

WOOD_RGB = (101, 67, 33)
LEAF_RGB = (34, 139, 34)


@dataclass(frozen=True)
class BranchSpec:
    """One branch: where it attaches on the stem and where it points."""

    attach_height: float
    azimuth_deg: float
    elevation_deg: float
    length: float
    radius: float

    def direction(self):
        az = math.radians(self.azimuth_deg)
        el = math.radians(self.elevation_deg)
        return np.array([
            math.cos(el) * math.cos(az),
            math.cos(el) * math.sin(az),
            math.sin(el),
        ])


@dataclass(frozen=True)
class SaplingSpec:
    """Parametric sapling: stem, branches, terminal foliage, sampling."""

    seed: int = 0
    stem_height: float = 1.0
    stem_radius: float = 0.01
    branches: tuple = ()
    leaves_per_branch_tip: int = 3
    leaf_blob_radius: float = 0.038
    canopy_radius: float | None = None
    density: float = 50_000.0
    noise_sigma: float = 0.0
    midbranch_foliage: bool = False

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if self.stem_height <= 0 or self.stem_radius <= 0:
            raise ValueError("stem dimensions must be positive")
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.leaf_blob_radius <= 0:
            raise ValueError("leaf_blob_radius must be positive")
        if self.canopy_radius is not None and self.canopy_radius <= 0:
            raise ValueError("canopy_radius must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for b in self.branches:
            if b.radius <= 0 or b.length <= 0:
                raise ValueError("branch dimensions must be positive")
            if not 0.0 <= b.attach_height <= self.stem_height:
                raise ValueError(
                    f"branch attach height {b.attach_height} outside the stem"
                )

    def defoliated(self) -> "SaplingSpec":
        """Same plant with all foliage gone (leaf-off season)."""
        return replace(self, leaves_per_branch_tip=0)

    def pruned(self) -> "SaplingSpec":
        """Same plant with its last listed branch removed (storm damage)."""
        if not self.branches:
            raise ValueError("cannot prune a branchless sapling")
        return replace(self, branches=self.branches[:-1])


@dataclass(frozen=True)
class SyntheticSapling:
    """Generated cloud with per-point labels plus exact truth."""

    cloud: PointCloud
    is_leaf: np.ndarray
    true_skeleton: SkeletonGraph
    true_report: TraitReport
    true_height: float
    true_bifurcations: int
    true_lwr: float


def _orthonormal_basis(direction):
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0])
    if abs(d @ helper) > 0.99:
        helper = np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    return u, v


def _sample_cylinder(rng, base, direction, length, radius, density):
    count = max(int(math.ceil(density * 2.0 * math.pi * radius * length)), 8)
    u, v = _orthonormal_basis(direction)
    t = rng.uniform(0.0, length, count)
    theta = rng.uniform(0.0, 2.0 * math.pi, count)
    d = direction / np.linalg.norm(direction)
    return (np.asarray(base)
            + t[:, None] * d
            + radius * np.cos(theta)[:, None] * u
            + radius * np.sin(theta)[:, None] * v)


def _sample_ellipsoid(rng, center, semi_axes, count):
    # filled ellipsoid: foliage clumps have interior structure, not a shell
    raw = rng.normal(size=(count, 3))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    radii = np.cbrt(rng.uniform(0.0, 1.0, count))
    rot = _random_rotation(rng)
    return np.asarray(center) + (raw * radii[:, None] * semi_axes) @ rot.T


def _random_rotation(rng):
    return quat_to_matrix(quat_normalize(rng.normal(size=4)))


def _random_quaternion(rng):
    return quat_normalize(rng.normal(size=4))


def _true_skeleton(spec: SaplingSpec) -> SkeletonGraph:
    heights = sorted({0.0, spec.stem_height}
                     | {b.attach_height for b in spec.branches})
    verts = [[0.0, 0.0, h] for h in heights]
    index_of_height = {h: i for i, h in enumerate(heights)}
    edges = [[i, i + 1] for i in range(len(heights) - 1)]
    for b in spec.branches:
        tip = np.array([0.0, 0.0, b.attach_height]) + b.direction() * b.length
        verts.append(tip.tolist())
        edges.append([index_of_height[b.attach_height], len(verts) - 1])
    return SkeletonGraph(np.array(verts), np.array(edges, dtype=np.int64), 0)


def generate(spec: SaplingSpec) -> SyntheticSapling:
    """Sample a sapling cloud with exact leaf/wood labels and truth values.

    Deterministic for a given spec (byte-identical reruns). The cloud is in a
    local frame with the stem base at the origin, tagged ``"sapling"``.
    """
    rng = np.random.default_rng(spec.seed)
    chunks = []
    labels = []

    def add(points, leaf):
        noiseless = np.asarray(points)
        noisy = noiseless + rng.normal(0.0, spec.noise_sigma, noiseless.shape) \
            if spec.noise_sigma > 0 else noiseless
        chunks.append((noiseless, noisy))
        labels.append(np.full(len(noiseless), leaf, dtype=bool))

    add(_sample_cylinder(rng, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0],
                         spec.stem_height, spec.stem_radius, spec.density),
        leaf=False)
    tips = []
    for b in spec.branches:
        base = np.array([0.0, 0.0, b.attach_height])
        add(_sample_cylinder(rng, base, b.direction(), b.length, b.radius,
                             spec.density), leaf=False)
        tips.append(base + b.direction() * b.length)
    if spec.leaves_per_branch_tip > 0:
        r = spec.leaf_blob_radius
        canopy = spec.canopy_radius if spec.canopy_radius is not None \
            else 1.2 * r
        semi = np.array([r, 0.95 * r, 0.85 * r])
        area = 4.0 * math.pi * (r * 0.78) ** 2
        blob_count = max(int(math.ceil(spec.density * area)), 16)
        # foliage sits on every terminal shoot: each branch tip plus the
        # stem leader
        anchors = []
        for b, tip in zip(spec.branches, tips):
            anchors.append((tip, b.direction()))
            if spec.midbranch_foliage:
                mid = (np.array([0.0, 0.0, b.attach_height])
                       + b.direction() * (0.5 * b.length))
                anchors.append((mid, _orthonormal_basis(b.direction())[0]))
        anchors.append((np.array([0.0, 0.0, spec.stem_height]),
                        np.array([0.0, 0.0, 1.0])))
        for anchor, outward in anchors:
            for _ in range(spec.leaves_per_branch_tip):
                # foliage clumps scatter through a canopy shell beyond the
                # twig tip, never behind it
                along = rng.uniform(0.6, 1.1) * canopy
                lateral = rng.normal(size=3)
                lateral -= (lateral @ outward) * outward
                lateral *= rng.uniform(0.0, 0.35) * canopy / max(
                    np.linalg.norm(lateral), 1e-12)
                add(_sample_ellipsoid(rng, anchor + along * outward + lateral,
                                      semi, blob_count), leaf=True)

    noiseless = np.vstack([c[0] for c in chunks])
    noisy = np.vstack([c[1] for c in chunks])
    is_leaf = np.concatenate(labels)

    jitter = rng.integers(-12, 13, size=(len(noisy), 3))
    base_rgb = np.where(is_leaf[:, None], LEAF_RGB, WOOD_RGB)
    colors = np.clip(base_rgb + jitter, 0, 255).astype(np.uint8)

    cloud = PointCloud(noisy, colors, frame_id="sapling")
    skeleton = _true_skeleton(spec)
    true_height = float(noiseless[:, 2].max() - noiseless[:, 2].min())
    true_bif = count_bifurcations(skeleton)
    n_leaf = int(is_leaf.sum())
    n_wood = int(len(is_leaf) - n_leaf)
    true_lwr = n_leaf / n_wood
    profile = None
    if n_leaf >= 2:
        profile = leaf_profile(PointCloud(noisy[is_leaf], frame_id="sapling"))
    report = TraitReport(
        sapling_id="", session_id="", height=true_height,
        bifurcations=true_bif, lwr=true_lwr, leaf_profile=profile,
        n_leaf=n_leaf, n_wood=n_wood, geo=(float("nan"), float("nan")),
    )
    return SyntheticSapling(cloud, is_leaf, skeleton, report, true_height,
                            true_bif, true_lwr)


# ---------------------------------------------------------------------------
# spec files (key=value plus repeated `branch =` lines)
# ---------------------------------------------------------------------------

def format_sapling_spec(spec: SaplingSpec) -> str:
    lines = [
        f"seed = {spec.seed}",
        f"stem_height = {float_repr(spec.stem_height)}",
        f"stem_radius = {float_repr(spec.stem_radius)}",
        f"leaves_per_branch_tip = {spec.leaves_per_branch_tip}",
        f"leaf_blob_radius = {float_repr(spec.leaf_blob_radius)}",
        f"density = {float_repr(spec.density)}",
        f"noise_sigma = {float_repr(spec.noise_sigma)}",
        f"midbranch_foliage = {'true' if spec.midbranch_foliage else 'false'}",
    ]
    for b in spec.branches:
        cells = [b.attach_height, b.azimuth_deg, b.elevation_deg, b.length,
                 b.radius]
        lines.append("branch = " + ",".join(float_repr(c) for c in cells))
    return "\n".join(lines) + "\n"


def parse_sapling_spec(text) -> SaplingSpec:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8 text: {exc}") from None
    kwargs = {}
    branches = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", line=lineno)
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        try:
            if key == "branch":
                cells = [float(c) for c in val.split(",")]
                if len(cells) != 5:
                    raise ParseError(
                        "branch needs 5 values: attach_height,azimuth_deg,"
                        "elevation_deg,length,radius", line=lineno)
                branches.append(BranchSpec(*cells))
            elif key in ("seed", "leaves_per_branch_tip"):
                kwargs[key] = int(val)
            elif key == "midbranch_foliage":
                kwargs[key] = val.lower() in ("true", "1", "yes")
            elif key in ("stem_height", "stem_radius", "leaf_blob_radius",
                         "density", "noise_sigma"):
                kwargs[key] = float(val)
            else:
                raise ParseError(f"unknown key {key!r}", line=lineno)
        except ValueError:
            raise ParseError(f"bad value {val!r} for {key!r}", line=lineno) from None
    try:
        return SaplingSpec(branches=tuple(branches), **kwargs)
    except ValueError as exc:
        raise ParseError(f"invalid spec: {exc}") from None


# ---------------------------------------------------------------------------
# whole-session plot generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SaplingTruth:
    sapling_id: str
    spec: SaplingSpec
    base_position: tuple
    window: tuple
    sfm_transform: SimilarityTransform
    true_height: float
    true_bifurcations: int
    true_lwr: float


@dataclass(frozen=True)
class PlotTruth:
    session_id: str
    earth: EarthTransform
    saplings: tuple
    slam_path: str
    gnss_path: str
    manifest_path: str

    def sapling(self, sapling_id) -> SaplingTruth:
        for s in self.saplings:
            if s.sapling_id == sapling_id:
                return s
        raise KeyError(sapling_id)


def default_sapling_spec(index: int, *, seed_base: int = 1000,
                         noise_sigma: float = 0.0003) -> SaplingSpec:
    """A small deterministic family of sapling shapes, varied by index."""
    n_branches = 2 + (index % 4)
    stem_height = 0.7 + 0.12 * (index % 5)
    # keep the top attachment well below the stem tip so the stem-top chain
    # always survives branch-length pruning
    branches = []
    for b in range(n_branches):
        attach = stem_height * (0.30 + 0.38 * (b / max(n_branches - 1, 1)))
        branches.append(BranchSpec(
            attach_height=round(attach, 4),
            azimuth_deg=(360.0 / n_branches) * b + 17.0 * index,
            elevation_deg=38.0 + 7.0 * (b % 3),
            length=0.28 + 0.05 * (b % 2),
            radius=0.006,
        ))
    return SaplingSpec(
        seed=seed_base + index,
        stem_height=stem_height,
        stem_radius=0.011,
        branches=tuple(branches),
        leaves_per_branch_tip=3,
        leaf_blob_radius=0.038,
        canopy_radius=0.04,
        density=42_000.0,
        noise_sigma=noise_sigma,
    )


def _look_at_pose(timestamp, eye, target):
    z_axis = np.asarray(target, dtype=float) - np.asarray(eye, dtype=float)
    z_axis = z_axis / np.linalg.norm(z_axis)
    up = np.array([0.0, 0.0, 1.0])
    if abs(z_axis @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    x_axis = np.cross(up, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rot = np.column_stack([x_axis, y_axis, z_axis])
    return Pose(timestamp, quat_from_matrix(rot), np.asarray(eye, dtype=float))


def _dome_poses(center, t0, dt, count, radius=1.5):
    """Inwards-facing dome: two spiral loops around the sapling with a ramped
    elevation, so the camera positions are genuinely non-coplanar."""
    poses = []
    for i in range(count):
        frac = i / max(count - 1, 1)
        azim = 4.0 * math.pi * frac
        elev = math.radians(12.0 + 40.0 * frac)
        eye = (np.asarray(center)
               + radius * np.array([
                   math.cos(azim) * math.cos(elev),
                   math.sin(azim) * math.cos(elev),
                   math.sin(elev),
               ]))
        poses.append(_look_at_pose(t0 + i * dt, eye, center))
    return poses


def _walk_poses(start, end, t0, dt, count, height=1.4):
    poses = []
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    for i in range(count):
        frac = i / max(count - 1, 1)
        eye = start + (end - start) * frac
        eye = np.array([eye[0], eye[1], height])
        target = np.array([end[0], end[1], height])
        if np.allclose(target[:2], eye[:2]):
            target = eye + np.array([1.0, 0.0, 0.0])
        poses.append(_look_at_pose(t0 + i * dt, eye, target))
    return poses


def generate_plot(out_dir, *, n_saplings: int = 5, seed: int = 0,
                  session_id: str = "S1", date: str = "2025-07-15",
                  anchor: GeoFix | None = None,
                  sapling_specs=None, variants: dict | None = None,
                  gnss_noise_sigma: float = 0.8,
                  cloud_noise_sigma: float = 0.0004,
                  sfm_noise_sigma: float = 0.002,
                  earth_yaw_deg: float = 37.0,
                  earth_offset=(120.0, -45.0),
                  dome_poses: int = 220,
                  sapling_seed_base: int = 1000) -> PlotTruth:
    """Write one synthetic capture session to `out_dir` and return its truth.

    Produces ``slam.tum`` (map-frame trajectory), ``gnss.csv`` (planted Earth
    transform plus noise), per-sapling ``sfm_<id>.tum`` and ``cloud_<id>.ply``
    in planted arbitrary-scale frames, ``manifest.csv`` and ``truth.json``.

    Sapling geometry (specs and positions) depends only on the index and
    ``sapling_seed_base``, not on `seed`, so a second session generated with a
    different `seed` revisits the same plants; `variants` marks saplings that
    changed between sessions ("defoliated" or "pruned").
    """
    if n_saplings < 1:
        raise ValueError("need at least one sapling")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    anchor = anchor or GeoFix(0.0, 51.7759, -1.3399, 80.0)
    variants = variants or {}

    if sapling_specs is None:
        sapling_specs = [default_sapling_spec(i, seed_base=sapling_seed_base)
                         for i in range(n_saplings)]
    if len(sapling_specs) != n_saplings:
        raise ValueError("sapling_specs length must match n_saplings")
    ids = [f"sapling_{i + 1:02d}" for i in range(n_saplings)]
    bases = [np.array([6.0 * (i % 3), 7.0 * (i // 3), 0.0])
             for i in range(n_saplings)]

    earth = EarthTransform(
        rotation_z=math.radians(earth_yaw_deg),
        translation=np.asarray(earth_offset, dtype=float),
        anchor=anchor,
        rms_residual=0.0,
        up_offset=0.0,
    )

    # -- SLAM trajectory: walk to each sapling, dome around it --------------
    dt = 0.1
    t = 0.0
    poses = []
    windows = []
    cursor = np.array([-6.0, -6.0, 1.4])
    for i in range(n_saplings):
        approach = bases[i] + np.array([-2.5, 0.0, 1.4])
        walk = _walk_poses(cursor, approach, t, dt, 40)
        poses.extend(walk)
        t = walk[-1].timestamp + dt
        center = bases[i] + np.array([0.0, 0.0, 0.55 * sapling_specs[i].stem_height])
        dome = _dome_poses(center, t, dt, dome_poses)
        windows.append((dome[0].timestamp - dt / 2, dome[-1].timestamp + dt / 2))
        poses.extend(dome)
        t = dome[-1].timestamp + dt
        cursor = dome[-1].translation
    slam = Trajectory("M1", tuple(poses))
    slam_path = out / "slam.tum"
    save_trajectory(slam, slam_path)

    # -- GNSS track from the planted transform -------------------------------
    gnss_every = 5  # 10 Hz poses -> 2 Hz fixes
    fixes = []
    for p in slam.poses[::gnss_every]:
        en = earth.map_xy_to_enu(p.translation[:2])
        noise = rng.normal(0.0, gnss_noise_sigma, 3) if gnss_noise_sigma > 0 \
            else np.zeros(3)
        enu = np.array([en[0] + noise[0], en[1] + noise[1],
                        p.translation[2] + 1.5 * noise[2]])
        lat, lon, alt = enu_to_geodetic(enu, anchor)
        fixes.append(GeoFix(p.timestamp, lat, lon, alt))
    track = GeoTrack(tuple(fixes), anchor, has_altitude=True)
    gnss_path = out / "gnss.csv"
    save_gnss(track, gnss_path)

    # -- per-sapling SfM exports ---------------------------------------------
    truths = []
    manifest_rows = []
    for i, sid in enumerate(ids):
        spec = sapling_specs[i]
        variant = variants.get(sid)
        if variant == "defoliated":
            spec = spec.defoliated()
        elif variant == "pruned":
            spec = spec.pruned()
        elif variant is not None:
            raise ValueError(f"unknown variant {variant!r} for {sid}")

        sapling = generate(spec)
        map_points = sapling.cloud.points + bases[i]
        if cloud_noise_sigma > 0:
            map_points = map_points + rng.normal(0.0, cloud_noise_sigma,
                                                 map_points.shape)

        scale = math.exp(rng.uniform(math.log(0.05), math.log(20.0)))
        planted = SimilarityTransform(
            scale, _random_quaternion(rng), rng.uniform(-5.0, 5.0, 3),
            source_frame=f"F_{session_id}_{sid}", target_frame="M1",
        )
        inverse = planted.inverse()

        t0, t1 = windows[i]
        sub = [p for p in slam.poses if t0 <= p.timestamp <= t1]
        sfm_poses = []
        for p in sub:
            pos = p.translation
            if sfm_noise_sigma > 0:
                pos = pos + rng.normal(0.0, sfm_noise_sigma, 3)
            sfm_poses.append(Pose(
                p.timestamp,
                quat_normalize(quat_multiply(inverse.rotation, p.rotation)),
                inverse.apply(pos),
            ))
        sfm = Trajectory(planted.source_frame, tuple(sfm_poses))
        sfm_path = out / f"sfm_{sid}.tum"
        save_trajectory(sfm, sfm_path)

        cloud_f = PointCloud(inverse.apply(map_points), sapling.cloud.colors,
                             planted.source_frame)
        cloud_path = out / f"cloud_{sid}.ply"
        save_ply(cloud_f, cloud_path)

        manifest_rows.append(
            (session_id, sid, windows[i][0], windows[i][1],
             sfm_path.name, cloud_path.name)
        )
        truths.append(SaplingTruth(
            sapling_id=sid,
            spec=spec,
            base_position=tuple(float(v) for v in bases[i]),
            window=(float(windows[i][0]), float(windows[i][1])),
            sfm_transform=planted,
            true_height=sapling.true_height,
            true_bifurcations=sapling.true_bifurcations,
            true_lwr=sapling.true_lwr,
        ))

    manifest_path = out / "manifest.csv"
    with open(manifest_path, "w", newline="\n") as fh:
        fh.write("session_id,sapling_id,t_start,t_end,sfm_traj_path,cloud_path\n")
        for row in manifest_rows:
            fh.write(f"{row[0]},{row[1]},{float_repr(row[2])},"
                     f"{float_repr(row[3])},{row[4]},{row[5]}\n")

    truth = PlotTruth(
        session_id=session_id,
        earth=earth,
        saplings=tuple(truths),
        slam_path=str(slam_path),
        gnss_path=str(gnss_path),
        manifest_path=str(manifest_path),
    )
    _write_truth_json(out / "truth.json", truth, date)
    return truth


def _write_truth_json(path, truth: PlotTruth, date):
    payload = {
        "session_id": truth.session_id,
        "date": date,
        "earth": {
            "rotation_z_rad": float(truth.earth.rotation_z),
            "east_m": float(truth.earth.translation[0]),
            "north_m": float(truth.earth.translation[1]),
            "anchor_lat": truth.earth.anchor.latitude,
            "anchor_lon": truth.earth.anchor.longitude,
            "anchor_alt": truth.earth.anchor.altitude,
        },
        "saplings": [
            {
                "sapling_id": s.sapling_id,
                "base_position": [float(v) for v in s.base_position],
                "window": [float(v) for v in s.window],
                "sfm_scale": s.sfm_transform.scale,
                "sfm_rotation_wxyz": list(map(float, s.sfm_transform.rotation)),
                "sfm_translation": list(map(float, s.sfm_transform.translation)),
                "true_height": s.true_height,
                "true_bifurcations": s.true_bifurcations,
                "true_lwr": s.true_lwr,
                "spec": _spec_dict(s.spec),
            }
            for s in truth.saplings
        ],
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _spec_dict(spec: SaplingSpec):
    d = dataclasses.asdict(spec)
    d["branches"] = [dataclasses.asdict(b) for b in spec.branches]
    return d
