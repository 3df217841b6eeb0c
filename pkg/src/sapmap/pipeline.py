"""End-to-end session processing driven by a flat key=value config file.

One run handles one capture session: fit the map-to-Earth transform from the
session's GNSS track, then per manifest row register the sapling's SfM export
into the map frame, scale its cloud, skeletonise twice (downsampled for
branch topology, full resolution for leaf/wood segmentation), extract traits
and file everything in the registry. Saplings are independent, so failures
are isolated per row and the rest of the plot still completes.
"""

import csv
import io as _io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .core import Trajectory
from .errors import ConfigError, SapmapError
from .georef import associate, fit_earth_transform, save_earth_transform
from .io import load_gnss, load_ply, load_trajectory, save_ply
from .leafwood import LeafWoodParams, segment_leaf_wood
from .registration import extract_subtrajectory, register_sfm, transform_cloud
from .registry import ARTIFACT_NAMES, Registry, record_relpaths
from .skeleton import (ContractionParams, TopologyParams, save_skeleton,
                       skeletonize)
from .traits import compute_traits, save_report

MAP_FRAME = "M1"

_DEFAULTS = {
    "date": "1970-01-01",
    "georef.u": None,
    "georef.max_gap": 0.5,
    "georef.time_offset": 0.0,
    "register.max_gap": 0.05,
    "skeleton.voxel": 0.005,
    "skeleton.k_neighbors": 16,
    "skeleton.sample_radius_fraction": 0.02,
    "skeleton.min_branch_length_factor": 3.0,
    "segment.sample_radius_fraction": 0.012,
    "segment.terminal_radius": 0.042,
    "segment.terminal_hops": 1,
}

_REQUIRED = ("slam_traj", "gnss_csv", "manifest", "out_root")

_INT_KEYS = {"georef.u", "skeleton.k_neighbors", "segment.terminal_hops"}


@dataclass
class PipelineConfig:
    """Validated pipeline settings; paths resolved against the config file."""

    slam_traj: Path
    gnss_csv: Path
    manifest: Path
    out_root: Path
    date: str = "1970-01-01"
    options: dict = field(default_factory=dict)

    def opt(self, key):
        return self.options.get(key, _DEFAULTS[key])


def parse_config(text, base_dir=".") -> PipelineConfig:
    """Parse `key = value` lines; unknown keys are rejected, relative paths
    resolve against `base_dir`."""
    base = Path(base_dir)
    raw = {}
    for lineno, line in enumerate(str(text).splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key not in _DEFAULTS and key not in _REQUIRED:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        raw[key] = val
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    paths = {}
    for key in _REQUIRED:
        p = base / raw.pop(key)
        if key != "out_root" and not p.exists():
            raise ConfigError(f"{key} path {p} does not exist")
        paths[key] = p

    options = {}
    date = raw.pop("date", _DEFAULTS["date"])
    for key, val in raw.items():
        if val.lower() in ("none", ""):
            options[key] = None
            continue
        try:
            if key in _INT_KEYS:
                options[key] = int(val)
            else:
                options[key] = float(val)
        except ValueError:
            raise ConfigError(f"bad value {val!r} for key {key!r}") from None
    return PipelineConfig(paths["slam_traj"], paths["gnss_csv"],
                          paths["manifest"], paths["out_root"], date, options)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


@dataclass
class ManifestRow:
    session_id: str
    sapling_id: str
    t_start: float
    t_end: float
    sfm_traj_path: Path
    cloud_path: Path


def parse_manifest(text, base_dir=".") -> list:
    base = Path(base_dir)
    reader = csv.reader(_io.StringIO(str(text)))
    try:
        header = next(reader)
    except StopIteration:
        raise ConfigError("empty manifest") from None
    expected = ["session_id", "sapling_id", "t_start", "t_end",
                "sfm_traj_path", "cloud_path"]
    if [c.strip() for c in header] != expected:
        raise ConfigError(
            f"manifest header must be {','.join(expected)!r}"
        )
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 6:
            raise ConfigError(f"manifest line {lineno}: expected 6 cells")
        try:
            rows.append(ManifestRow(
                session_id=row[0].strip(),
                sapling_id=row[1].strip(),
                t_start=float(row[2]),
                t_end=float(row[3]),
                sfm_traj_path=base / row[4].strip(),
                cloud_path=base / row[5].strip(),
            ))
        except ValueError as exc:
            raise ConfigError(f"manifest line {lineno}: {exc}") from None
    if not rows:
        raise ConfigError("manifest contains no rows")
    return rows


@dataclass
class SaplingOutcome:
    sapling_id: str
    session_id: str
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


def _process_row(row: ManifestRow, slam: Trajectory, earth, config,
                 registry_root: Path):
    """Register, skeletonise, segment and measure one sapling; write its
    artifacts into the registry layout and return everything needed to file
    the record."""
    frame = f"F_{row.session_id}_{row.sapling_id}"
    sub = extract_subtrajectory(slam, row.t_start, row.t_end,
                                sapling_id=row.sapling_id,
                                session_id=row.session_id)
    sfm = load_trajectory(row.sfm_traj_path, frame_id=frame)
    registration = register_sfm(sfm, sub, max_gap=config.opt("register.max_gap"))
    cloud_f = load_ply(row.cloud_path, frame_id=frame)
    cloud_m = transform_cloud(cloud_f, registration.transform, MAP_FRAME)

    contraction = ContractionParams(
        k_neighbors=config.opt("skeleton.k_neighbors"))
    skel = skeletonize(
        cloud_m,
        voxel=config.opt("skeleton.voxel"),
        contraction=contraction,
        topology=TopologyParams(
            sample_radius_fraction=config.opt("skeleton.sample_radius_fraction"),
            min_branch_length_factor=config.opt("skeleton.min_branch_length_factor"),
        ),
    )
    over = skeletonize(
        cloud_m,
        voxel=None,
        contraction=contraction,
        topology=TopologyParams(
            sample_radius_fraction=config.opt("segment.sample_radius_fraction"),
        ),
        prune_graph=False,
    )
    seg = segment_leaf_wood(cloud_m, over, LeafWoodParams(
        terminal_hops=config.opt("segment.terminal_hops"),
        terminal_radius=config.opt("segment.terminal_radius"),
    ))
    report = compute_traits(cloud_m, skel, seg, earth,
                            sapling_id=row.sapling_id,
                            session_id=row.session_id)

    rels = record_relpaths(row.sapling_id, row.session_id)
    out_dir = registry_root / "plot" / row.sapling_id / row.session_id
    out_dir.mkdir(parents=True, exist_ok=True)
    save_ply(cloud_m, registry_root / rels["cloud.ply"])
    save_skeleton(skel, registry_root / rels["skel.txt"])
    save_ply(seg.leaf, registry_root / rels["leaf.ply"])
    save_ply(seg.wood, registry_root / rels["wood.ply"])
    save_report(report, registry_root / rels["report.txt"],
                registry_root / rels["profile.csv"])

    wood_centroid = seg.wood.points.mean(axis=0) if seg.n_wood else \
        cloud_m.points.mean(axis=0)
    return report, wood_centroid, {
        name: registry_root / rels[name] for name in ARTIFACT_NAMES
    }


def pipeline_run(config: PipelineConfig, jobs: int = 1):
    """Run the whole session; returns (registry, outcomes).

    Per-sapling work runs in a thread pool when ``jobs > 1`` (the numerical
    kernels release the GIL); registry writes stay in the calling thread. A
    failing sapling is recorded in its outcome and does not stop the others.
    """
    slam = load_trajectory(config.slam_traj, frame_id=MAP_FRAME)
    track = load_gnss(config.gnss_csv)
    pairs = associate(slam, track,
                      u=config.opt("georef.u"),
                      max_gap=config.opt("georef.max_gap"),
                      time_offset=config.opt("georef.time_offset"))
    earth = fit_earth_transform(pairs)
    rows = parse_manifest(config.manifest.read_text(),
                          base_dir=config.manifest.parent)

    config.out_root.mkdir(parents=True, exist_ok=True)
    save_earth_transform(earth, config.out_root / "earth.txt")

    try:
        registry = Registry.load(config.out_root)
    except SapmapError:
        registry = Registry(config.out_root)

    outcomes = []

    def work(row):
        return _process_row(row, slam, earth, config, config.out_root)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [(row, pool.submit(work, row)) for row in rows]
            results = []
            for row, fut in futures:
                try:
                    results.append((row, fut.result(), None))
                except SapmapError as exc:
                    results.append((row, None, str(exc)))
                except (OSError, ValueError) as exc:
                    results.append((row, None, f"{type(exc).__name__}: {exc}"))
    else:
        results = []
        for row in rows:
            try:
                results.append((row, work(row), None))
            except SapmapError as exc:
                results.append((row, None, str(exc)))
            except (OSError, ValueError) as exc:
                results.append((row, None, f"{type(exc).__name__}: {exc}"))

    for row, result, error in results:
        if error is not None:
            outcomes.append(SaplingOutcome(row.sapling_id, row.session_id,
                                           error))
            continue
        report, wood_centroid, artifact_paths = result
        try:
            registry.ingest(
                sapling_id=row.sapling_id,
                session_id=row.session_id,
                capture_date=config.date,
                geo=report.geo,
                map_position=wood_centroid,
                report=report,
                artifact_paths=artifact_paths,
            )
            outcomes.append(SaplingOutcome(row.sapling_id, row.session_id))
        except SapmapError as exc:
            outcomes.append(SaplingOutcome(row.sapling_id, row.session_id,
                                           str(exc)))
    registry.save()
    return registry, outcomes
