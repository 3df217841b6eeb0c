"""Multi-session store of geo-referenced sapling records.

Layout on disk, rooted at a registry directory::

    index.csv                      one row per (sapling, session) record
    plot/<sapling_id>/<session_id>/{cloud.ply, skel.txt, leaf.ply,
                                    wood.ply, report.txt, profile.csv}

Records are immutable: re-processing a session should be written under a new
session id rather than overwriting. Change reports quantify growth or damage
between two sessions of the same sapling; the paper source of this pipeline
only inspects such changes qualitatively, so the metrics here (scalar deltas,
an L1 distance between resampled leaf profiles, map-position drift) are this
package's own proposal.

Concurrency: one writer at a time (serialised by the caller), any number of
concurrent readers of a saved registry.
"""

import csv
import datetime
import io as _io
import shutil
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import RegistryError
from .traits import LeafProfile, TraitReport, resample_profile, PROFILE_BINS

ARTIFACT_NAMES = ("cloud.ply", "skel.txt", "leaf.ply", "wood.ply",
                  "report.txt", "profile.csv")

INDEX_COLUMNS = ("sapling_id", "session_id", "date", "lat", "lon",
                 "x", "y", "z", "height_m", "bifurcations", "lwr")


@dataclass(frozen=True)
class SaplingRecord:
    """One sapling capture: identity, geo/map position, trait summary and
    the relative paths of its persisted artifacts."""

    sapling_id: str
    session_id: str
    capture_date: datetime.date
    geo: tuple
    map_position: tuple
    height_m: float
    bifurcations: int
    lwr: float
    cloud_path: str
    skeleton_path: str
    leaf_path: str
    wood_path: str
    report_path: str
    profile_path: str

    @property
    def key(self):
        return (self.sapling_id, self.session_id)


@dataclass(frozen=True)
class ChangeReport:
    """Session-to-session differences for one sapling (b minus a)."""

    sapling_id: str
    session_pair: tuple
    delta_height: float
    delta_bifurcations: int
    delta_lwr: float
    profile_distance: float
    position_drift: float

    def __post_init__(self):
        if not (0.0 <= self.profile_distance <= 2.0 + 1e-9):
            raise ValueError(
                f"profile_distance {self.profile_distance} outside [0, 2]"
            )
        if self.position_drift < 0:
            raise ValueError("position_drift must be >= 0")


def record_relpaths(sapling_id: str, session_id: str) -> dict:
    base = Path("plot") / sapling_id / session_id
    return {name: str(base / name) for name in ARTIFACT_NAMES}


class Registry:
    """In-memory registry bound to a root directory."""

    def __init__(self, root):
        self.root = Path(root)
        self._records = {}

    def __len__(self):
        return len(self._records)

    def __contains__(self, key):
        return tuple(key) in self._records

    @property
    def records(self):
        return dict(self._records)

    def get(self, sapling_id, session_id) -> SaplingRecord:
        try:
            return self._records[(sapling_id, session_id)]
        except KeyError:
            raise RegistryError(
                f"no record for sapling {sapling_id!r} session {session_id!r}"
            ) from None

    def sessions_of(self, sapling_id):
        """Records of one sapling, sorted by capture date."""
        found = [r for r in self._records.values() if r.sapling_id == sapling_id]
        return sorted(found, key=lambda r: (r.capture_date, r.session_id))

    def add_record(self, record: SaplingRecord):
        if record.key in self._records:
            raise RegistryError(
                f"duplicate record for sapling {record.sapling_id!r} "
                f"session {record.session_id!r}"
            )
        for attr in ("cloud_path", "skeleton_path", "leaf_path", "wood_path",
                     "report_path", "profile_path"):
            rel = getattr(record, attr)
            if not (self.root / rel).exists():
                raise RegistryError(
                    f"artifact {rel!r} for record {record.key} does not exist "
                    f"under {self.root}"
                )
        self._records[record.key] = record

    def ingest(self, *, sapling_id, session_id, capture_date, geo,
               map_position, report: TraitReport, artifact_paths: dict):
        """Copy artifact files into the registry layout and add a record.

        ``artifact_paths`` maps the names in :data:`ARTIFACT_NAMES` to source
        files; missing optional sources raise.
        """
        rels = record_relpaths(sapling_id, session_id)
        dest_dir = self.root / "plot" / sapling_id / session_id
        dest_dir.mkdir(parents=True, exist_ok=True)
        for name in ARTIFACT_NAMES:
            src = artifact_paths.get(name)
            if src is None:
                raise RegistryError(f"missing artifact source for {name!r}")
            src = Path(src)
            if not src.exists():
                raise RegistryError(f"artifact source {src} does not exist")
            dest = self.root / rels[name]
            if src.resolve() != dest.resolve():
                shutil.copyfile(src, dest)
        if isinstance(capture_date, str):
            capture_date = datetime.date.fromisoformat(capture_date)
        record = SaplingRecord(
            sapling_id=sapling_id,
            session_id=session_id,
            capture_date=capture_date,
            geo=(float(geo[0]), float(geo[1])),
            map_position=tuple(float(v) for v in map_position),
            height_m=float(report.height),
            bifurcations=int(report.bifurcations),
            lwr=float(report.lwr),
            cloud_path=rels["cloud.ply"],
            skeleton_path=rels["skel.txt"],
            leaf_path=rels["leaf.ply"],
            wood_path=rels["wood.ply"],
            report_path=rels["report.txt"],
            profile_path=rels["profile.csv"],
        )
        self.add_record(record)
        return record

    # -- change reporting ---------------------------------------------------

    def _load_profile(self, record: SaplingRecord) -> LeafProfile | None:
        from .traits import load_profile

        return load_profile(self.root / record.profile_path)

    def change_report(self, sapling_id, session_a, session_b) -> ChangeReport:
        """Differences of session_b relative to session_a for one sapling.

        Scalar traits difference directly; leaf profiles are resampled onto a
        common 200-bin grid spanning the union of their height ranges,
        renormalised, and compared by L1 integral (0 identical, 2 disjoint).
        A record pair where exactly one side lacks a profile scores the
        maximal distance 2; both absent scores 0.
        """
        rec_a = self.get(sapling_id, session_a)
        rec_b = self.get(sapling_id, session_b)
        prof_a = self._load_profile(rec_a)
        prof_b = self._load_profile(rec_b)
        distance = _profile_distance(prof_a, prof_b)
        drift = float(np.linalg.norm(
            np.array(rec_b.map_position) - np.array(rec_a.map_position)
        ))
        return ChangeReport(
            sapling_id=sapling_id,
            session_pair=(session_a, session_b),
            delta_height=rec_b.height_m - rec_a.height_m,
            delta_bifurcations=rec_b.bifurcations - rec_a.bifurcations,
            delta_lwr=rec_b.lwr - rec_a.lwr,
            profile_distance=distance,
            position_drift=drift,
        )

    # -- persistence ---------------------------------------------------------

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        rows = sorted(self._records.values(),
                      key=lambda r: (r.sapling_id, r.session_id))
        out = _io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(INDEX_COLUMNS)
        for r in rows:
            writer.writerow([
                r.sapling_id, r.session_id, r.capture_date.isoformat(),
                repr(r.geo[0]), repr(r.geo[1]),
                repr(r.map_position[0]), repr(r.map_position[1]),
                repr(r.map_position[2]),
                repr(r.height_m), str(r.bifurcations), repr(r.lwr),
            ])
        (self.root / "index.csv").write_text(out.getvalue(), newline="\n")

    @classmethod
    def load(cls, root) -> "Registry":
        root = Path(root)
        index = root / "index.csv"
        if not index.exists():
            raise RegistryError(f"no index.csv under {root}")
        registry = cls(root)
        reader = csv.reader(_io.StringIO(index.read_text()))
        try:
            header = next(reader)
        except StopIteration:
            raise RegistryError("empty index.csv") from None
        if tuple(c.strip() for c in header) != INDEX_COLUMNS:
            raise RegistryError(
                f"index header {header!r} does not match {INDEX_COLUMNS}"
            )
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(INDEX_COLUMNS):
                raise RegistryError(
                    f"index row {rowno}: expected {len(INDEX_COLUMNS)} cells, "
                    f"got {len(row)}"
                )
            try:
                sapling_id, session_id = row[0], row[1]
                capture_date = datetime.date.fromisoformat(row[2])
                lat, lon = float(row[3]), float(row[4])
                x, y, z = float(row[5]), float(row[6]), float(row[7])
                height = float(row[8])
                bifurcations = int(row[9])
                lwr = float(row[10])
            except ValueError as exc:
                raise RegistryError(f"index row {rowno}: {exc}") from None
            rels = record_relpaths(sapling_id, session_id)
            record = SaplingRecord(
                sapling_id=sapling_id,
                session_id=session_id,
                capture_date=capture_date,
                geo=(lat, lon),
                map_position=(x, y, z),
                height_m=height,
                bifurcations=bifurcations,
                lwr=lwr,
                cloud_path=rels["cloud.ply"],
                skeleton_path=rels["skel.txt"],
                leaf_path=rels["leaf.ply"],
                wood_path=rels["wood.ply"],
                report_path=rels["report.txt"],
                profile_path=rels["profile.csv"],
            )
            if record.key in registry._records:
                raise RegistryError(
                    f"index row {rowno}: duplicate key {record.key}"
                )
            registry._records[record.key] = record
        return registry


def _profile_distance(prof_a: LeafProfile | None,
                      prof_b: LeafProfile | None) -> float:
    if prof_a is None and prof_b is None:
        return 0.0
    if prof_a is None or prof_b is None:
        return 2.0
    lo = min(prof_a.heights[0], prof_b.heights[0])
    hi = max(prof_a.heights[-1], prof_b.heights[-1])
    if hi <= lo:
        return 0.0
    grid = np.linspace(lo, hi, PROFILE_BINS)
    a = resample_profile(prof_a, grid)
    b = resample_profile(prof_b, grid)
    return float(np.trapezoid(np.abs(a - b), grid))


def add_record(registry: Registry, record: SaplingRecord) -> Registry:
    """Functional-style wrapper around :meth:`Registry.add_record`."""
    registry.add_record(record)
    return registry


def change_report(registry: Registry, sapling_id, session_a,
                  session_b) -> ChangeReport:
    return registry.change_report(sapling_id, session_a, session_b)


def save(registry: Registry, path=None):
    if path is not None and Path(path) != registry.root:
        raise RegistryError(
            f"registry is rooted at {registry.root}, cannot save to {path}"
        )
    registry.save()


def load(path) -> Registry:
    return Registry.load(path)
