"""Parsers and writers for the on-disk interchange formats.

Three formats are supported:

* TUM trajectories: one pose per line, ``timestamp tx ty tz qx qy qz qw``,
  whitespace separated, ``#`` comments allowed.
* GNSS CSV: header ``timestamp,lat,lon[,alt]``, decimal degrees.
* PLY point clouds: ``ascii 1.0`` or ``binary_little_endian 1.0`` with
  ``float``/``double`` x,y,z and optional ``uchar`` red,green,blue.

Every malformed input raises :class:`~sapmap.errors.ParseError` carrying the
offending line number; parsers never raise anything else, whatever the bytes.
Binary big-endian PLY is rejected explicitly since none of the tools in this
pipeline produce it.
"""

import csv
import io as _io
from dataclasses import dataclass, field

import numpy as np

from .core import (GeoFix, GeoTrack, PointCloud, Pose, Trajectory, float_repr,
                   quat_normalize)
from .errors import ParseError

QUAT_INGEST_TOL = 1e-3

_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _ensure_bytes(data):
    if isinstance(data, bytes):
        return data
    if isinstance(data, str):
        return data.encode("utf-8")
    raise ParseError(f"expected bytes or str input, got {type(data).__name__}")


def _decode_text(data):
    try:
        return _ensure_bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"input is not valid UTF-8 text: {exc}") from None


# ---------------------------------------------------------------------------
# TUM trajectories
# ---------------------------------------------------------------------------

def parse_trajectory(data, frame_id="") -> Trajectory:
    """Parse a TUM-format trajectory from bytes or text.

    Quaternions arrive as (qx, qy, qz, qw) and are reordered to the internal
    scalar-first convention; norms off by at most 1e-3 are renormalised,
    anything worse is rejected.
    """
    text = _decode_text(data)
    poses = []
    last_t = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"expected 8 fields, got {len(fields)}", line=lineno)
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", line=lineno) from None
        t, tx, ty, tz, qx, qy, qz, qw = values
        if not all(np.isfinite(values)):
            raise ParseError("non-finite value", line=lineno)
        if last_t is not None and t <= last_t:
            raise ParseError(
                f"timestamp {t} not strictly increasing (previous {last_t})",
                line=lineno,
            )
        last_t = t
        q = np.array([qw, qx, qy, qz])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > QUAT_INGEST_TOL:
            raise ParseError(
                f"quaternion norm {norm:.6f} deviates from 1 by more than "
                f"{QUAT_INGEST_TOL}",
                line=lineno,
            )
        poses.append(Pose(t, quat_normalize(q), np.array([tx, ty, tz])))
    if not poses:
        raise ParseError("trajectory file contains no poses")
    return Trajectory(frame_id, tuple(poses))


def format_trajectory(traj: Trajectory) -> str:
    """Render a trajectory as TUM text (lossless float formatting)."""
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for p in traj.poses:
        fields = [p.timestamp, *p.translation, *p.rotation[1:], p.rotation[0]]
        lines.append(" ".join(float_repr(v) for v in fields))
    return "\n".join(lines) + "\n"


def load_trajectory(path, frame_id="") -> Trajectory:
    with open(path, "rb") as fh:
        return parse_trajectory(fh.read(), frame_id=frame_id)


def save_trajectory(traj: Trajectory, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(format_trajectory(traj))


# ---------------------------------------------------------------------------
# GNSS CSV
# ---------------------------------------------------------------------------

def parse_gnss(data, anchor: GeoFix | None = None) -> GeoTrack:
    """Parse a GNSS CSV (``timestamp,lat,lon[,alt]``) into a GeoTrack.

    The anchor defaults to the first fix unless one is supplied.
    """
    text = _decode_text(data)
    reader = csv.reader(_io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty GNSS file") from None
    except csv.Error as exc:
        raise ParseError(f"malformed CSV: {exc}") from None
    cols = [c.strip().lower() for c in header]
    if cols[:3] != ["timestamp", "lat", "lon"]:
        raise ParseError(
            f"header must be 'timestamp,lat,lon[,alt]', got {','.join(cols)!r}",
            line=1,
        )
    has_alt = len(cols) == 4 and cols[3] == "alt"
    if len(cols) > 3 and not has_alt:
        raise ParseError(f"unexpected columns {cols[3:]}", line=1)
    fixes = []
    last_t = None
    rows = []
    try:
        rows = list(enumerate(reader, start=2))
    except csv.Error as exc:
        raise ParseError(f"malformed CSV: {exc}") from None
    for lineno, row in rows:
        if not row or all(not c.strip() for c in row):
            continue
        expected = 4 if has_alt else 3
        if len(row) != expected:
            raise ParseError(
                f"expected {expected} cells, got {len(row)}", line=lineno
            )
        try:
            values = [float(c) for c in row]
        except ValueError:
            raise ParseError(f"non-numeric cell in {row!r}", line=lineno) from None
        if not all(np.isfinite(values)):
            raise ParseError("non-finite value", line=lineno)
        t = values[0]
        if last_t is not None and t <= last_t:
            raise ParseError(
                f"timestamp {t} not strictly increasing (previous {last_t})",
                line=lineno,
            )
        last_t = t
        alt = values[3] if has_alt else 0.0
        try:
            fixes.append(GeoFix(t, values[1], values[2], alt))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
    if not fixes:
        raise ParseError("GNSS file contains no fixes")
    return GeoTrack(tuple(fixes), anchor if anchor is not None else fixes[0],
                    has_altitude=has_alt)


def format_gnss(track: GeoTrack) -> str:
    header = "timestamp,lat,lon,alt" if track.has_altitude else "timestamp,lat,lon"
    lines = [header]
    for f in track.fixes:
        row = [repr(f.timestamp), repr(f.latitude), repr(f.longitude)]
        if track.has_altitude:
            row.append(repr(f.altitude))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def load_gnss(path, anchor=None) -> GeoTrack:
    with open(path, "rb") as fh:
        return parse_gnss(fh.read(), anchor=anchor)


def save_gnss(track: GeoTrack, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(format_gnss(track))


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

@dataclass
class PlyProperty:
    type: str
    name: str


@dataclass
class PlyElement:
    name: str
    count: int
    properties: list = field(default_factory=list)


@dataclass
class PlyHeader:
    """Parsed PLY header: storage format plus per-element property tables."""

    format: str
    elements: list = field(default_factory=list)

    def element(self, name):
        for el in self.elements:
            if el.name == name:
                return el
        return None


def _parse_ply_header(data: bytes):
    """Split the header off a PLY byte stream.

    Returns (header, payload, n_header_lines).
    """
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing 'ply' magic or 'end_header')")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("missing newline after end_header")
    header_bytes, payload = data[:nl], data[nl + 1:]
    try:
        header_lines = header_bytes.decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise ParseError("PLY header is not ASCII") from None

    fmt = None
    elements = []
    for lineno, raw in enumerate(header_lines, start=1):
        line = raw.strip()
        if lineno == 1:
            if line != "ply":
                raise ParseError("first line must be 'ply'", line=1)
            continue
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        parts = line.split()
        if parts[0] == "format":
            if len(parts) != 3:
                raise ParseError(f"bad format line {line!r}", line=lineno)
            if parts[1] == "binary_big_endian":
                raise ParseError("binary big-endian PLY is not supported", line=lineno)
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unknown PLY format {parts[1]!r}", line=lineno)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ParseError(f"bad element line {line!r}", line=lineno)
            try:
                count = int(parts[2])
            except ValueError:
                raise ParseError(f"bad element count {parts[2]!r}", line=lineno) from None
            if count < 0:
                raise ParseError(f"negative element count {count}", line=lineno)
            elements.append(PlyElement(parts[1], count))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            if parts[1] == "list":
                if len(parts) != 5:
                    raise ParseError(f"bad list property {line!r}", line=lineno)
                elements[-1].properties.append(PlyProperty("list", parts[4]))
            else:
                if len(parts) != 3:
                    raise ParseError(f"bad property line {line!r}", line=lineno)
                if parts[1] not in _PLY_DTYPES:
                    raise ParseError(f"unknown property type {parts[1]!r}", line=lineno)
                elements[-1].properties.append(PlyProperty(parts[1], parts[2]))
        elif parts[0] == "end_header":
            break
        else:
            raise ParseError(f"unrecognised header line {line!r}", line=lineno)
    if fmt is None:
        raise ParseError("PLY header missing format line")
    return PlyHeader(fmt, elements), payload, len(header_lines)


def _vertex_layout(header: PlyHeader):
    """Validate the vertex element and locate coordinate/color properties."""
    vertex = header.element("vertex")
    if vertex is None:
        raise ParseError("PLY file has no vertex element")
    names = [p.name for p in vertex.properties]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(f"vertex element missing property {axis!r}")
        ptype = vertex.properties[names.index(axis)].type
        if _PLY_DTYPES.get(ptype) not in ("f4", "f8"):
            raise ParseError(
                f"property {axis!r} must be float or double, got {ptype!r}"
            )
    declared = [c for c in ("red", "green", "blue") if c in names]
    has_colors = len(declared) == 3
    if has_colors:
        for c in declared:
            ptype = vertex.properties[names.index(c)].type
            if _PLY_DTYPES.get(ptype) != "u1":
                raise ParseError(f"color property {c!r} must be uchar, got {ptype!r}")
    return vertex, has_colors


def _element_dtype(element: PlyElement):
    fields = []
    for k, prop in enumerate(element.properties):
        if prop.type == "list":
            raise ParseError(
                f"list property {prop.name!r} in element {element.name!r} "
                "is not supported"
            )
        fields.append((f"f{k}", "<" + _PLY_DTYPES[prop.type]))
    return np.dtype(fields)


def parse_ply(data) -> PointCloud:
    """Parse an ASCII or binary-little-endian PLY into a PointCloud.

    Colors are populated iff all of red/green/blue are declared (as uchar).
    Additional scalar vertex properties are skipped; list properties and
    truncated payloads are errors.
    """
    data = _ensure_bytes(data)
    header, payload, n_header_lines = _parse_ply_header(data)
    vertex, has_colors = _vertex_layout(header)
    names = [p.name for p in vertex.properties]

    if header.format == "ascii":
        rows = _parse_ply_ascii(vertex, payload, header, n_header_lines)
    else:
        rows = _parse_ply_binary(vertex, payload, header)

    pts = np.column_stack([rows[names.index(a)] for a in ("x", "y", "z")])
    pts = pts.astype(float)
    if not np.all(np.isfinite(pts)):
        raise ParseError("PLY contains non-finite coordinates")
    colors = None
    if has_colors:
        colors = np.column_stack(
            [rows[names.index(c)] for c in ("red", "green", "blue")]
        ).astype(np.uint8)
    return PointCloud(pts.reshape(-1, 3), colors)


def _parse_ply_ascii(vertex, payload, header, n_header_lines):
    try:
        text = payload.decode("ascii")
    except UnicodeDecodeError:
        raise ParseError("ASCII PLY payload contains non-ASCII bytes") from None
    lines = [ln for ln in text.splitlines()]
    # lines of elements preceding the vertex element are skipped
    cursor = 0
    for el in header.elements:
        if el.name == "vertex":
            break
        for prop in el.properties:
            if prop.type == "list":
                raise ParseError(
                    f"list property in element {el.name!r} before vertex data"
                )
        cursor += el.count
    nprop = len(vertex.properties)
    available = max(len(lines) - cursor, 0)
    if vertex.count > available:
        raise ParseError(
            f"truncated PLY: expected {vertex.count} vertices, "
            f"file has {available} data lines"
        )
    columns = [np.empty(vertex.count) for _ in range(nprop)]
    for i in range(vertex.count):
        lineno = n_header_lines + cursor + i + 1
        tokens = lines[cursor + i].split()
        if len(tokens) != nprop:
            raise ParseError(
                f"expected {nprop} values, got {len(tokens)}", line=lineno
            )
        try:
            for k in range(nprop):
                columns[k][i] = float(tokens[k])
        except ValueError:
            raise ParseError(f"non-numeric value in {lines[cursor + i]!r}",
                             line=lineno) from None
    for k, prop in enumerate(vertex.properties):
        if _PLY_DTYPES.get(prop.type) == "u1":
            col = columns[k]
            if np.any((col < 0) | (col > 255) | (col != np.floor(col))):
                raise ParseError(f"property {prop.name!r} has values outside uchar range")
    return columns


def _parse_ply_binary(vertex, payload, header):
    offset = 0
    for el in header.elements:
        if el.name == "vertex":
            break
        stride = _element_dtype(el).itemsize
        offset += stride * el.count
    dtype = _element_dtype(vertex)
    need = dtype.itemsize * vertex.count
    if len(payload) - offset < need:
        raise ParseError(
            f"truncated PLY payload: need {need} bytes for {vertex.count} "
            f"vertices, have {max(len(payload) - offset, 0)}"
        )
    try:
        records = np.frombuffer(payload, dtype=dtype, count=vertex.count,
                                offset=offset)
    except ValueError as exc:
        raise ParseError(f"cannot read PLY payload: {exc}") from None
    return [records[f"f{k}"] for k in range(len(vertex.properties))]


def write_ply(cloud: PointCloud, format="binary_little_endian") -> bytes:
    """Serialise a point cloud to PLY bytes.

    Binary output stores coordinates as doubles so a write/parse roundtrip is
    bit-exact; ASCII output keeps 9 significant digits.
    """
    if format not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format {format!r}")
    n = len(cloud)
    has_colors = cloud.colors is not None
    header = ["ply", f"format {format} 1.0", f"element vertex {n}",
              "property double x", "property double y", "property double z"]
    if has_colors:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header.append("end_header")
    out = ("\n".join(header) + "\n").encode("ascii")

    if format == "ascii":
        lines = []
        for i in range(n):
            x, y, z = cloud.points[i]
            line = f"{x:.9g} {y:.9g} {z:.9g}"
            if has_colors:
                r, g, b = cloud.colors[i]
                line += f" {r:d} {g:d} {b:d}"
            lines.append(line)
        body = ("\n".join(lines) + "\n") if lines else ""
        return out + body.encode("ascii")

    fields = [("f0", "<f8"), ("f1", "<f8"), ("f2", "<f8")]
    if has_colors:
        fields += [("f3", "u1"), ("f4", "u1"), ("f5", "u1")]
    records = np.empty(n, dtype=np.dtype(fields))
    records["f0"] = cloud.points[:, 0]
    records["f1"] = cloud.points[:, 1]
    records["f2"] = cloud.points[:, 2]
    if has_colors:
        records["f3"] = cloud.colors[:, 0]
        records["f4"] = cloud.colors[:, 1]
        records["f5"] = cloud.colors[:, 2]
    return out + records.tobytes()


def load_ply(path, frame_id="") -> PointCloud:
    with open(path, "rb") as fh:
        return parse_ply(fh.read()).with_frame(frame_id)


def save_ply(cloud: PointCloud, path, format="binary_little_endian"):
    with open(path, "wb") as fh:
        fh.write(write_ply(cloud, format=format))
